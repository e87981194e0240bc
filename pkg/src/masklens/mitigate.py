"""Score-based dataset partitioning and unlearn/fine-tune mitigation."""

from __future__ import annotations

import copy

import numpy as np
import torch
from torch import nn

from .data import ImageSet
from .detect import ScoreTable

# cross-entropy ceiling multiplier: stop ascending once a batch is this far
# past the uniform-prediction loss, otherwise ascent diverges
ASCENT_CEILING_FACTOR = 4.0


def partition_by_score(dataset: ImageSet, table: ScoreTable, p_b: float, p_c: float) -> tuple[np.ndarray, np.ndarray]:
    """Split positions into suspected-backdoor and trusted-clean sets.

    The suspected set takes the floor(p_b * n) most backdoor-like samples,
    the trusted set the floor(p_c * n) least backdoor-like ones, from a
    single total order (ties broken by sample index), so the two are
    disjoint whenever p_b + p_c <= 1.
    """
    if p_b + p_c > 1.0:
        raise ValueError("p_b + p_c must not exceed 1")
    n = len(table)
    if n != len(dataset):
        raise ValueError("score table does not cover the dataset")
    n_b = int(np.floor(p_b * n))
    n_c = int(np.floor(p_c * n))
    if n_b < 1:
        raise ValueError(f"p_b={p_b} selects no samples")
    order = np.lexsort((table.index, -table.backdoor_likeness()))
    positions = np.arange(n)[order]
    return positions[:n_b].copy(), positions[n - n_c :].copy() if n_c else np.empty(0, dtype=np.int64)


def unlearn_finetune(model, dataset: ImageSet, idx_b: np.ndarray, idx_c: np.ndarray,
                     epochs: int = 5, lr: float = 5e-4, batch_size: int = 128,
                     seed: int = 0) -> torch.nn.Module:
    """Per epoch: one descent pass over the trusted set, then one ascent pass
    over the suspected set.

    Ascent on a batch stops once its loss passes a ceiling of
    ``ASCENT_CEILING_FACTOR * ln(K)``; unbounded cross-entropy ascent is
    numerically unstable. Returns a fine-tuned copy; the input model is
    untouched.
    """
    idx_b = np.asarray(idx_b, dtype=np.int64)
    idx_c = np.asarray(idx_c, dtype=np.int64)
    if np.intersect1d(idx_b, idx_c).size:
        raise ValueError("suspected and trusted partitions overlap")
    model = copy.deepcopy(model)
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=lr)
    criterion = nn.CrossEntropyLoss()
    ceiling = ASCENT_CEILING_FACTOR * float(np.log(dataset.n_classes))
    x_all = torch.as_tensor(dataset.images, dtype=torch.float32)
    y_all = torch.as_tensor(dataset.labels, dtype=torch.long)
    rng = np.random.default_rng(seed)

    def _pass(indices: np.ndarray, ascend: bool) -> None:
        for start in range(0, len(indices), batch_size):
            idx = indices[start : start + batch_size]
            loss = criterion(model(x_all[idx]), y_all[idx])
            if not torch.isfinite(loss):
                raise RuntimeError("mitigation diverged: non-finite loss")
            if ascend and loss.item() > ceiling:
                continue
            opt.zero_grad()
            ((-loss) if ascend else loss).backward()
            opt.step()

    for _ in range(epochs):
        _pass(rng.permutation(idx_c), ascend=False)
        _pass(rng.permutation(idx_b), ascend=True)
    model.eval()
    return model


def partition_quality(dataset: ImageSet, idx_b: np.ndarray, idx_c: np.ndarray) -> dict:
    """TRR/FAR of the partition plus the escaped-backdoor recall.

    TRR: backdoor proportion inside the suspected set. FAR: backdoor
    proportion inside the trusted set. Recall: fraction of all backdoor
    samples that landed in the trusted set.
    """
    flags = dataset.is_backdoor
    n_backdoor = int(flags.sum())
    trr = float(flags[idx_b].mean()) if len(idx_b) else 0.0
    far = float(flags[idx_c].mean()) if len(idx_c) else 0.0
    recall = float(flags[idx_c].sum() / n_backdoor) if n_backdoor else 0.0
    return {"trr": trr, "far": far, "recall": recall,
            "n_suspected": int(len(idx_b)), "n_trusted": int(len(idx_c))}
