"""Reference CNN, training with per-sample loss logging, and evaluation.

The classifier exposes two output heads: ``forward`` returns logits and
``features`` returns the flattened post-activation output of the last conv
block. Both heads are needed downstream; the feature head is non-negative by
construction (it sits behind a ReLU).
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .data import ImageSet

logger = logging.getLogger(__name__)


class ReferenceCNN(nn.Module):
    """Small convolutional classifier for desk-scale experiments.

    Layers, for input (c, h, w) and width multiplier W:
        conv1: c -> 8W, 3x3, pad 1 | batchnorm | ReLU | maxpool 2
        conv2: 8W -> 16W, 3x3, pad 1 | batchnorm | ReLU | maxpool 2
        conv3: 16W -> 16W, 3x3, pad 1 | batchnorm | ReLU   <- feature head (flattened)
        global pooling | mlp -> K logits                   <- logit head

    Feature dimensionality: 16W * floor(h/4) * floor(w/4). ``head_pool``
    picks the global pooling: "avg", "max", or "avgmax" (their
    concatenation). Max pooling keeps small high-activation regions from
    being averaged away, which matters for how strongly localized evidence
    can drive the logits. ``head_hidden`` > 0 inserts one ReLU hidden layer
    before the logits, which lets the head learn gated (conditional)
    responses instead of purely additive ones.
    """

    HEAD_POOLS = ("avg", "max", "avgmax")

    def __init__(self, input_shape: tuple[int, int, int], n_classes: int,
                 width_multiplier: int = 1, head_pool: str = "avgmax",
                 head_hidden: int = 0):
        super().__init__()
        c, h, w = input_shape
        if h < 8 or w < 8:
            raise ValueError(f"input {h}x{w} too small; need at least 8x8")
        if c < 1 or n_classes < 2:
            raise ValueError("need at least 1 channel and 2 classes")
        if head_pool not in self.HEAD_POOLS:
            raise ValueError(f"head_pool must be one of {self.HEAD_POOLS}")
        wm = int(width_multiplier)
        ch1, ch2, ch3 = 8 * wm, 16 * wm, 16 * wm
        self.conv1 = nn.Conv2d(c, ch1, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(ch1)
        self.conv2 = nn.Conv2d(ch1, ch2, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(ch2)
        self.conv3 = nn.Conv2d(ch2, ch3, 3, padding=1)
        self.bn3 = nn.BatchNorm2d(ch3)
        self.pool = nn.MaxPool2d(2)
        self.act = nn.ReLU()
        self.head_pool = head_pool
        self.head_hidden = int(head_hidden)
        pooled_dim = 2 * ch3 if head_pool == "avgmax" else ch3
        if self.head_hidden > 0:
            self.head = nn.Sequential(
                nn.Linear(pooled_dim, self.head_hidden),
                nn.ReLU(),
                nn.Linear(self.head_hidden, n_classes),
            )
        else:
            self.head = nn.Linear(pooled_dim, n_classes)
        self.input_shape = tuple(input_shape)
        self.n_classes = int(n_classes)
        self.width_multiplier = wm
        self.feature_dim = ch3 * (h // 4) * (w // 4)

    def _body(self, x: torch.Tensor) -> torch.Tensor:
        x = self.pool(self.act(self.bn1(self.conv1(x))))
        x = self.pool(self.act(self.bn2(self.conv2(x))))
        return self.act(self.bn3(self.conv3(x)))

    def _pooled(self, body: torch.Tensor) -> torch.Tensor:
        if self.head_pool == "avg":
            return body.mean(dim=(2, 3))
        if self.head_pool == "max":
            return body.amax(dim=(2, 3))
        return torch.cat([body.mean(dim=(2, 3)), body.amax(dim=(2, 3))], dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self._pooled(self._body(x)))

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self._body(x).flatten(1)

    def heads(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        body = self._body(x)
        return self.head(self._pooled(body)), body.flatten(1)

    def descriptor(self) -> dict:
        return {
            "kind": "reference_cnn",
            "input_shape": list(self.input_shape),
            "n_classes": self.n_classes,
            "width_multiplier": self.width_multiplier,
            "head_pool": self.head_pool,
            "head_hidden": self.head_hidden,
            "feature_dim": self.feature_dim,
        }


class MultiHeadCNN(nn.Module):
    """Shared conv trunk with one binary logit head per attribute."""

    def __init__(self, input_shape: tuple[int, int, int], attribute_names: tuple[str, ...],
                 width_multiplier: int = 1, head_pool: str = "avgmax"):
        super().__init__()
        self.trunk = ReferenceCNN(input_shape, 2, width_multiplier, head_pool)
        pooled_dim = self.trunk.head.in_features
        self.attr_heads = nn.ModuleList(nn.Linear(pooled_dim, 2) for _ in attribute_names)
        self.attribute_names = tuple(attribute_names)
        self.input_shape = tuple(input_shape)
        self.width_multiplier = int(width_multiplier)

    def head_logits(self, x: torch.Tensor) -> list[torch.Tensor]:
        pooled = self.trunk._pooled(self.trunk._body(x))
        return [head(pooled) for head in self.attr_heads]

    def descriptor(self) -> dict:
        return {
            "kind": "multihead_cnn",
            "input_shape": list(self.input_shape),
            "attribute_names": list(self.attribute_names),
            "width_multiplier": self.width_multiplier,
            "head_pool": self.trunk.head_pool,
        }


class HeadView(nn.Module):
    """One attribute head of a MultiHeadCNN presented as a plain classifier."""

    def __init__(self, base: MultiHeadCNN, head_index: int):
        super().__init__()
        self.base = base
        self.head_index = head_index
        self.n_classes = 2
        self.input_shape = base.input_shape

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        pooled = self.base.trunk._pooled(self.base.trunk._body(x))
        return self.base.attr_heads[self.head_index](pooled)

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.base.trunk.features(x)


def build_reference_cnn(input_shape, n_classes: int, width_multiplier: int = 1,
                        seed: int = 0, head_pool: str = "avgmax",
                        head_hidden: int = 0) -> ReferenceCNN:
    """Seeded construction so two builds with the same seed share weights."""
    torch.manual_seed(seed)
    model = ReferenceCNN(tuple(input_shape), n_classes, width_multiplier, head_pool, head_hidden)
    model.eval()
    return model


def build_multihead_cnn(input_shape, attribute_names, width_multiplier: int = 1,
                        seed: int = 0, head_pool: str = "avgmax") -> MultiHeadCNN:
    torch.manual_seed(seed)
    model = MultiHeadCNN(tuple(input_shape), tuple(attribute_names), width_multiplier, head_pool)
    model.eval()
    return model


# ---------------------------------------------------------------------------
# Inference helpers
# ---------------------------------------------------------------------------

def _as_batch_tensor(model, images) -> torch.Tensor:
    x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if x.dim() != 4:
        raise ValueError(f"expected (n, c, h, w) images, got shape {tuple(x.shape)}")
    expected = tuple(model.input_shape)
    if tuple(x.shape[1:]) != expected:
        raise ValueError(f"images of shape {tuple(x.shape[1:])} do not match model input {expected}")
    return x


def _batched(model, images, fn, batch_size: int = 512) -> np.ndarray:
    x = _as_batch_tensor(model, images)
    model.eval()
    outs = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            outs.append(fn(x[start : start + batch_size]).numpy())
    return np.concatenate(outs) if outs else np.empty((0,))


def forward_logits(model, images, batch_size: int = 512) -> np.ndarray:
    return _batched(model, images, model.forward, batch_size)


def forward_features(model, images, batch_size: int = 512) -> np.ndarray:
    return _batched(model, images, model.features, batch_size)


def predict_proba(model, images, batch_size: int = 512) -> np.ndarray:
    return _batched(model, images, lambda x: torch.softmax(model(x), dim=1), batch_size)


def predict_labels(model, images, batch_size: int = 512) -> np.ndarray:
    return forward_logits(model, images, batch_size).argmax(axis=1)


def input_gradient(model, images, objective) -> np.ndarray:
    """Gradient of a scalar objective of the model outputs w.r.t. the input.

    ``objective`` receives the (logits, features) tensors and must return a
    scalar tensor.
    """
    x = _as_batch_tensor(model, images).clone().requires_grad_(True)
    model.eval()
    logits, feats = model.heads(x)
    value = objective(logits, feats)
    if not torch.is_tensor(value) or value.dim() != 0:
        raise ValueError("objective must return a scalar tensor")
    (grad,) = torch.autograd.grad(value, x)
    return grad.numpy()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """SGD training settings; defaults follow the full-scale recipe."""

    epochs: int = 60
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 128
    lr_milestones: tuple[int, ...] = (45,)
    lr_gamma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass(frozen=True)
class LossHistory:
    """Per-epoch, per-sample training losses, shape (epochs, n)."""

    losses: np.ndarray

    def __post_init__(self):
        losses = np.ascontiguousarray(self.losses, dtype=np.float32)
        if losses.ndim != 2:
            raise ValueError("loss history must be (epochs, n)")
        if losses.size and losses.min() < 0:
            raise ValueError("losses must be non-negative")
        losses.flags.writeable = False
        object.__setattr__(self, "losses", losses)

    @property
    def n_epochs(self) -> int:
        return self.losses.shape[0]


def train_classifier(model: ReferenceCNN, dataset: ImageSet, config: TrainConfig) -> tuple[ReferenceCNN, LossHistory]:
    """Train a copy of the model, logging every sample's loss at every epoch.

    The input model is left untouched. Batches are visited in a seeded
    per-epoch shuffle, so single-threaded runs are bit-reproducible.
    """
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    model = copy.deepcopy(model)
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(config.lr_milestones),
                                                 gamma=config.lr_gamma)
    x_all = torch.as_tensor(dataset.images, dtype=torch.float32)
    y_all = torch.as_tensor(dataset.labels, dtype=torch.long)
    n = len(dataset)
    losses = np.zeros((config.epochs, n), dtype=np.float32)
    rng = np.random.default_rng(config.seed)
    criterion = nn.CrossEntropyLoss(reduction="none")
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            logits = model(x_all[idx])
            per_sample = criterion(logits, y_all[idx])
            loss = per_sample.mean()
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"training diverged: non-finite loss at epoch {epoch}, batch offset {start}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses[epoch, idx] = per_sample.detach().numpy()
        sched.step()
    model.eval()
    return model, LossHistory(losses)


def train_multihead(model: MultiHeadCNN, images: np.ndarray, attributes: np.ndarray,
                    config: TrainConfig) -> MultiHeadCNN:
    """Train all attribute heads jointly on the shared trunk (summed CE)."""
    if images.shape[0] == 0:
        raise ValueError("training set is empty")
    model = copy.deepcopy(model)
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=config.lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    x_all = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    y_all = torch.as_tensor(np.asarray(attributes).astype(np.int64))
    n = x_all.shape[0]
    rng = np.random.default_rng(config.seed)
    criterion = nn.CrossEntropyLoss()
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            logits = model.head_logits(x_all[idx])
            loss = sum(criterion(lg, y_all[idx, a]) for a, lg in enumerate(logits))
            if not torch.isfinite(loss):
                raise RuntimeError("multihead training diverged: non-finite loss")
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return model


def evaluate_accuracy(model, dataset: ImageSet) -> float:
    if len(dataset) == 0:
        raise ValueError("evaluation set is empty")
    pred = predict_labels(model, dataset.images)
    return float((pred == dataset.labels).mean())


def evaluate_asr(model, triggered: ImageSet, target_label: int) -> float:
    """Fraction of fully-triggered non-target samples predicted as the target."""
    if len(triggered) == 0:
        raise ValueError("evaluation set is empty")
    if (triggered.labels == target_label).any():
        raise ValueError("ASR set must not contain true target-class samples")
    pred = predict_labels(model, triggered.images)
    return float((pred == target_label).mean())


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_model(path, model) -> None:
    """Parameter blob (torch state dict) plus a JSON architecture descriptor."""
    path = Path(path)
    torch.save(model.state_dict(), path)
    path.with_suffix(".json").write_text(json.dumps(model.descriptor(), indent=2) + "\n")


def load_model(path):
    path = Path(path)
    desc = json.loads(path.with_suffix(".json").read_text())
    if desc["kind"] == "reference_cnn":
        model = ReferenceCNN(tuple(desc["input_shape"]), desc["n_classes"],
                             desc["width_multiplier"], desc.get("head_pool", "avgmax"),
                             desc.get("head_hidden", 0))
    elif desc["kind"] == "multihead_cnn":
        model = MultiHeadCNN(tuple(desc["input_shape"]), tuple(desc["attribute_names"]),
                             desc["width_multiplier"], desc.get("head_pool", "avgmax"))
    else:
        raise ValueError(f"unknown checkpoint kind {desc['kind']!r}")
    model.load_state_dict(torch.load(path, weights_only=True))
    model.eval()
    return model
