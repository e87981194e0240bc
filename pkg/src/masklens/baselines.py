"""Comparison detectors: early-loss ranking, prediction-entropy under
superimposition, spectral scores, and activation-cluster silhouettes.

Each detector emits the same ScoreTable as the mask-based method, with its
own orientation, so AUROC numbers are directly comparable.
"""

from __future__ import annotations

import logging

import numpy as np
from scipy.spatial.distance import cdist
from sklearn.cluster import KMeans
from sklearn.decomposition import PCA

from .data import ImageSet
from .detect import HIGH_IS_BACKDOOR, LOW_IS_BACKDOOR, ScoreTable
from .models import LossHistory, predict_proba

logger = logging.getLogger(__name__)


def abl_scores(history: LossHistory, dataset: ImageSet, n_epochs: int = 20) -> ScoreTable:
    """Mean per-sample training loss over the first ``n_epochs`` epochs.

    Samples a network memorizes early (canonically the poisoned ones) get
    low scores. Falls back to all available epochs when the history is
    shorter, with a log note.
    """
    losses = history.losses
    if losses.shape[0] == 0 or losses.shape[1] == 0:
        raise ValueError("empty loss history")
    if losses.shape[1] != len(dataset):
        raise ValueError("loss history does not match dataset size")
    use = min(n_epochs, losses.shape[0])
    if use < n_epochs:
        logger.info("loss history has %d epochs; using all of them (requested %d)",
                    losses.shape[0], n_epochs)
    scores = losses[:use].mean(axis=0).astype(np.float64)
    return ScoreTable(
        index=np.arange(len(dataset), dtype=np.int64),
        score=scores,
        is_backdoor=dataset.is_backdoor,
        label=dataset.labels,
        orientation=LOW_IS_BACKDOOR,
        method="abl",
    )


def strip_scores(model, dataset: ImageSet, overlay_pool: np.ndarray | None = None,
                 n_overlays: int = 64, seed: int = 0, batch_images: int = 32) -> ScoreTable:
    """Mean prediction entropy under superimposition with pool images.

    Each sample is averaged pixel-wise with ``n_overlays`` pool images (the
    training set itself by default); a triggered sample keeps forcing the
    backdoor label through the mix, so its softmax entropy stays low.
    Overlay picks come from per-sample seeded streams.
    """
    pool = dataset.images if overlay_pool is None else np.asarray(overlay_pool, dtype=np.float32)
    if pool.shape[0] == 0:
        raise ValueError("overlay pool is empty")
    n = len(dataset)
    scores = np.empty(n, dtype=np.float64)
    for start in range(0, n, batch_images):
        stop = min(start + batch_images, n)
        picks = np.stack([
            np.random.default_rng((seed, i)).integers(0, pool.shape[0], size=n_overlays)
            for i in range(start, stop)
        ])
        mixed = 0.5 * (dataset.images[start:stop, None] + pool[picks])
        flat = mixed.reshape(-1, *dataset.image_shape)
        probs = predict_proba(model, flat)
        ent = -np.where(probs > 0, probs * np.log(probs, where=probs > 0), 0.0).sum(axis=1)
        scores[start:stop] = ent.reshape(stop - start, n_overlays).mean(axis=1)
    return ScoreTable(
        index=np.arange(n, dtype=np.int64),
        score=scores,
        is_backdoor=dataset.is_backdoor,
        label=dataset.labels,
        orientation=LOW_IS_BACKDOOR,
        method="strip",
    )


def ss_scores(features: np.ndarray, dataset: ImageSet) -> ScoreTable:
    """Squared projection on each class's top right singular vector.

    Per class, features are centered and the first right singular vector of
    the centered matrix is taken; outliers along that direction (poisoned
    samples living in the wrong class) score high.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != len(dataset):
        raise ValueError("features do not match dataset size")
    scores = np.zeros(len(dataset), dtype=np.float64)
    for k in range(dataset.n_classes):
        members = np.nonzero(dataset.labels == k)[0]
        if len(members) == 0:
            continue
        if len(members) < 2:
            raise ValueError(f"class {k} has fewer than 2 samples")
        centered = features[members] - features[members].mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        scores[members] = (centered @ vt[0]) ** 2
    return ScoreTable(
        index=np.arange(len(dataset), dtype=np.int64),
        score=scores,
        is_backdoor=dataset.is_backdoor,
        label=dataset.labels,
        orientation=HIGH_IS_BACKDOOR,
        method="ss",
    )


def silhouette_values(points: np.ndarray, assignment: np.ndarray) -> np.ndarray:
    """Per-sample silhouette (b - a) / max(a, b) with a zero guard.

    Duplicate points split across clusters yield a = b = 0 and score 0;
    singleton clusters also score 0.
    """
    points = np.asarray(points, dtype=np.float64)
    assignment = np.asarray(assignment)
    dist = cdist(points, points)
    values = np.zeros(len(points), dtype=np.float64)
    clusters = np.unique(assignment)
    for i in range(len(points)):
        own = assignment[i]
        own_members = np.nonzero(assignment == own)[0]
        if len(own_members) < 2:
            continue
        a = dist[i, own_members].sum() / (len(own_members) - 1)
        b = min(
            dist[i, assignment == other].mean()
            for other in clusters if other != own
        )
        denom = max(a, b)
        values[i] = 0.0 if denom == 0.0 else (b - a) / denom
    return values


def ac_scores(features: np.ndarray, dataset: ImageSet, reduced_dim: int = 10,
              seed: int = 0, max_retries: int = 5) -> tuple[ScoreTable, dict[int, float]]:
    """Two-means silhouette per sample after per-class PCA reduction.

    A class holding a well-separated sub-cluster (poison plus its host class)
    produces high silhouettes, so high scores are suspicious. Returns the
    table and the per-class mean silhouette.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[0] != len(dataset):
        raise ValueError("features do not match dataset size")
    scores = np.zeros(len(dataset), dtype=np.float64)
    class_means: dict[int, float] = {}
    for k in range(dataset.n_classes):
        members = np.nonzero(dataset.labels == k)[0]
        if len(members) == 0:
            continue
        if len(members) <= reduced_dim:
            raise ValueError(f"class {k} has {len(members)} samples; need more than {reduced_dim}")
        reduced = PCA(n_components=reduced_dim, random_state=seed).fit_transform(features[members])
        assignment = None
        for attempt in range(max_retries):
            km = KMeans(n_clusters=2, n_init=10, random_state=seed + attempt)
            candidate = km.fit_predict(reduced)
            if len(np.unique(candidate)) == 2:
                assignment = candidate
                break
        if assignment is None:
            logger.warning("class %d never split into two clusters; silhouettes set to 0", k)
            class_means[k] = 0.0
            continue
        sil = silhouette_values(reduced, assignment)
        scores[members] = sil
        class_means[k] = float(sil.mean())
    table = ScoreTable(
        index=np.arange(len(dataset), dtype=np.int64),
        score=scores,
        is_backdoor=dataset.is_backdoor,
        label=dataset.labels,
        orientation=HIGH_IS_BACKDOOR,
        method="ac",
    )
    return table, class_means
