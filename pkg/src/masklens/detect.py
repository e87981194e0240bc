"""Score tables, threshold decisions, and detection metrics.

Every detector in this package reduces to a per-sample confidence score plus
an orientation flag saying whether low or high scores indicate a poisoned
sample. This module turns such tables into binary decisions and ranking
metrics. AUROC and AUPRC are computed from scratch (rank statistic and
step-wise precision-recall sum) so they can be cross-checked against
brute-force oracles.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

LOW_IS_BACKDOOR = "low_is_backdoor"
HIGH_IS_BACKDOOR = "high_is_backdoor"
ORIENTATIONS = (LOW_IS_BACKDOOR, HIGH_IS_BACKDOOR)


@dataclass(frozen=True)
class ScoreTable:
    """Per-sample detection confidence scores with ground-truth columns."""

    index: np.ndarray        # (n,) sample ids
    score: np.ndarray        # (n,) float64, finite
    is_backdoor: np.ndarray  # (n,) bool ground truth
    label: np.ndarray        # (n,) int labels (as seen by the trainer)
    orientation: str
    method: str | None = None

    def __post_init__(self):
        index = np.ascontiguousarray(self.index, dtype=np.int64)
        score = np.ascontiguousarray(self.score, dtype=np.float64)
        flags = np.ascontiguousarray(self.is_backdoor, dtype=bool)
        label = np.ascontiguousarray(self.label, dtype=np.int64)
        n = index.shape[0]
        if not (score.shape == flags.shape == label.shape == (n,)):
            raise ValueError("score table columns must have identical length")
        if not np.isfinite(score).all():
            raise ValueError("scores must be finite")
        if self.orientation not in ORIENTATIONS:
            raise ValueError(f"orientation must be one of {ORIENTATIONS}")
        for arr in (index, score, flags, label):
            arr.flags.writeable = False
        object.__setattr__(self, "index", index)
        object.__setattr__(self, "score", score)
        object.__setattr__(self, "is_backdoor", flags)
        object.__setattr__(self, "label", label)

    def __len__(self) -> int:
        return self.index.shape[0]

    def backdoor_likeness(self) -> np.ndarray:
        """Scores re-signed so that larger always means more backdoor-like."""
        return -self.score if self.orientation == LOW_IS_BACKDOOR else self.score

    def with_method(self, method: str) -> "ScoreTable":
        return replace(self, method=method)


def fit_threshold(clean_scores, gamma: float) -> float:
    """Threshold at ``mean - gamma * std`` of a clean calibration set.

    Uses the sample (n-1) standard deviation. Requires at least two scores.
    """
    scores = np.asarray(clean_scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size < 2:
        raise ValueError("need at least 2 clean scores to fit a threshold")
    return float(scores.mean() - gamma * scores.std(ddof=1))


def classify(scores, threshold: float, orientation: str) -> np.ndarray:
    """Binary backdoor decisions; a score exactly at the threshold is flagged."""
    if orientation not in ORIENTATIONS:
        raise ValueError(f"orientation must be one of {ORIENTATIONS}")
    scores = np.asarray(scores, dtype=np.float64)
    if orientation == LOW_IS_BACKDOOR:
        return scores <= threshold
    return scores >= threshold


def _check_both_classes(table: ScoreTable) -> tuple[np.ndarray, np.ndarray]:
    pos = table.is_backdoor
    if not pos.any() or pos.all():
        raise ValueError("metric needs both backdoor and clean samples")
    return table.backdoor_likeness(), pos


def auroc(table: ScoreTable) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic.

    Positive class is the backdoor class; ties contribute half credit.
    """
    z, pos = _check_both_classes(table)
    n = len(z)
    order = np.argsort(z, kind="mergesort")
    zs = z[order]
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and zs[j + 1] == zs[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    n_pos = int(pos.sum())
    n_neg = n - n_pos
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def auprc(table: ScoreTable) -> float:
    """Area under the precision-recall curve by the step-wise sum.

    Thresholds sweep every distinct score (most backdoor-like first); the
    area accumulates precision times the recall increment at each step, with
    tied scores collapsed into a single threshold.
    """
    z, pos = _check_both_classes(table)
    order = np.argsort(-z, kind="mergesort")
    zs = z[order]
    ys = pos[order]
    tp = np.cumsum(ys)
    flagged = np.arange(1, len(z) + 1)
    # last position of each tie group is a threshold boundary
    boundary = np.append(np.nonzero(np.diff(zs))[0], len(z) - 1)
    precision = tp[boundary] / flagged[boundary]
    recall = tp[boundary] / pos.sum()
    prev_recall = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev_recall) * precision))


def roc_points(table: ScoreTable) -> tuple[np.ndarray, np.ndarray]:
    """(fpr, tpr) points of the ROC curve, one per distinct threshold."""
    z, pos = _check_both_classes(table)
    order = np.argsort(-z, kind="mergesort")
    ys = pos[order]
    tp = np.cumsum(ys)
    fp = np.cumsum(~ys)
    boundary = np.append(np.nonzero(np.diff(z[order]))[0], len(z) - 1)
    tpr = np.concatenate(([0.0], tp[boundary] / pos.sum()))
    fpr = np.concatenate(([0.0], fp[boundary] / (~pos).sum()))
    return fpr, tpr


def tpr_fpr(table: ScoreTable, threshold: float) -> tuple[float, float]:
    """True/false positive rates of the thresholded detector."""
    flagged = classify(table.score, threshold, table.orientation)
    pos = table.is_backdoor
    n_pos = int(pos.sum())
    n_neg = int((~pos).sum())
    tpr = float((flagged & pos).sum() / n_pos) if n_pos else 0.0
    fpr = float((flagged & ~pos).sum() / n_neg) if n_neg else 0.0
    return tpr, fpr


def trr_far(table: ScoreTable, threshold: float) -> tuple[float, float]:
    """Backdoor proportion inside the flagged set and inside its complement."""
    flagged = classify(table.score, threshold, table.orientation)
    pos = table.is_backdoor
    n_flagged = int(flagged.sum())
    n_rest = len(table) - n_flagged
    trr = float((flagged & pos).sum() / n_flagged) if n_flagged else 0.0
    far = float((~flagged & pos).sum() / n_rest) if n_rest else 0.0
    return trr, far


@dataclass(frozen=True)
class DetectionReport:
    """Detection metrics for one (attack, detector) pairing."""

    method: str
    auroc: float
    auprc: float
    threshold: float
    gamma: float
    tpr: float
    fpr: float
    trr: float
    far: float
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("auroc", "auprc", "tpr", "fpr", "trr", "far"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "auroc": self.auroc,
            "auprc": self.auprc,
            "threshold": self.threshold,
            "gamma": self.gamma,
            "tpr": self.tpr,
            "fpr": self.fpr,
            "trr": self.trr,
            "far": self.far,
            **self.extra,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def make_report(
    table: ScoreTable,
    gamma: float = 1.0,
    clean_fraction: float = 0.01,
    min_clean: int = 20,
    seed: int = 0,
) -> DetectionReport:
    """Full metric set for a score table.

    The threshold is fitted on a random clean subsample (at least
    ``min_clean`` scores, at most all clean scores), mimicking a defender who
    holds a small set of confirmed-clean samples.
    """
    clean_scores = table.score[~table.is_backdoor]
    n_take = min(len(clean_scores), max(min_clean, int(clean_fraction * len(table))))
    if n_take < 2:
        raise ValueError("not enough clean samples to calibrate a threshold")
    rng = np.random.default_rng(seed)
    sample = rng.choice(clean_scores, size=n_take, replace=False)
    t = fit_threshold(sample, gamma)
    tpr, fpr = tpr_fpr(table, t)
    trr, far = trr_far(table, t)
    return DetectionReport(
        method=table.method or "unknown",
        auroc=auroc(table),
        auprc=auprc(table),
        threshold=t,
        gamma=gamma,
        tpr=tpr,
        fpr=fpr,
        trr=trr,
        far=far,
    )
