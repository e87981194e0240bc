"""Per-image minimal-pattern distillation.

For an image x and a frozen classifier f, the optimizer learns a 2D mask m
(one weight per pixel, shared across channels) by minimizing

    || f(x) - f(x_masked) ||_1  +  alpha * ||m||_1  +  beta * TV(m)

where x_masked keeps pixel i at mask value m_i and replaces the remainder
with a per-channel uniform noise draw, refreshed at every optimization step.
The refreshed noise is what lets genuinely dark pixels count as important:
filling with a constant instead would let the sparsity term delete them for
free. Masks are parameterized through a scaled tanh, so the [0, 1] box
constraint holds without projection.

The L1 norm of the converged mask is the per-sample anomaly score: a model
that fires on a compact memorized shortcut (a trigger) needs far fewer
pixels kept than a model reading the actual object, so poisoned samples sit
in the low tail of the score distribution.

Each image is optimized independently: its own mask, its own optimizer
moments, its own noise stream (seeded by the sample index). Batching below
is vectorization only and introduces no coupling across images.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Any

import numpy as np
import torch

from .data import ImageSet
from .detect import LOW_IS_BACKDOOR, ScoreTable

logger = logging.getLogger(__name__)

LAYERS = ("logits", "features")
NOISE_MODES = ("per_step_uniform", "zero_fill")

# sparsity weight defaults per output layer
_DEFAULT_ALPHA = {"logits": 0.01, "features": 0.001}


@dataclass(frozen=True)
class DistillConfig:
    """Hyperparameters of the mask optimization.

    ``alpha=None`` resolves to the per-layer default (0.01 for logits,
    0.001 for features). ``zero_fill`` replaces unmasked pixels with zeros
    instead of fresh noise, which reduces the objective to its plain
    masked-input variant.
    """

    alpha: float | None = None
    beta: float = 10.0
    steps: int = 100
    lr: float = 0.1
    adam_beta1: float = 0.1
    adam_beta2: float = 0.1
    adam_eps: float = 1e-8
    layer: str = "logits"
    noise_mode: str = "per_step_uniform"
    w_init: float = 0.0

    def __post_init__(self):
        if self.alpha is not None and self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.layer not in LAYERS:
            raise ValueError(f"layer must be one of {LAYERS}")
        if self.noise_mode not in NOISE_MODES:
            raise ValueError(f"noise_mode must be one of {NOISE_MODES}")

    @property
    def resolved_alpha(self) -> float:
        return _DEFAULT_ALPHA[self.layer] if self.alpha is None else self.alpha

    def to_dict(self) -> dict:
        return {
            "alpha": self.resolved_alpha, "beta": self.beta, "steps": self.steps,
            "lr": self.lr, "adam_beta1": self.adam_beta1, "adam_beta2": self.adam_beta2,
            "adam_eps": self.adam_eps, "layer": self.layer, "noise_mode": self.noise_mode,
            "w_init": self.w_init,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DistillConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class MaskResult:
    """Converged mask for one image, plus its induced pattern and score."""

    index: int
    mask: np.ndarray     # (h, w) in [0, 1]
    pattern: np.ndarray  # (c, h, w), the masked-plus-noise image
    score: float         # ||mask||_1; NaN when optimization failed
    trace: np.ndarray    # objective value per step
    failed: bool = False


# ---------------------------------------------------------------------------
# Building blocks (plain functions over numpy arrays or torch tensors)
# ---------------------------------------------------------------------------

def tv_loss(mask):
    """Anisotropic total variation: sum of absolute neighbor differences."""
    if mask.ndim != 2:
        raise ValueError("tv_loss expects a 2D mask")
    return abs(mask[1:, :] - mask[:-1, :]).sum() + abs(mask[:, 1:] - mask[:, :-1]).sum()


def mask_reparam(w_raw):
    """Scaled tanh squashing raw weights into a [0, 1] mask."""
    t = torch.tanh(w_raw) if isinstance(w_raw, torch.Tensor) else np.tanh(w_raw)
    return (t + 1.0) / 2.0


@dataclass(frozen=True)
class AdamState:
    """Parameter plus first/second moment estimates and the step counter."""

    param: Any
    m: Any
    v: Any
    step: int = 0


def init_adam(param) -> AdamState:
    return AdamState(param, param * 0, param * 0, 0)


def adam_update(state: AdamState, grad, lr: float, beta1: float, beta2: float,
                eps: float = 1e-8) -> AdamState:
    """One bias-corrected Adam step; pure, works on arrays and tensors alike."""
    step = state.step + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    param = state.param - lr * m_hat / (v_hat ** 0.5 + eps)
    return AdamState(param, m, v, step)


# ---------------------------------------------------------------------------
# Objective
# ---------------------------------------------------------------------------

def _layer_output(model, x: torch.Tensor, layer: str) -> torch.Tensor:
    return model.features(x) if layer == "features" else model(x)


def _batched_terms(model, x, target, w_raw, delta, config):
    """Per-image objective terms for a batch.

    x: (B,c,h,w); target: (B,F) frozen outputs on x; w_raw: (B,1,h,w);
    delta: (B,c,1,1) or None for zero fill. Returns three (B,) tensors.
    """
    m = mask_reparam(w_raw)
    x_cp = x * m if delta is None else x * m + (1.0 - m) * delta
    out = _layer_output(model, x_cp, config.layer)
    match = (target - out).abs().flatten(1).sum(dim=1)
    l1 = m.flatten(1).sum(dim=1)
    tv = ((m[:, :, 1:, :] - m[:, :, :-1, :]).abs().flatten(1).sum(dim=1)
          + (m[:, :, :, 1:] - m[:, :, :, :-1]).abs().flatten(1).sum(dim=1))
    return match, config.resolved_alpha * l1, config.beta * tv


def _single_image_tensors(model, image, w_raw, noise, config):
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ValueError("image must be (c, h, w)")
    c, h, w = image.shape
    w_arr = np.asarray(w_raw, dtype=np.float32)
    if w_arr.shape != (h, w):
        raise ValueError(f"w_raw must be ({h}, {w}), got {w_arr.shape}")
    x = torch.as_tensor(image).unsqueeze(0)
    w_t = torch.as_tensor(w_arr).reshape(1, 1, h, w)
    if config.noise_mode == "zero_fill":
        delta = None
    else:
        noise = np.asarray(noise, dtype=np.float32)
        if noise.shape != (c,):
            raise ValueError(f"noise must be a length-{c} channel vector, got {noise.shape}")
        delta = torch.as_tensor(noise).reshape(1, c, 1, 1)
    with torch.no_grad():
        target = _layer_output(model, x, config.layer)
    return x, w_t, delta, target


def mask_objective_terms(model, image, w_raw, noise, config: DistillConfig) -> tuple[float, float, float]:
    """(output-match, weighted L1, weighted TV) for one image and raw mask."""
    x, w_t, delta, target = _single_image_tensors(model, image, w_raw, noise, config)
    with torch.no_grad():
        match, l1, tv = _batched_terms(model, x, target, w_t, delta, config)
    return float(match[0]), float(l1[0]), float(tv[0])


def mask_objective(model, image, w_raw, noise, config: DistillConfig) -> float:
    """Three-term scalar objective for one image (see the module docstring)."""
    return sum(mask_objective_terms(model, image, w_raw, noise, config))


def mask_objective_gradient(model, image, w_raw, noise, config: DistillConfig) -> np.ndarray:
    """Gradient of the objective with respect to the raw mask weights."""
    x, w_t, delta, target = _single_image_tensors(model, image, w_raw, noise, config)
    w_t = w_t.clone().requires_grad_(True)
    match, l1, tv = _batched_terms(model, x, target, w_t, delta, config)
    (grad,) = torch.autograd.grad(match[0] + l1[0] + tv[0], w_t)
    return grad.numpy().reshape(image.shape[1:])


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

def _per_image_noise(seed: int, index: int, steps: int, channels: int) -> np.ndarray:
    """(steps + 1, c) uniform draws; the extra row renders the final pattern."""
    rng = np.random.default_rng((seed, int(index)))
    return rng.random((steps + 1, channels), dtype=np.float32)


def distill_masks(model, images, config: DistillConfig = DistillConfig(), seed: int = 0,
                  indices=None, batch_size: int = 128) -> list[MaskResult]:
    """Optimize one mask per image against a frozen model.

    Raw mask weights start at ``config.w_init`` (zero by default, so the
    mask starts at 0.5 everywhere). Noise is drawn
    per image per step from a stream seeded by (seed, sample index), so
    results do not depend on batch composition beyond float vectorization.
    Images whose objective turns non-finite are aborted at the failing step
    and reported with ``failed=True`` and a NaN score.
    """
    images = np.asarray(images, dtype=np.float32)
    if images.ndim != 4:
        raise ValueError("images must be (n, c, h, w)")
    n, c, h, w = images.shape
    if indices is None:
        indices = np.arange(n)
    indices = np.asarray(indices, dtype=np.int64)
    if indices.shape != (n,):
        raise ValueError("indices must match the number of images")
    model.eval()
    zero_fill = config.noise_mode == "zero_fill"
    results: list[MaskResult] = []
    for start in range(0, n, batch_size):
        batch_idx = indices[start : start + batch_size]
        x = torch.as_tensor(images[start : start + batch_size])
        b = x.shape[0]
        with torch.no_grad():
            target = _layer_output(model, x, config.layer)
        noise = np.stack([_per_image_noise(seed, i, config.steps, c) for i in batch_idx])
        w_raw = torch.full((b, 1, h, w), float(config.w_init))
        state = init_adam(w_raw)
        alive = torch.ones(b, dtype=torch.bool)
        trace = np.full((b, config.steps), np.nan, dtype=np.float64)
        for step in range(config.steps):
            w_t = state.param.clone().requires_grad_(True)
            delta = None if zero_fill else torch.as_tensor(noise[:, step, :]).reshape(b, c, 1, 1)
            match, l1, tv = _batched_terms(model, x, target, w_t, delta, config)
            obj = match + l1 + tv
            finite = torch.isfinite(obj)
            newly_failed = alive & ~finite
            if newly_failed.any():
                for i in torch.nonzero(newly_failed).flatten().tolist():
                    logger.warning("mask optimization diverged for sample %d at step %d",
                                   int(batch_idx[i]), step)
                alive &= finite
            trace[alive.numpy(), step] = obj.detach().numpy()[alive.numpy()]
            if not alive.any():
                break
            (grad,) = torch.autograd.grad(obj[alive].sum(), w_t)
            with torch.no_grad():
                new_state = adam_update(state, grad, config.lr,
                                        config.adam_beta1, config.adam_beta2, config.adam_eps)
                keep = alive.view(b, 1, 1, 1)
                state = AdamState(
                    torch.where(keep, new_state.param, state.param),
                    torch.where(keep, new_state.m, state.m),
                    torch.where(keep, new_state.v, state.v),
                    new_state.step,
                )
        with torch.no_grad():
            mask = mask_reparam(state.param).reshape(b, h, w)
            final_delta = torch.as_tensor(noise[:, config.steps, :]).reshape(b, c, 1, 1)
            m4 = mask.reshape(b, 1, h, w)
            pattern = x * m4 if zero_fill else x * m4 + (1.0 - m4) * final_delta
            scores = mask.flatten(1).sum(dim=1)
        for i in range(b):
            ok = bool(alive[i])
            results.append(MaskResult(
                index=int(batch_idx[i]),
                mask=mask[i].numpy().copy(),
                pattern=pattern[i].numpy().copy(),
                score=float(scores[i]) if ok else float("nan"),
                trace=trace[i].copy(),
                failed=not ok,
            ))
    return results


def results_to_score_table(results: list[MaskResult], dataset: ImageSet,
                           method: str = "mask") -> ScoreTable:
    """Score table from mask results; failed optimizations are dropped."""
    ok = [r for r in results if not r.failed]
    n_failed = len(results) - len(ok)
    if n_failed:
        logger.warning("excluding %d failed mask optimizations from detection", n_failed)
    if not ok:
        raise ValueError("all mask optimizations failed")
    idx = np.array([r.index for r in ok], dtype=np.int64)
    return ScoreTable(
        index=idx,
        score=np.array([r.score for r in ok], dtype=np.float64),
        is_backdoor=dataset.is_backdoor[idx],
        label=dataset.labels[idx],
        orientation=LOW_IS_BACKDOOR,
        method=method,
    )


# ---------------------------------------------------------------------------
# Trigger simplification
# ---------------------------------------------------------------------------

def simplify_trigger(mask: np.ndarray, x_bd: np.ndarray, x_clean: np.ndarray,
                     bin_threshold: float = 0.05) -> np.ndarray:
    """Keep triggered pixels only where the binarized mask is on.

    The mask is thresholded at ``bin_threshold``; pixels under the binary
    mask come from the triggered image, everything else reverts to the clean
    image. This shrinks a full-image trigger down to the region the model
    actually reacts to.
    """
    if not 0.0 < bin_threshold < 1.0:
        raise ValueError("bin_threshold must lie in (0, 1)")
    mask = np.asarray(mask)
    x_bd = np.asarray(x_bd, dtype=np.float32)
    x_clean = np.asarray(x_clean, dtype=np.float32)
    if x_bd.shape != x_clean.shape:
        raise ValueError("triggered and clean images must share a shape")
    if mask.shape != x_bd.shape[-2:]:
        raise ValueError(f"mask shape {mask.shape} does not match image plane {x_bd.shape[-2:]}")
    binary = mask >= bin_threshold
    return np.where(binary[None, :, :], x_bd, x_clean)


def binarized_area(mask: np.ndarray, bin_threshold: float = 0.05) -> float:
    """Fraction of pixels kept by the binarized mask."""
    mask = np.asarray(mask)
    return float((mask >= bin_threshold).mean())
