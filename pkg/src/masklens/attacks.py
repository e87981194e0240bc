"""Trigger injectors and the dataset poisoner.

Four reproducible trigger families are provided: a corner patch (badnets),
alpha blending with a fixed trigger image (blend), an additive horizontal
sinusoid (sig), and a smooth elastic warp (warp). All injectors are pure
functions from [0,1] images to [0,1] images.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import map_coordinates

from .data import ImageSet

FAMILIES = ("badnets", "blend", "sig", "warp")


@dataclass(frozen=True)
class AttackSpec:
    """A trigger family, its parameters, the backdoor label, and the rate."""

    family: str
    target_label: int
    rate: float
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown attack family {self.family!r}, expected one of {FAMILIES}")
        if not 0.0 <= self.rate <= 1.0:
            raise ValueError("poisoning rate must lie in [0, 1]")
        if self.target_label < 0:
            raise ValueError("target_label must be non-negative")

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "target_label": self.target_label,
            "rate": self.rate,
            "seed": self.seed,
            "params": _jsonable(self.params),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AttackSpec":
        return cls(
            family=d["family"],
            target_label=int(d["target_label"]),
            rate=float(d["rate"]),
            seed=int(d.get("seed", 0)),
            params=d.get("params", {}),
        )

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    return obj


# ---------------------------------------------------------------------------
# Injectors
# ---------------------------------------------------------------------------

def apply_badnets(image: np.ndarray, patch: np.ndarray, offset: tuple[int, int]) -> np.ndarray:
    """Overwrite the patch region at ``offset`` (top-left corner, y then x)."""
    image = np.asarray(image, dtype=np.float32)
    patch = np.asarray(patch, dtype=np.float32)
    c, h, w = image.shape
    pc, ph, pw = patch.shape
    y, x = offset
    if pc not in (1, c):
        raise ValueError(f"patch has {pc} channels, image has {c}")
    if y < 0 or x < 0 or y + ph > h or x + pw > w:
        raise ValueError(f"patch {ph}x{pw} at offset {offset} out of bounds for {h}x{w} image")
    out = image.copy()
    out[:, y : y + ph, x : x + pw] = patch
    return out


def apply_blend(image: np.ndarray, trigger: np.ndarray, tau: float) -> np.ndarray:
    """Convex blend: (1 - tau) * image + tau * trigger, clipped to [0, 1]."""
    image = np.asarray(image, dtype=np.float32)
    trigger = np.asarray(trigger, dtype=np.float32)
    if image.shape != trigger.shape:
        raise ValueError(f"trigger shape {trigger.shape} != image shape {image.shape}")
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    return np.clip((1.0 - tau) * image + tau * trigger, 0.0, 1.0)


def apply_sig(image: np.ndarray, delta: float, freq: float) -> np.ndarray:
    """Add a horizontal sinusoid delta*sin(2*pi*j*freq/w) to every row and channel."""
    image = np.asarray(image, dtype=np.float32)
    if delta < 0:
        raise ValueError("delta must be >= 0")
    w = image.shape[-1]
    j = np.arange(w, dtype=np.float32)
    wave = delta * np.sin(2.0 * np.pi * j * freq / w)
    return np.clip(image + wave[None, None, :], 0.0, 1.0).astype(np.float32)


def make_warp_field(grid_h: int, grid_w: int, seed: int) -> np.ndarray:
    """Coarse (2, grid_h, grid_w) displacement field with unit mean magnitude."""
    if grid_h < 2 or grid_w < 2:
        raise ValueError("control grid must be at least 2x2")
    rng = np.random.default_rng(seed)
    field = rng.uniform(-1.0, 1.0, size=(2, grid_h, grid_w))
    return field / np.abs(field).mean()


def apply_warp(image: np.ndarray, control_grid: np.ndarray, strength: float) -> np.ndarray:
    """Resample the image along a smooth displacement field.

    The coarse control grid is bilinearly upsampled to image resolution,
    scaled by ``strength`` (in pixels), and used for backward warping with
    border clamping. ``strength=0`` reproduces the input exactly.
    """
    image = np.asarray(image, dtype=np.float32)
    control_grid = np.asarray(control_grid, dtype=np.float64)
    if control_grid.ndim != 3 or control_grid.shape[0] != 2:
        raise ValueError("control grid must have shape (2, gh, gw)")
    c, h, w = image.shape
    _, gh, gw = control_grid.shape
    if gh < 2 or gw < 2 or gh > h or gw > w:
        raise ValueError(f"degenerate control grid {gh}x{gw} for {h}x{w} image")
    if strength < 0:
        raise ValueError("strength must be >= 0")
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    # sample the control grid at image resolution (bilinear upsampling)
    gy = yy * (gh - 1) / max(h - 1, 1)
    gx = xx * (gw - 1) / max(w - 1, 1)
    dy = map_coordinates(control_grid[0], [gy, gx], order=1, mode="nearest")
    dx = map_coordinates(control_grid[1], [gy, gx], order=1, mode="nearest")
    sample_y = yy + strength * dy
    sample_x = xx + strength * dx
    out = np.empty_like(image)
    for ch in range(c):
        out[ch] = map_coordinates(image[ch].astype(np.float64), [sample_y, sample_x],
                                  order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Default trigger parameters (all overridable via AttackSpec.params)
# ---------------------------------------------------------------------------

def default_checkerboard(channels: int, size: int = 3) -> np.ndarray:
    i, j = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    cell = ((i + j) % 2).astype(np.float32)
    return np.broadcast_to(cell, (channels, size, size)).copy()

def default_blend_trigger(shape: tuple[int, int, int], seed: int) -> np.ndarray:
    """Smooth full-image trigger: coarse seeded noise bilinearly upsampled."""
    c, h, w = shape
    rng = np.random.default_rng(seed)
    coarse = rng.uniform(0.0, 1.0, size=(c, 4, 4))
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    gy = yy * 3.0 / max(h - 1, 1)
    gx = xx * 3.0 / max(w - 1, 1)
    out = np.stack([map_coordinates(coarse[ch], [gy, gx], order=1, mode="nearest") for ch in range(c)])
    return out.astype(np.float32)


def resolve_params(spec: AttackSpec, image_shape: tuple[int, int, int]) -> dict:
    """Fill in family defaults for the given image shape; values become arrays."""
    c, h, w = image_shape
    p = dict(spec.params)
    if spec.family == "badnets":
        patch = np.asarray(p["patch"], dtype=np.float32) if "patch" in p else default_checkerboard(c)
        if "offset" in p:
            offset = tuple(int(v) for v in p["offset"])
        else:
            offset = (h - patch.shape[1], w - patch.shape[2])
        return {"patch": patch, "offset": offset}
    if spec.family == "blend":
        trigger = (np.asarray(p["trigger"], dtype=np.float32) if "trigger" in p
                   else default_blend_trigger(image_shape, spec.seed))
        return {"trigger": trigger, "tau": float(p.get("tau", 0.2))}
    if spec.family == "sig":
        return {"delta": float(p.get("delta", 0.1)), "freq": float(p.get("freq", 6.0))}
    if spec.family == "warp":
        gh, gw = (int(v) for v in p.get("grid", (4, 4)))
        return {"control_grid": make_warp_field(gh, gw, spec.seed),
                "strength": float(p.get("strength", 2.0))}
    raise ValueError(spec.family)


def apply_trigger(image: np.ndarray, spec: AttackSpec, resolved: dict | None = None) -> np.ndarray:
    if resolved is None:
        resolved = resolve_params(spec, tuple(image.shape))
    if spec.family == "badnets":
        return apply_badnets(image, resolved["patch"], resolved["offset"])
    if spec.family == "blend":
        return apply_blend(image, resolved["trigger"], resolved["tau"])
    if spec.family == "sig":
        return apply_sig(image, resolved["delta"], resolved["freq"])
    if spec.family == "warp":
        return apply_warp(image, resolved["control_grid"], resolved["strength"])
    raise ValueError(spec.family)


# ---------------------------------------------------------------------------
# Poisoner
# ---------------------------------------------------------------------------

def choose_poison_indices(dataset: ImageSet, spec: AttackSpec) -> np.ndarray:
    """Seeded uniform choice of floor(rate * n) samples from non-target classes."""
    n = len(dataset)
    count = int(np.floor(spec.rate * n))
    if count < 1:
        raise ValueError(f"rate {spec.rate} poisons floor({spec.rate}*{n})=0 samples; attack is vacuous")
    if spec.target_label >= dataset.n_classes:
        raise ValueError("target label outside dataset label range")
    eligible = np.nonzero(dataset.labels != spec.target_label)[0]
    if count > len(eligible):
        raise ValueError(f"cannot poison {count} samples: only {len(eligible)} non-target samples")
    rng = np.random.default_rng(spec.seed)
    return np.sort(rng.choice(eligible, size=count, replace=False))


def poison_dataset(dataset: ImageSet, spec: AttackSpec, indices: np.ndarray | None = None) -> ImageSet:
    """Trigger and relabel a seeded subset of non-target samples.

    Untouched samples are bit-identical to the input. Passing ``indices``
    re-materializes a previously chosen poisoning (for manifest replay).
    """
    if indices is None:
        indices = choose_poison_indices(dataset, spec)
    resolved = resolve_params(spec, dataset.image_shape)
    images = dataset.images.copy()
    labels = dataset.labels.copy()
    flags = dataset.is_backdoor.copy()
    for i in indices:
        images[i] = apply_trigger(images[i], spec, resolved)
        labels[i] = spec.target_label
        flags[i] = True
    meta = dict(dataset.meta)
    meta.update({"attack": spec.to_dict(), "attack_hash": spec.spec_hash()})
    return ImageSet(images, labels, flags, dataset.n_classes, meta)


def make_triggered_testset(dataset: ImageSet, spec: AttackSpec) -> ImageSet:
    """Fully-triggered copy of all non-target samples, original labels kept.

    This is the evaluation set for attack success rate: every image carries
    the trigger and none of them truly belongs to the target class.
    """
    keep = np.nonzero(dataset.labels != spec.target_label)[0]
    if len(keep) == 0:
        raise ValueError("dataset has no non-target samples")
    resolved = resolve_params(spec, dataset.image_shape)
    images = np.stack([apply_trigger(dataset.images[i], spec, resolved) for i in keep])
    meta = dict(dataset.meta)
    meta.update({"attack": spec.to_dict(), "triggered_all": True})
    return ImageSet(images, dataset.labels[keep].copy(),
                    np.ones(len(keep), dtype=bool), dataset.n_classes, meta)
