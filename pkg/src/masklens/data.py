"""Dataset loading, synthetic data generation, and artifact persistence."""

from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .detect import ScoreTable

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CIFAR_RECORD_BYTES = 3073  # 1 label byte + 3 * 32 * 32 pixels

SCORE_COLUMNS = ("index", "score", "is_backdoor", "label")


class FormatError(ValueError):
    """An on-disk artifact does not match its declared format."""


@dataclass(frozen=True)
class ImageSet:
    """Batch of float images in [0, 1] with labels and poisoning flags.

    Arrays are made read-only on construction; derived datasets (splits,
    poisoned copies) are new instances, so an ImageSet can be shared across
    workers without coordination.
    """

    images: np.ndarray       # (n, c, h, w) float32 in [0, 1]
    labels: np.ndarray       # (n,) int64 in [0, n_classes)
    is_backdoor: np.ndarray  # (n,) bool
    n_classes: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        images = np.ascontiguousarray(self.images, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        flags = np.ascontiguousarray(self.is_backdoor, dtype=bool)
        if images.ndim != 4:
            raise ValueError(f"images must be (n, c, h, w), got {images.shape}")
        n = images.shape[0]
        if labels.shape != (n,) or flags.shape != (n,):
            raise ValueError("images/labels/is_backdoor lengths disagree")
        if n and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.n_classes < 1:
            raise ValueError("n_classes must be positive")
        if n and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ValueError(f"labels must lie in [0, {self.n_classes})")
        for arr in (images, labels, flags):
            arr.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "is_backdoor", flags)

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, indices) -> "ImageSet":
        idx = np.asarray(indices, dtype=np.int64)
        return ImageSet(
            self.images[idx].copy(),
            self.labels[idx].copy(),
            self.is_backdoor[idx].copy(),
            self.n_classes,
            dict(self.meta),
        )


@dataclass(frozen=True)
class AttributeTable:
    """Binary attribute annotations paired row-for-row with an ImageSet."""

    attributes: np.ndarray  # (n, A) bool
    names: tuple[str, ...]

    def __post_init__(self):
        attrs = np.ascontiguousarray(self.attributes, dtype=bool)
        if attrs.ndim != 2:
            raise ValueError("attributes must be a (n, A) matrix")
        if attrs.shape[1] != len(self.names):
            raise ValueError("attribute names must match matrix columns")
        attrs.flags.writeable = False
        object.__setattr__(self, "attributes", attrs)
        object.__setattr__(self, "names", tuple(self.names))

    def __len__(self) -> int:
        return self.attributes.shape[0]


# ---------------------------------------------------------------------------
# Loaders
# ---------------------------------------------------------------------------

def load_cifar10_binary(path) -> ImageSet:
    """Load CIFAR-10 images from the public binary format.

    ``path`` may be one ``.bin`` file or a directory of them. Each record is
    3073 bytes: a label byte followed by 32x32 red, green, and blue planes.
    """
    p = Path(path)
    files = sorted(p.glob("*.bin")) if p.is_dir() else [p]
    if not files or not all(f.exists() for f in files):
        raise FormatError(f"no CIFAR-10 binary files found at {path}")
    images, labels = [], []
    for f in files:
        raw = f.read_bytes()
        if len(raw) % CIFAR_RECORD_BYTES != 0:
            offset = (len(raw) // CIFAR_RECORD_BYTES) * CIFAR_RECORD_BYTES
            raise FormatError(
                f"{f}: truncated record at byte offset {offset} "
                f"(file size {len(raw)} is not a multiple of {CIFAR_RECORD_BYTES})"
            )
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD_BYTES)
        labels.append(arr[:, 0].astype(np.int64))
        images.append(arr[:, 1:].reshape(-1, 3, 32, 32))
    images = np.concatenate(images).astype(np.float32) / 255.0
    labels = np.concatenate(labels)
    return ImageSet(
        images,
        labels,
        np.zeros(len(labels), dtype=bool),
        n_classes=10,
        meta={"dataset": "cifar10", "source": str(path)},
    )


def load_idx(path_images, path_labels) -> ImageSet:
    """Load a grayscale dataset stored as an IDX image/label file pair."""
    img_raw = Path(path_images).read_bytes()
    lbl_raw = Path(path_labels).read_bytes()
    if len(img_raw) < 16 or len(lbl_raw) < 8:
        raise FormatError("IDX file too short for its header")
    magic, n, h, w = struct.unpack(">IIII", img_raw[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"bad IDX image magic 0x{magic:08x} in {path_images}")
    lmagic, ln = struct.unpack(">II", lbl_raw[:8])
    if lmagic != IDX_LABEL_MAGIC:
        raise FormatError(f"bad IDX label magic 0x{lmagic:08x} in {path_labels}")
    if n != ln:
        raise FormatError(f"IDX image count {n} != label count {ln}")
    pixels = np.frombuffer(img_raw, dtype=np.uint8, offset=16)
    if pixels.size != n * h * w:
        raise FormatError(f"IDX image payload has {pixels.size} bytes, expected {n * h * w}")
    labels = np.frombuffer(lbl_raw, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size != n:
        raise FormatError(f"IDX label payload has {labels.size} entries, expected {n}")
    images = pixels.reshape(n, 1, h, w).astype(np.float32) / 255.0
    return ImageSet(
        images,
        labels,
        np.zeros(n, dtype=bool),
        n_classes=int(labels.max()) + 1 if n else 1,
        meta={"dataset": "idx", "source": str(path_images)},
    )


def make_synthetic_shapes(n_per_class: int, n_classes: int, h: int, w: int, seed: int = 0) -> ImageSet:
    """Deterministic toy dataset: one large class rectangle amid clutter.

    Class k places a filled rectangle near the k-th anchor of a coarse grid,
    with position jitter and per-sample size and intensity variation. Every
    image additionally carries a few strictly smaller distractor rectangles
    at random positions, so the class is decided by where the *largest*
    rectangle sits. The clutter gives the classes real intra-class spread: a
    small CNN reaches high accuracy but keeps a non-trivial training loss
    for many epochs, which is the regime where a high-contrast trigger is by
    far the easiest correlation to memorize.
    """
    if n_classes < 2:
        raise ValueError("need at least 2 classes")
    rh, rw = max(3, h // 4), max(3, w // 4)
    size_jitter = 1
    jitter = max(1, h // 6)
    gx = int(np.ceil(np.sqrt(n_classes)))
    gy = int(np.ceil(n_classes / gx))
    max_y = h - (rh + size_jitter) - jitter
    max_x = w - (rw + size_jitter) - jitter
    if max_y < jitter or max_x < jitter:
        raise ValueError(f"image {h}x{w} too small to place {rh}x{rw} shapes")
    ys = np.linspace(jitter, max_y, gy).round().astype(int)
    xs = np.linspace(jitter, max_x, gx).round().astype(int)
    anchors = [(ys[k // gx], xs[k % gx]) for k in range(n_classes)]
    if len(set(anchors)) < n_classes:
        raise ValueError(f"image {h}x{w} too small to separate {n_classes} anchor positions")

    rng = np.random.default_rng(seed)
    n = n_per_class * n_classes
    labels = np.repeat(np.arange(n_classes, dtype=np.int64), n_per_class)
    images = rng.uniform(0.0, 0.25, size=(n, 1, h, w)).astype(np.float32)
    for i in range(n):
        # distractors first; the class rectangle wins any overlap and is
        # strictly larger, so size plus brightness tells them apart
        for _ in range(rng.integers(2, 5)):
            dh, dw = rng.integers(2, rh), rng.integers(2, rw)
            py = rng.integers(0, h - dh + 1)
            px = rng.integers(0, w - dw + 1)
            images[i, 0, py : py + dh, px : px + dw] = rng.uniform(0.35, 0.65)
        ay, ax = anchors[labels[i]]
        dy, dx = rng.integers(-jitter, jitter + 1, size=2)
        sh, sw = rng.integers(0, size_jitter + 1, size=2)
        level = rng.uniform(0.45, 0.70)
        images[i, 0, ay + dy : ay + dy + rh + sh, ax + dx : ax + dx + rw + sw] = level
    images += rng.uniform(0.0, 0.08, size=images.shape).astype(np.float32)
    np.clip(images, 0.0, 1.0, out=images)
    return ImageSet(
        images,
        labels,
        np.zeros(n, dtype=bool),
        n_classes=n_classes,
        meta={"dataset": "synthetic_shapes", "seed": seed, "h": h, "w": w,
              "n_per_class": n_per_class},
    )


ATTRIBUTE_NAMES = ("bar_top", "bar_bottom", "bar_left", "bar_right", "dot_center", "frame")


def _attribute_stencil(name: str, h: int, w: int) -> np.ndarray:
    region = np.zeros((h, w), dtype=bool)
    if name == "bar_top":
        region[1:3, 2:-2] = True
    elif name == "bar_bottom":
        region[h - 3 : h - 1, 2:-2] = True
    elif name == "bar_left":
        region[2:-2, 1:3] = True
    elif name == "bar_right":
        region[2:-2, w - 3 : w - 1] = True
    elif name == "dot_center":
        cy, cx = h // 2, w // 2
        region[cy - 1 : cy + 2, cx - 1 : cx + 2] = True
    elif name == "frame":
        region[0, :] = region[-1, :] = True
        region[:, 0] = region[:, -1] = True
    else:
        raise ValueError(f"unknown attribute {name!r}; supported: {ATTRIBUTE_NAMES}")
    return region


def make_synthetic_attributes(n: int, h: int, w: int, seed: int = 0,
                              names: tuple[str, ...] = ATTRIBUTE_NAMES,
                              correlated: tuple[str, str, float] | None = None,
                              ) -> tuple[np.ndarray, AttributeTable]:
    """Images whose binary attributes are visible geometric marks.

    Attributes are independent fair coins unless ``correlated`` plants a
    dependency: (src, dst, strength) makes attribute src copy attribute dst
    with the given probability. Each active attribute renders its stencil
    into the image at high intensity over low background noise.
    """
    if h < 8 or w < 8:
        raise ValueError("attribute images need at least 8x8 pixels")
    rng = np.random.default_rng(seed)
    attrs = rng.random((n, len(names))) < 0.5
    if correlated is not None:
        src, dst, strength = correlated
        si, di = names.index(src), names.index(dst)
        copy_mask = rng.random(n) < strength
        attrs[copy_mask, si] = attrs[copy_mask, di]
    stencils = np.stack([_attribute_stencil(name, h, w) for name in names])
    images = rng.uniform(0.0, 0.10, size=(n, 1, h, w)).astype(np.float32)
    for i in range(n):
        level = rng.uniform(0.75, 0.95)
        active = stencils[attrs[i]].any(axis=0)
        images[i, 0][active] = level
    np.clip(images, 0.0, 1.0, out=images)
    return images, AttributeTable(attrs, tuple(names))


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_scores(path, table: ScoreTable) -> None:
    """Write a score table as CSV: index,score,is_backdoor,label[,orientation,method]."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(SCORE_COLUMNS) + ["orientation", "method"])
        for i in range(len(table)):
            writer.writerow([
                int(table.index[i]),
                repr(float(table.score[i])),
                int(table.is_backdoor[i]),
                int(table.label[i]),
                table.orientation,
                table.method or "",
            ])


def load_scores(path) -> ScoreTable:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[: len(SCORE_COLUMNS)]) != SCORE_COLUMNS:
            raise FormatError(
                f"{path}: expected header starting with {','.join(SCORE_COLUMNS)}, got {header}"
            )
        extras = header[len(SCORE_COLUMNS):]
        rows = list(reader)
    index = np.array([int(r[0]) for r in rows], dtype=np.int64)
    score = np.array([float(r[1]) for r in rows], dtype=np.float64)
    flags = np.array([bool(int(r[2])) for r in rows], dtype=bool)
    label = np.array([int(r[3]) for r in rows], dtype=np.int64)
    orientation = "low_is_backdoor"
    method = None
    if "orientation" in extras and rows:
        orientation = rows[0][len(SCORE_COLUMNS) + extras.index("orientation")]
    if "method" in extras and rows:
        method = rows[0][len(SCORE_COLUMNS) + extras.index("method")] or None
    return ScoreTable(index, score, flags, label, orientation, method)


def save_mask(path, mask: np.ndarray, export_png: bool = False) -> None:
    """Persist a 2D mask as raw little-endian float32 plus a JSON sidecar.

    Binary exactness matters: detection scores are plain sums of the stored
    values. The optional PNG is an 8-bit visualization only.
    """
    mask = np.asarray(mask, dtype=np.float32)
    if mask.ndim != 2:
        raise ValueError("mask must be 2D")
    if mask.size and (mask.min() < 0.0 or mask.max() > 1.0):
        raise ValueError("mask values must lie in [0, 1]")
    path = Path(path)
    path.write_bytes(mask.astype("<f4").tobytes())
    sidecar = {"shape": list(mask.shape), "dtype": "<f4"}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar) + "\n")
    if export_png:
        img = Image.fromarray((mask * 255.0).round().astype(np.uint8), mode="L")
        img.save(path.with_suffix(path.suffix + ".png"))


def load_mask(path) -> np.ndarray:
    path = Path(path)
    sidecar_path = path.with_suffix(path.suffix + ".json")
    if not sidecar_path.exists():
        raise FormatError(f"missing mask sidecar {sidecar_path}")
    sidecar = json.loads(sidecar_path.read_text())
    shape = tuple(sidecar["shape"])
    raw = np.frombuffer(path.read_bytes(), dtype=sidecar["dtype"])
    if raw.size != int(np.prod(shape)):
        raise FormatError(
            f"{path}: payload has {raw.size} values but sidecar declares shape {shape}"
        )
    return raw.reshape(shape).copy()


def save_loss_history(path, losses: np.ndarray) -> None:
    np.save(path, np.asarray(losses, dtype=np.float32))


def load_loss_history(path) -> np.ndarray:
    return np.load(path)


# ---------------------------------------------------------------------------
# Splitting
# ---------------------------------------------------------------------------

def split_train_test(dataset: ImageSet, test_fraction: float, seed: int = 0) -> tuple[ImageSet, ImageSet]:
    """Seeded stratified split; per-class test counts are floor(fraction * n_k)."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    test_idx = []
    for k in range(dataset.n_classes):
        members = np.nonzero(dataset.labels == k)[0]
        n_test = int(len(members) * test_fraction)
        test_idx.append(rng.choice(members, size=n_test, replace=False))
    test_idx = np.sort(np.concatenate(test_idx))
    train_mask = np.ones(len(dataset), dtype=bool)
    train_mask[test_idx] = False
    return dataset.subset(np.nonzero(train_mask)[0]), dataset.subset(test_idx)
