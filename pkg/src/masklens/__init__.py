"""masklens: backdoor forensics for image classifiers.

Distills a minimal per-image input mask that preserves a model's output,
uses the mask's L1 norm to detect poisoned training samples, partitions and
repairs poisoned models, and audits datasets for attribute bias.
"""

__version__ = "0.1.0"

from .attacks import AttackSpec, apply_badnets, apply_blend, apply_sig, apply_warp, poison_dataset
from .data import AttributeTable, ImageSet, load_cifar10_binary, load_idx, make_synthetic_shapes
from .detect import DetectionReport, ScoreTable, auprc, auroc, classify, fit_threshold
from .distill import DistillConfig, MaskResult, distill_masks, simplify_trigger
from .models import ReferenceCNN, TrainConfig, build_reference_cnn, train_classifier

__all__ = [
    "__version__",
    "AttackSpec",
    "AttributeTable",
    "DetectionReport",
    "DistillConfig",
    "ImageSet",
    "MaskResult",
    "ReferenceCNN",
    "ScoreTable",
    "TrainConfig",
    "apply_badnets",
    "apply_blend",
    "apply_sig",
    "apply_warp",
    "auprc",
    "auroc",
    "build_reference_cnn",
    "classify",
    "distill_masks",
    "fit_threshold",
    "load_cifar10_binary",
    "load_idx",
    "make_synthetic_shapes",
    "poison_dataset",
    "simplify_trigger",
    "train_classifier",
]
