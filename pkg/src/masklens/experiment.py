"""Config-driven experiment orchestration and per-stage artifact IO.

Every stage reads the previous stage's artifacts from the run directory by
conventional filename. Poisoned datasets are never duplicated on disk: the
manifest stores the clean-dataset descriptor, the attack spec, and the
flagged indices, and the pixels are re-materialized deterministically.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import jsonschema
import numpy as np
import torch

from . import __version__
from .attacks import FAMILIES, AttackSpec, choose_poison_indices, make_triggered_testset, poison_dataset
from .baselines import abl_scores, ac_scores, ss_scores, strip_scores
from .bias import attribute_shift, select_low_norm_subset, top_predictive_attributes
from .data import (
    ATTRIBUTE_NAMES,
    ImageSet,
    load_cifar10_binary,
    load_idx,
    load_loss_history,
    load_scores,
    make_synthetic_attributes,
    make_synthetic_shapes,
    save_loss_history,
    save_mask,
    save_scores,
    split_train_test,
)
from .detect import make_report
from .distill import DistillConfig, distill_masks, results_to_score_table
from .mitigate import partition_by_score, partition_quality, unlearn_finetune
from .models import (
    HeadView,
    LossHistory,
    TrainConfig,
    build_multihead_cnn,
    build_reference_cnn,
    evaluate_accuracy,
    evaluate_asr,
    forward_features,
    load_model,
    save_model,
    train_classifier,
    train_multihead,
)

logger = logging.getLogger(__name__)

DETECTORS = ("mask", "abl", "strip", "ss", "ac")


class ConfigError(ValueError):
    """Configuration does not validate against the schema (exit code 2)."""


class MissingArtifactError(FileNotFoundError):
    """An upstream stage artifact is absent (exit code 2)."""


CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["dataset", "attack"],
    "properties": {
        "seed": {"type": "integer"},
        "threads": {"type": "integer", "minimum": 1},
        "dataset": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["synthetic_shapes", "cifar10", "idx"]},
                "n_per_class": {"type": "integer", "minimum": 1},
                "n_classes": {"type": "integer", "minimum": 2},
                "h": {"type": "integer", "minimum": 8},
                "w": {"type": "integer", "minimum": 8},
                "seed": {"type": "integer"},
                "test_seed": {"type": "integer"},
                "path": {"type": "string"},
                "images": {"type": "string"},
                "labels": {"type": "string"},
                "test_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "width_multiplier": {"type": "integer", "minimum": 1},
                "head_pool": {"enum": ["avg", "max", "avgmax"]},
                "seed": {"type": "integer"},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "momentum": {"type": "number", "minimum": 0},
                "weight_decay": {"type": "number", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "lr_milestones": {"type": "array", "items": {"type": "integer"}},
                "lr_gamma": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer"},
            },
        },
        "attack": {
            "type": "object",
            "additionalProperties": False,
            "required": ["family", "target_label", "rate"],
            "properties": {
                "family": {"enum": list(FAMILIES)},
                "target_label": {"type": "integer", "minimum": 0},
                "rate": {"type": "number", "minimum": 0, "maximum": 1},
                "seed": {"type": "integer"},
                "params": {"type": "object"},
            },
        },
        "distill": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "alpha": {"type": ["number", "null"], "minimum": 0},
                "beta": {"type": "number", "minimum": 0},
                "steps": {"type": "integer", "minimum": 0},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "adam_beta1": {"type": "number"},
                "adam_beta2": {"type": "number"},
                "adam_eps": {"type": "number"},
                "layer": {"enum": ["logits", "features"]},
                "noise_mode": {"enum": ["per_step_uniform", "zero_fill"]},
            },
        },
        "detectors": {"type": "array", "items": {"enum": list(DETECTORS)}},
        "gamma": {"type": "number"},
        "strip": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_overlays": {"type": "integer", "minimum": 1},
                "seed": {"type": "integer"},
            },
        },
        "ac": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"reduced_dim": {"type": "integer", "minimum": 1}},
        },
        "mitigation": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "enabled": {"type": "boolean"},
                "p_b": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "p_c": {"type": "number", "minimum": 0, "maximum": 1},
                "epochs": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "seed": {"type": "integer"},
            },
        },
        "masks_to_save": {"type": "integer", "minimum": 0},
        "bias": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n": {"type": "integer", "minimum": 8},
                "h": {"type": "integer", "minimum": 8},
                "w": {"type": "integer", "minimum": 8},
                "seed": {"type": "integer"},
                "attributes": {"type": "array", "items": {"enum": list(ATTRIBUTE_NAMES)}},
                "correlated": {"type": "array", "minItems": 3, "maxItems": 3},
                "epochs": {"type": "integer", "minimum": 1},
                "lr": {"type": "number", "exclusiveMinimum": 0},
                "subset_fraction": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "threshold": {"type": "number", "minimum": 0},
                "steps": {"type": "integer", "minimum": 0},
            },
        },
    },
}


def validate_config(config: dict) -> dict:
    try:
        jsonschema.validate(config, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        path = ".".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"config field '{path}': {exc.message}") from exc
    return config


def load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"config file {path} does not exist")
    payload = json.loads(path.read_text())
    # a run.json is accepted in place of a config for exact replay
    if "config" in payload and "dataset" not in payload:
        payload = payload["config"]
    return validate_config(payload)


# ---------------------------------------------------------------------------
# Config resolution
# ---------------------------------------------------------------------------

def build_datasets(config: dict) -> tuple[ImageSet, ImageSet]:
    """(clean train, clean test) per the dataset section."""
    ds = config["dataset"]
    kind = ds["kind"]
    if kind == "synthetic_shapes":
        seed = ds.get("seed", 0)
        train = make_synthetic_shapes(ds.get("n_per_class", 400), ds.get("n_classes", 4),
                                      ds.get("h", 16), ds.get("w", 16), seed)
        test = make_synthetic_shapes(max(ds.get("n_per_class", 400) // 5, 20),
                                     ds.get("n_classes", 4), ds.get("h", 16), ds.get("w", 16),
                                     ds.get("test_seed", seed + 1000))
        return train, test
    if kind == "cifar10":
        full = load_cifar10_binary(ds["path"])
    elif kind == "idx":
        full = load_idx(ds["images"], ds["labels"])
    else:
        raise ConfigError(f"unknown dataset kind {kind!r}")
    return split_train_test(full, ds.get("test_fraction", 0.2), ds.get("seed", 0))


def attack_from_config(config: dict) -> AttackSpec:
    return AttackSpec.from_dict(config["attack"])


def train_config_from(config: dict) -> TrainConfig:
    section = dict(config.get("train", {}))
    if "lr_milestones" in section:
        section["lr_milestones"] = tuple(section["lr_milestones"])
    return TrainConfig(**section)


def distill_config_from(config: dict) -> DistillConfig:
    return DistillConfig.from_dict(config.get("distill", {}))


def _mask_method(layer: str) -> str:
    return f"mask_{layer}"


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"{path} is missing; run the '{producer}' stage first")
    return path


def stage_poison(config: dict, run_dir: Path) -> dict:
    run_dir.mkdir(parents=True, exist_ok=True)
    train, _ = build_datasets(config)
    spec = attack_from_config(config)
    indices = choose_poison_indices(train, spec)
    manifest = {
        "dataset": config["dataset"],
        "attack": spec.to_dict(),
        "attack_hash": spec.spec_hash(),
        "poison_indices": indices.tolist(),
        "n_train": len(train),
    }
    (run_dir / "poison.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def load_poisoned_train(config: dict, run_dir: Path) -> tuple[ImageSet, AttackSpec]:
    manifest = json.loads(_require(run_dir / "poison.json", "poison").read_text())
    train, _ = build_datasets(config)
    spec = AttackSpec.from_dict(manifest["attack"])
    indices = np.asarray(manifest["poison_indices"], dtype=np.int64)
    return poison_dataset(train, spec, indices), spec


def stage_train(config: dict, run_dir: Path) -> dict:
    poisoned, spec = load_poisoned_train(config, run_dir)
    _, test = build_datasets(config)
    model_cfg = config.get("model", {})
    model = build_reference_cnn(poisoned.image_shape, poisoned.n_classes,
                                model_cfg.get("width_multiplier", 1), model_cfg.get("seed", 0),
                                model_cfg.get("head_pool", "avgmax"))
    model, history = train_classifier(model, poisoned, train_config_from(config))
    save_model(run_dir / "model.pt", model)
    save_loss_history(run_dir / "losses.npy", history.losses)
    metrics = {
        "clean_accuracy": evaluate_accuracy(model, test),
        "asr": evaluate_asr(model, make_triggered_testset(test, spec), spec.target_label),
    }
    (run_dir / "train_metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    return metrics


def stage_distill(config: dict, run_dir: Path, layer: str | None = None,
                  overrides: dict | None = None) -> Path:
    poisoned, _ = load_poisoned_train(config, run_dir)
    model = load_model(_require(run_dir / "model.pt", "train"))
    section = dict(config.get("distill", {}))
    section.update(overrides or {})
    if layer is not None:
        section["layer"] = layer
    dcfg = DistillConfig.from_dict(section)
    results = distill_masks(model, poisoned.images, dcfg, seed=config.get("seed", 0))
    table = results_to_score_table(results, poisoned, method=_mask_method(dcfg.layer))
    out = run_dir / f"scores_{table.method}.csv"
    save_scores(out, table)
    n_save = config.get("masks_to_save", 8)
    if n_save:
        mask_dir = run_dir / "masks"
        mask_dir.mkdir(exist_ok=True)
        for r in results[:n_save]:
            if not r.failed:
                save_mask(mask_dir / f"mask_{r.index:05d}.bin", r.mask, export_png=True)
    return out


def _detector_tables(config: dict, run_dir: Path, methods: list[str]) -> dict:
    """Compute or load every requested detector's score table."""
    poisoned, _ = load_poisoned_train(config, run_dir)
    tables = {}
    features = None
    model = None

    def _model():
        nonlocal model
        if model is None:
            model = load_model(_require(run_dir / "model.pt", "train"))
        return model

    for name in methods:
        if name == "mask":
            layer = config.get("distill", {}).get("layer", "logits")
            path = run_dir / f"scores_{_mask_method(layer)}.csv"
            if not path.exists():
                stage_distill(config, run_dir)
            tables[_mask_method(layer)] = load_scores(path)
        elif name == "abl":
            losses = load_loss_history(_require(run_dir / "losses.npy", "train"))
            tables["abl"] = abl_scores(LossHistory(losses), poisoned)
        elif name == "strip":
            s = config.get("strip", {})
            tables["strip"] = strip_scores(_model(), poisoned,
                                           n_overlays=s.get("n_overlays", 64),
                                           seed=s.get("seed", config.get("seed", 0)))
        elif name in ("ss", "ac"):
            if features is None:
                features = forward_features(_model(), poisoned.images)
            if name == "ss":
                tables["ss"] = ss_scores(features, poisoned)
            else:
                tables["ac"], _ = ac_scores(features, poisoned,
                                            reduced_dim=config.get("ac", {}).get("reduced_dim", 10),
                                            seed=config.get("seed", 0))
        else:
            raise ConfigError(f"unknown detector {name!r}")
    return tables


def stage_detect(config: dict, run_dir: Path, gamma: float | None = None) -> dict:
    methods = list(config.get("detectors", ["mask"]))
    gamma = config.get("gamma", 1.0) if gamma is None else gamma
    tables = _detector_tables(config, run_dir, methods)
    reports = {}
    for method, table in tables.items():
        save_scores(run_dir / f"scores_{method}.csv", table)
        report = make_report(table, gamma=gamma, seed=config.get("seed", 0))
        report.save(run_dir / f"report_{method}.json")
        reports[method] = report
    return reports


def stage_mitigate(config: dict, run_dir: Path) -> dict:
    section = config.get("mitigation", {})
    poisoned, spec = load_poisoned_train(config, run_dir)
    _, test = build_datasets(config)
    model = load_model(_require(run_dir / "model.pt", "train"))
    layer = config.get("distill", {}).get("layer", "logits")
    table = load_scores(_require(run_dir / f"scores_{_mask_method(layer)}.csv", "distill"))
    idx_b, idx_c = partition_by_score(poisoned, table,
                                      section.get("p_b", 0.025), section.get("p_c", 0.70))
    triggered = make_triggered_testset(test, spec)
    before = {"clean_accuracy": evaluate_accuracy(model, test),
              "asr": evaluate_asr(model, triggered, spec.target_label)}
    cleaned = unlearn_finetune(model, poisoned, idx_b, idx_c,
                               epochs=section.get("epochs", 5), lr=section.get("lr", 5e-4),
                               seed=section.get("seed", config.get("seed", 0)))
    after = {"clean_accuracy": evaluate_accuracy(cleaned, test),
             "asr": evaluate_asr(cleaned, triggered, spec.target_label)}
    save_model(run_dir / "model_mitigated.pt", cleaned)
    payload = {"before": before, "after": after, **partition_quality(poisoned, idx_b, idx_c)}
    (run_dir / "mitigation.json").write_text(json.dumps(payload, indent=2) + "\n")
    return payload


def stage_bias(config: dict, out_dir: Path) -> dict:
    section = config.get("bias", {})
    out_dir.mkdir(parents=True, exist_ok=True)
    names = tuple(section.get("attributes", ATTRIBUTE_NAMES))
    correlated = section.get("correlated")
    if correlated is not None:
        correlated = (correlated[0], correlated[1], float(correlated[2]))
    images, attrs = make_synthetic_attributes(section.get("n", 600), section.get("h", 16),
                                              section.get("w", 16), section.get("seed", 0),
                                              names=names, correlated=correlated)
    tcfg = TrainConfig(epochs=section.get("epochs", 6), lr=section.get("lr", 0.05),
                       lr_milestones=(), batch_size=64, seed=section.get("seed", 0))
    model = build_multihead_cnn(images.shape[1:], names, seed=section.get("seed", 0))
    model = train_multihead(model, images, attrs.attributes, tcfg)

    dcfg = DistillConfig(steps=section.get("steps", 40))
    dummy = ImageSet(images, np.zeros(len(images), dtype=np.int64),
                     np.zeros(len(images), dtype=bool), 1)
    shift_matrix = np.full((len(names), len(names)), np.nan)
    for i in range(len(names)):
        view = HeadView(model, i)
        results = distill_masks(view, images, dcfg, seed=section.get("seed", 0))
        table = results_to_score_table(results, dummy, method=f"mask_logits_{names[i]}")
        subset = select_low_norm_subset(table, section.get("subset_fraction", 0.02))
        shift, _ = attribute_shift(attrs, subset)
        shift_matrix[:, i] = shift
    graph = top_predictive_attributes(shift_matrix, names, section.get("threshold", 0.8))
    graph.save(out_dir / "bias_graph.json", out_dir / "bias_graph.dot")
    header = "attribute," + ",".join(names)
    rows = [f"{names[j]}," + ",".join(f"{shift_matrix[j, i]:.6f}" for i in range(len(names)))
            for j in range(len(names))]
    (out_dir / "bias_shift_matrix.csv").write_text(header + "\n" + "\n".join(rows) + "\n")
    return {"edges": len(graph.edges), "names": list(names)}


def run_experiment(config: dict, out_dir) -> Path:
    """Run all stages and freeze the resolved config into run.json."""
    validate_config(config)
    torch.set_num_threads(config.get("threads", 1))
    run_dir = Path(out_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    stage_poison(config, run_dir)
    metrics = stage_train(config, run_dir)
    stage_distill(config, run_dir)
    reports = stage_detect(config, run_dir)
    mitigation = None
    if config.get("mitigation", {}).get("enabled", False):
        mitigation = stage_mitigate(config, run_dir)
    run_meta = {
        "config": config,
        "versions": {
            "masklens": __version__,
            "torch": torch.__version__,
            "numpy": np.__version__,
        },
        "train_metrics": metrics,
        "detection": {m: r.to_dict() for m, r in reports.items()},
        "mitigation": mitigation,
    }
    (run_dir / "run.json").write_text(json.dumps(run_meta, indent=2) + "\n")
    return run_dir
