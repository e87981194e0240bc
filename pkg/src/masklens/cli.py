"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 config/usage errors or missing
upstream artifacts.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import experiment
from .experiment import ConfigError, MissingArtifactError


def _add_config_run_dir(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="experiment config JSON")
    parser.add_argument("--run-dir", required=True, help="run artifact directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="masklens",
                                     description="Backdoor forensics via input-mask distillation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="execute every stage and write run.json")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("poison", help="choose poison indices and write the manifest")
    _add_config_run_dir(p)

    p = sub.add_parser("train", help="train the classifier on the poisoned set")
    _add_config_run_dir(p)

    p = sub.add_parser("distill", help="optimize per-sample masks and emit scores")
    _add_config_run_dir(p)
    p.add_argument("--layer", choices=["logits", "features"], default=None,
                   help="model output head to match (default from config)")
    p.add_argument("--alpha", type=float, default=None, help="sparsity weight override")
    p.add_argument("--steps", type=int, default=None, help="optimization steps override")

    p = sub.add_parser("detect", help="threshold scores and emit detection reports")
    _add_config_run_dir(p)
    p.add_argument("--gamma", type=float, default=None,
                   help="threshold sensitivity (mean - gamma * std)")

    p = sub.add_parser("mitigate", help="partition by score and unlearn the trigger")
    _add_config_run_dir(p)

    p = sub.add_parser("bias", help="attribute-shift audit on synthetic attribute data")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="aggregate runs into tables and figures")
    p.add_argument("--runs", nargs="+", required=True, help="finished run directories")
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            config = experiment.load_config(args.config)
            run_dir = experiment.run_experiment(config, args.out)
            print(f"run artifacts in {run_dir}")
        elif args.command == "poison":
            config = experiment.load_config(args.config)
            manifest = experiment.stage_poison(config, Path(args.run_dir))
            print(f"poisoned {len(manifest['poison_indices'])} of {manifest['n_train']} samples")
        elif args.command == "train":
            config = experiment.load_config(args.config)
            metrics = experiment.stage_train(config, Path(args.run_dir))
            print(json.dumps(metrics))
        elif args.command == "distill":
            config = experiment.load_config(args.config)
            overrides = {}
            if args.alpha is not None:
                overrides["alpha"] = args.alpha
            if args.steps is not None:
                overrides["steps"] = args.steps
            out = experiment.stage_distill(config, Path(args.run_dir), layer=args.layer,
                                           overrides=overrides)
            print(f"scores written to {out}")
        elif args.command == "detect":
            config = experiment.load_config(args.config)
            reports = experiment.stage_detect(config, Path(args.run_dir), gamma=args.gamma)
            print(json.dumps({m: r.to_dict() for m, r in reports.items()}, indent=2))
        elif args.command == "mitigate":
            config = experiment.load_config(args.config)
            payload = experiment.stage_mitigate(config, Path(args.run_dir))
            print(json.dumps(payload, indent=2))
        elif args.command == "bias":
            config = experiment.load_config(args.config)
            summary = experiment.stage_bias(config, Path(args.out))
            print(json.dumps(summary))
        elif args.command == "report":
            from .report import aggregate_runs

            out = aggregate_runs([Path(d) for d in args.runs], Path(args.out))
            print(f"report written to {out}")
        else:  # pragma: no cover - argparse enforces the choices
            raise ValueError(args.command)
    except (ConfigError, MissingArtifactError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
