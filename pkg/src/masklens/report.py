"""Aggregation of finished runs into tables, histogram data, and figures.

The report stage emits both delimited data (CSV) and rendered matplotlib
figures, so results can be inspected directly or re-plotted elsewhere.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .detect import ScoreTable, roc_points
from .experiment import MissingArtifactError
from .data import load_scores

REPORT_FIELDS = ("auroc", "auprc", "threshold", "gamma", "tpr", "fpr", "trr", "far")


def _load_run(run_dir: Path) -> dict:
    run_json = run_dir / "run.json"
    if not run_json.exists():
        raise MissingArtifactError(f"{run_json} is missing; finish the run first")
    meta = json.loads(run_json.read_text())
    tables = {}
    for path in sorted(run_dir.glob("scores_*.csv")):
        method = path.stem[len("scores_"):]
        tables[method] = load_scores(path)
    return {"dir": run_dir, "meta": meta, "tables": tables,
            "attack": meta["config"]["attack"]["family"],
            "name": run_dir.name}


def score_histogram(table: ScoreTable, bins: int = 30) -> dict:
    """Shared-bin clean/backdoor histogram of the raw scores."""
    edges = np.histogram_bin_edges(table.score, bins=bins)
    clean, _ = np.histogram(table.score[~table.is_backdoor], bins=edges)
    backdoor, _ = np.histogram(table.score[table.is_backdoor], bins=edges)
    return {"edges": edges, "clean": clean, "backdoor": backdoor}


def write_histogram_csv(path, hist: dict) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_left", "bin_right", "clean_count", "backdoor_count"])
        for i in range(len(hist["clean"])):
            writer.writerow([repr(float(hist["edges"][i])), repr(float(hist["edges"][i + 1])),
                             int(hist["clean"][i]), int(hist["backdoor"][i])])


def render_histogram(path, table: ScoreTable, title: str, bins: int = 30) -> None:
    hist = score_histogram(table, bins)
    centers = 0.5 * (hist["edges"][:-1] + hist["edges"][1:])
    width = np.diff(hist["edges"])
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(centers, hist["clean"], width=width, alpha=0.6, label="clean", color="tab:blue")
    ax.bar(centers, hist["backdoor"], width=width, alpha=0.6, label="backdoor", color="tab:red")
    ax.set_xlabel("score")
    ax.set_ylabel("samples")
    ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_roc(path, tables: dict[str, ScoreTable], title: str) -> None:
    fig, ax = plt.subplots(figsize=(4.2, 4))
    for method, table in sorted(tables.items()):
        fpr, tpr = roc_points(table)
        ax.plot(fpr, tpr, label=method)
    ax.plot([0, 1], [0, 1], ls="--", c="gray", lw=0.8)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def aggregate_runs(run_dirs: list[Path], out_dir: Path, bins: int = 30) -> Path:
    """Summarize runs: AUROC matrix, per-pair metric rows, histograms, figures."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    runs = [_load_run(Path(d)) for d in run_dirs]
    methods = sorted({m for run in runs for m in run["meta"].get("detection", {})})

    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "attack"] + methods)
        for run in runs:
            det = run["meta"].get("detection", {})
            writer.writerow([run["name"], run["attack"]]
                            + [f"{det[m]['auroc']:.6f}" if m in det else "" for m in methods])

    with open(out_dir / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["run", "attack", "method"] + list(REPORT_FIELDS))
        for run in runs:
            for method, rep in sorted(run["meta"].get("detection", {}).items()):
                writer.writerow([run["name"], run["attack"], method]
                                + [f"{rep[k]:.6f}" for k in REPORT_FIELDS])

    for run in runs:
        for method, table in run["tables"].items():
            stem = f"hist_{run['name']}_{method}"
            write_histogram_csv(out_dir / f"{stem}.csv", score_histogram(table, bins))
            render_histogram(out_dir / f"{stem}.png", table,
                             f"{run['attack']}: {method}", bins)
        if run["tables"]:
            render_roc(out_dir / f"roc_{run['name']}.png", run["tables"],
                       f"ROC: {run['attack']}")
    return out_dir
