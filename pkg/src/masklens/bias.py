"""Attribute-shift scoring over low-score subsets.

The same low-mask-norm signal that flags poisoned samples also flags
samples a classifier decides on suspiciously little evidence. Comparing
attribute prevalence inside that subset against the full dataset surfaces
which attributes drive which classifier.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import AttributeTable
from .detect import ScoreTable


def select_low_norm_subset(table: ScoreTable, fraction: float = 0.005) -> np.ndarray:
    """Sample indices of the floor(fraction * n) lowest scores, index tie-break."""
    n = len(table)
    count = int(np.floor(fraction * n))
    if count < 1:
        raise ValueError(f"fraction {fraction} of {n} samples selects nothing")
    order = np.lexsort((table.index, table.score))
    return table.index[order[:count]].copy()


def attribute_shift(attrs: AttributeTable, subset_indices) -> tuple[np.ndarray, np.ndarray]:
    """Prevalence shift of every attribute inside the subset.

    Returns (shift, skipped): shift[j] = (P_sub_j - P_j) / max(P_j, 1 - P_j),
    guaranteed in [-1, 1]; attributes whose full-set prevalence is exactly
    0 or 1 carry no signal and are skipped (shift NaN, skipped True).
    """
    subset_indices = np.asarray(subset_indices, dtype=np.int64)
    if subset_indices.size == 0:
        raise ValueError("subset is empty")
    full = attrs.attributes
    p_full = full.mean(axis=0)
    p_sub = full[subset_indices].mean(axis=0)
    skipped = (p_full == 0.0) | (p_full == 1.0)
    denom = np.maximum(p_full, 1.0 - p_full)
    shift = np.where(skipped, np.nan, (p_sub - p_full) / denom)
    return shift, skipped


@dataclass(frozen=True)
class BiasGraph:
    """Directed edges (source attribute -> audited attribute, shift score)."""

    nodes: tuple[str, ...]
    edges: tuple[tuple[int, int, float], ...]

    def __post_init__(self):
        for j, i, s in self.edges:
            if j == i:
                raise ValueError("self-edges are not allowed")
            if not abs(s) <= 1.0:
                raise ValueError(f"edge score {s} outside [-1, 1]")

    def to_json(self) -> str:
        payload = {
            "nodes": list(self.nodes),
            "edges": [
                {"source": self.nodes[j], "target": self.nodes[i], "score": s}
                for j, i, s in self.edges
            ],
        }
        return json.dumps(payload, indent=2) + "\n"

    def to_dot(self) -> str:
        lines = ["digraph bias {"]
        for name in self.nodes:
            lines.append(f'  "{name}";')
        for j, i, s in self.edges:
            color = "red" if s > 0 else "blue"
            lines.append(
                f'  "{self.nodes[j]}" -> "{self.nodes[i]}" [label="{s:+.2f}", color={color}];'
            )
        lines.append("}")
        return "\n".join(lines) + "\n"

    def save(self, json_path, dot_path) -> None:
        Path(json_path).write_text(self.to_json())
        Path(dot_path).write_text(self.to_dot())


def top_predictive_attributes(shift_matrix: np.ndarray, names, threshold: float = 0.8) -> BiasGraph:
    """Edges j -> i wherever |shift[j, i]| >= threshold, excluding j == i.

    ``shift_matrix[j, i]`` is attribute j's prevalence shift inside the
    subset selected by attribute i's classifier. NaN entries (skipped
    attributes) never produce edges.
    """
    shift_matrix = np.asarray(shift_matrix, dtype=np.float64)
    names = tuple(names)
    if shift_matrix.shape != (len(names), len(names)):
        raise ValueError("shift matrix must be square over the attribute names")
    edges = []
    for j in range(len(names)):
        for i in range(len(names)):
            s = shift_matrix[j, i]
            if j != i and np.isfinite(s) and abs(s) >= threshold:
                edges.append((j, i, float(s)))
    return BiasGraph(nodes=names, edges=tuple(edges))
