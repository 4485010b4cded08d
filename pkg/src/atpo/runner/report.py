"""Per-tree diagnostics: where the branching happens and how values spread by depth."""
from __future__ import annotations

import numpy as np

from ..credit import traceback
from ..tree import DialogueTree


def branching_histogram(tree: DialogueTree, max_depth: int | None = None) -> list[int]:
    depth = max((n.depth for n in tree.nodes.values() if n.retained_children), default=0)
    hist = [0] * ((max_depth if max_depth is not None else depth) + 1)
    for n in tree.nodes.values():
        if n.B > 1 and n.depth < len(hist):
            hist[n.depth] += 1
    return hist


def returns_by_depth(tree: DialogueTree, targets: dict[int, float]) -> list[dict]:
    rows: dict[int, list[float]] = {}
    for n in tree.nodes.values():
        if n.terminal:
            continue
        rows.setdefault(n.depth, []).append(targets[n.id])
    return [{"depth": d, "count": len(v), "mean": float(np.mean(v)), "var": float(np.var(v))}
            for d, v in sorted(rows.items())]


def emit_tree_report(tree: DialogueTree, targets: dict[int, float] | None = None, gamma: float = 1.0) -> dict:
    targets = targets if targets is not None else traceback(tree, gamma)
    return {"branching": branching_histogram(tree), "returns_by_depth": returns_by_depth(tree, targets)}


def merge_histograms(hists) -> list[int]:
    hists = list(hists)
    width = max((len(h) for h in hists), default=0)
    out = [0] * width
    for h in hists:
        for i, c in enumerate(h):
            out[i] += c
    return out
