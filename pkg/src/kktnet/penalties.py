"""Unimodal penalty functions applied to KKT residual entries.

A valid penalty P satisfies P(0) = 0, is differentiable away from 0
and has x P'(x) > 0 for all x != 0, so it is strictly decreasing left
of the origin and strictly increasing right of it.  Three concrete
choices are provided and can be mixed per residual term.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Graph, NodeRef

KINDS = ("abs", "square", "abs_plus_square")


def penalty_node(graph: Graph, kind: str, v: NodeRef) -> NodeRef:
    """Emit P(v) elementwise into the graph."""
    if kind == "abs":
        return graph.build("abs", [v])
    if kind == "square":
        return graph.build("square", [v])
    if kind == "abs_plus_square":
        return graph.build("add", [graph.build("abs", [v]),
                                   graph.build("square", [v])])
    raise ValueError(f"unknown penalty kind {kind!r}")


def penalty_value(kind: str, v) -> np.ndarray:
    """Numeric P(v), elementwise."""
    v = np.asarray(v, dtype=np.float64)
    if kind == "abs":
        return np.abs(v)
    if kind == "square":
        return v * v
    if kind == "abs_plus_square":
        return np.abs(v) + v * v
    raise ValueError(f"unknown penalty kind {kind!r}")
