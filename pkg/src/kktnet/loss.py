"""Training losses: sampled KKT residuals, regression, penalty objective.

All losses are built as graph nodes so that derivatives in the network
parameters come from the same machinery as everything else.  The
wrappers at the bottom (kkt_loss, mse_loss, pm_loss) assemble a fresh
graph, bind the numeric inputs on it and return the scalar node; the
emit_* functions append to a caller-owned graph, which is how the
training driver shares one graph across epochs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, NodeRef
from .network import Network, forward, n_params, split_trivialize
from .penalties import penalty_value
from .problems import PenaltySet, ProblemDef, penalty_option, residual_nodes

__all__ = [
    "TERM_ORDER",
    "LossWeights",
    "AlphaSchedule",
    "PenaltyConfig",
    "penalty_eval",
    "emit_kkt_terms",
    "emit_weighted_sum",
    "emit_mse",
    "emit_pm",
    "kkt_loss",
    "mse_loss",
    "pm_loss",
    "combined_loss",
    "balance_weights",
    "alpha_at",
    "loss_value",
]

TERM_ORDER = ("stat", "feas_g", "feas_h", "csl")


@dataclass(frozen=True)
class LossWeights:
    """Multipliers for the four residual terms of the KKT loss."""

    stat: float = 1.0
    feas_g: float = 1.0
    feas_h: float = 1.0
    csl: float = 1.0
    beta: float = 1e-8

    def __post_init__(self):
        for k in TERM_ORDER:
            if getattr(self, k) <= 0.0:
                raise ValueError(f"weight {k} must be positive")

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in TERM_ORDER}


@dataclass(frozen=True)
class AlphaSchedule:
    """Cosine ramp for the optimality/regression mixing factor.

    alpha stays at alpha_lo for the first d_init epochs, rises along a
    half cosine over the next d_anneal epochs and then holds alpha_hi.
    d_final is the intended length of the hold phase; alpha_at does not
    need it but training budgets reference it.
    """

    alpha_lo: float = 0.1
    alpha_hi: float = 0.9
    d_init: int = 50
    d_anneal: int = 150
    d_final: int = 0

    def __post_init__(self):
        if not (0.0 <= self.alpha_lo <= self.alpha_hi <= 1.0):
            raise ValueError("need 0 <= alpha_lo <= alpha_hi <= 1")
        if self.d_anneal <= 0:
            raise ValueError("d_anneal must be positive")


@dataclass(frozen=True)
class PenaltyConfig:
    """Coefficients of the constraint-penalizing objective."""

    gamma_g: float = 100.0
    gamma_h: float = 100.0

    def __post_init__(self):
        if self.gamma_g < 0.0 or self.gamma_h < 0.0:
            raise ValueError("penalty coefficients must be nonnegative")


def penalty_eval(kind: str, v):
    """Numeric penalty value; abs, square or their sum."""
    return penalty_value(kind, v)


def _batch_of(node: NodeRef) -> int:
    return node.shape[0]


def emit_kkt_terms(graph: Graph, net: Network, theta: NodeRef, p: NodeRef,
                   problem: ProblemDef, pset: PenaltySet) -> dict[str, NodeRef]:
    """Per-term KKT losses at the network output, averaged over the batch.

    Returns {"stat", "feas_g", "feas_h", "csl"} -> (1, 1) nodes.  Each
    is the sample mean of the corresponding residual, unweighted; the
    caller applies loss weights.
    """
    raw = forward(graph, net, theta, p)
    x, lam, mu = split_trivialize(graph, net, raw)
    res = residual_nodes(problem, graph, x, lam, mu, p, pset)
    B = float(_batch_of(p))
    return {k: graph.build("bsum", [res[k]]) / B for k in TERM_ORDER}


def emit_weighted_sum(graph: Graph, terms: dict[str, NodeRef], weights) -> NodeRef:
    """Combine the four terms with weights given as floats or nodes."""
    if isinstance(weights, LossWeights):
        weights = weights.as_dict()
    total = None
    for k in TERM_ORDER:
        piece = terms[k] * weights[k]
        total = piece if total is None else total + piece
    return total


def emit_mse(graph: Graph, net: Network, theta: NodeRef, p: NodeRef,
             target: NodeRef) -> NodeRef:
    """Sum of squared output errors over the batch (no averaging)."""
    raw = forward(graph, net, theta, p)
    x, lam, mu = split_trivialize(graph, net, raw)
    blocks = [b for b in (x, lam, mu) if b is not None]
    yhat = blocks[0] if len(blocks) == 1 else graph.build("concat", blocks)
    diff = yhat - target
    return graph.build("bsum", [(diff * diff).sum()])


def emit_pm(graph: Graph, net: Network, theta: NodeRef, p: NodeRef,
            problem: ProblemDef, config: PenaltyConfig) -> NodeRef:
    """Mean constraint-penalizing objective at the network's primal output.

    No bound-row masking here: the penalty objective is what drives the
    baseline toward feasibility, so every inequality counts.
    """
    raw = forward(graph, net, theta, p)
    x = split_trivialize(graph, net, raw)[0]
    d = problem.f(graph, x, p)
    if problem.n_g > 0:
        viol = graph.build("relu", [problem.g(graph, x, p)])
        d = d + config.gamma_g * (viol * viol).sum()
    if problem.n_h > 0:
        h = problem.h(graph, x, p)
        d = d + config.gamma_h * (h * h).sum()
    B = float(_batch_of(p))
    return graph.build("bsum", [d]) / B


def _fresh(net: Network, P: np.ndarray, n_p: int):
    graph = Graph()
    theta = graph.leaf(1, n_params(net.sizes), name="theta")
    p = graph.leaf(P.shape[0], n_p, name="p")
    return graph, theta, p


def kkt_loss(net: Network, theta: np.ndarray, problem: ProblemDef,
             sampled_params, pset: PenaltySet | None = None,
             weights: LossWeights = LossWeights()) -> NodeRef:
    """Weighted KKT loss over a parameter sample, as a bound graph node.

    The returned node's graph carries a ``bindings`` dict so
    :func:`loss_value` can evaluate it directly; gradients in theta use
    the leaf named "theta".
    """
    P = np.atleast_2d(np.asarray(sampled_params, dtype=np.float64))
    if P.shape[0] == 0:
        raise ValueError("empty parameter sample")
    if pset is None:
        pset = penalty_option(1)
    graph, th, p = _fresh(net, P, problem.n_p)
    terms = emit_kkt_terms(graph, net, th, p, problem, pset)
    node = emit_weighted_sum(graph, terms, weights)
    graph.bindings = {th: np.asarray(theta, dtype=np.float64).reshape(1, -1), p: P}
    return node


def mse_loss(net: Network, theta: np.ndarray, dataset,
             primal_only: bool = False) -> NodeRef:
    """Regression loss against reference solutions (sum over records)."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    P = np.atleast_2d(dataset.P)
    cols = [dataset.X]
    if not primal_only:
        cols += [dataset.Lam, dataset.Mu]
    Y = np.hstack([c for c in cols if c.size])
    n_out = net.sizes[-1]
    if Y.shape[1] != n_out:
        raise ValueError(f"dataset rows have {Y.shape[1]} outputs, network {n_out}")
    graph, th, p = _fresh(net, P, P.shape[1])
    target = graph.const(Y)
    node = emit_mse(graph, net, th, p, target)
    graph.bindings = {th: np.asarray(theta, dtype=np.float64).reshape(1, -1), p: P}
    return node


def pm_loss(net: Network, theta: np.ndarray, problem: ProblemDef,
            sampled_params, config: PenaltyConfig = PenaltyConfig()) -> NodeRef:
    """Penalty-method training loss over a parameter sample."""
    P = np.atleast_2d(np.asarray(sampled_params, dtype=np.float64))
    if P.shape[0] == 0:
        raise ValueError("empty parameter sample")
    graph, th, p = _fresh(net, P, problem.n_p)
    node = emit_pm(graph, net, th, p, problem, config)
    graph.bindings = {th: np.asarray(theta, dtype=np.float64).reshape(1, -1), p: P}
    return node


def loss_value(node: NodeRef, extra: dict | None = None) -> float:
    """Evaluate a loss node using the bindings stored on its graph."""
    leaves = dict(getattr(node.graph, "bindings", {}))
    if extra:
        leaves.update(extra)
    return float(np.asarray(node.graph.evaluate(leaves, targets=[node])[node.id]).item())


def combined_loss(alpha: float, l_opt, l_mse):
    """Convex combination of an optimality loss and the regression loss."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    return alpha * l_opt + (1.0 - alpha) * l_mse


def balance_weights(grad_norms, beta: float = 1e-8) -> LossWeights:
    """Weights that equalize per-term gradient magnitudes.

    A term whose gradient norm is at or below beta keeps weight 1, so
    identically-zero terms (say, no equality constraints) do not blow
    up the others.
    """
    if isinstance(grad_norms, dict):
        norms = [float(grad_norms[k]) for k in TERM_ORDER]
    else:
        norms = [float(v) for v in grad_norms]
    if len(norms) != len(TERM_ORDER):
        raise ValueError(f"need {len(TERM_ORDER)} gradient norms")
    if any(v < 0 for v in norms):
        raise ValueError("gradient norms must be nonnegative")
    total = sum(norms)
    w = {k: (total / v if v > beta else 1.0) for k, v in zip(TERM_ORDER, norms)}
    return LossWeights(**w, beta=beta)


def alpha_at(schedule: AlphaSchedule, epoch: int) -> float:
    """Mixing factor at a given epoch under the cosine schedule."""
    if epoch < 0:
        raise ValueError("epoch must be nonnegative")
    lo, hi = schedule.alpha_lo, schedule.alpha_hi
    if epoch <= schedule.d_init:
        return lo
    t = epoch - schedule.d_init
    if t < schedule.d_anneal:
        return lo + 0.5 * (hi - lo) * (1.0 - math.cos(math.pi * t / schedule.d_anneal))
    return hi
