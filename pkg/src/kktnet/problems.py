"""Parametric NLP definitions and pointwise KKT residuals.

A problem is

    min_x f(x, p)   s.t.   g(x, p) <= 0,   h(x, p) = 0,

with the parameter p ranging over a box region.  The objective and
constraints are recorded as graph-emitting callables so that both the
training losses and the reference solvers differentiate the very same
computation.

Four benchmarks are provided: a two-variable linear program, a
projection onto a nonconvex set, a discrete-time rocket car with
terminal condition, and a pendulum swing-up transcribed with RK4.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Graph, NodeRef
from .penalties import penalty_node

__all__ = [
    "ProblemDef",
    "PrimalDual",
    "KktResiduals",
    "PenaltySet",
    "penalty_option",
    "lagrangian",
    "kkt_point_residuals",
    "kkt_residual_batch",
    "point_values",
    "residual_nodes",
    "get_problem",
    "make_lp",
    "make_nonconvex_projection",
    "make_rocket_car",
    "make_pendulum",
    "make_scalar_demo",
]


@dataclass
class PrimalDual:
    """Numeric candidate point: primal x, equality duals, inequality duals."""

    x: np.ndarray
    lam: np.ndarray
    mu: np.ndarray


@dataclass
class KktResiduals:
    """The four averaged residual terms of one candidate point."""

    stat: float
    feas_g: float
    feas_h: float
    csl: float

    def total(self) -> float:
        return self.stat + self.feas_g + self.feas_h + self.csl


@dataclass(frozen=True)
class PenaltySet:
    """Penalty kind per residual term."""

    stat: str = "abs"
    feas_g: str = "abs"
    feas_h: str = "abs"
    csl: str = "abs"

    def key(self) -> tuple:
        return (self.stat, self.feas_g, self.feas_h, self.csl)


def penalty_option(k: int) -> PenaltySet:
    """The four studied penalty combinations, numbered 1 to 4."""
    if k == 1:
        return PenaltySet("abs", "abs", "abs", "abs")
    if k == 2:
        return PenaltySet("square", "square", "square", "square")
    if k == 3:
        return PenaltySet("square", "abs_plus_square", "abs_plus_square", "square")
    if k == 4:
        return PenaltySet("abs_plus_square", "abs_plus_square",
                          "abs_plus_square", "abs_plus_square")
    raise ValueError(f"penalty option must be 1..4, got {k}")


@dataclass
class ProblemDef:
    """A parametric NLP with graph-emitting objective and constraints.

    ``f``, ``g`` and ``h`` take ``(graph, x_node, p_node)`` and return
    a node of shape ``(b, 1)``, ``(b, n_g)`` and ``(b, n_h)``.  ``g``
    or ``h`` is None when the problem has no such constraints.

    ``bounds`` holds one entry per primal variable, one of ``("free",)``,
    ``("lower", l)``, ``("upper", u)`` or ``("box", l, u)``, consumed by
    the output transform layer.  ``bound_g_rows`` lists the inequality
    rows that restate those variable bounds; they stay in g (and keep
    their multipliers in the complementarity term) but contribute zero
    to the inequality-feasibility residual, since the transform layer
    satisfies them by construction.
    """

    name: str
    n_x: int
    n_p: int
    n_g: int
    n_h: int
    region_lo: np.ndarray
    region_hi: np.ndarray
    f: Callable = field(repr=False, default=None)
    g: Callable = field(repr=False, default=None)
    h: Callable = field(repr=False, default=None)
    bounds: list = field(default_factory=list, repr=False)
    bound_g_rows: list = field(default_factory=list, repr=False)
    constants: dict = field(default_factory=dict, repr=False)
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def feas_g_mask(self) -> np.ndarray:
        mask = np.ones(self.n_g)
        mask[self.bound_g_rows] = 0.0
        return mask


def lagrangian(problem: ProblemDef, graph: Graph, x: NodeRef,
               lam: NodeRef | None, mu: NodeRef | None, p: NodeRef,
               g_node: NodeRef | None = None,
               h_node: NodeRef | None = None) -> NodeRef:
    """Emit L = f + lam.h + mu.g.  Pass g_node/h_node to reuse existing nodes."""
    L = problem.f(graph, x, p)
    if problem.n_h > 0:
        if h_node is None:
            h_node = problem.h(graph, x, p)
        L = L + graph.build("dot", [lam, h_node])
    if problem.n_g > 0:
        if g_node is None:
            g_node = problem.g(graph, x, p)
        L = L + graph.build("dot", [mu, g_node])
    return L


def residual_nodes(problem: ProblemDef, graph: Graph, x: NodeRef,
                   lam: NodeRef | None, mu: NodeRef | None, p: NodeRef,
                   pset: PenaltySet) -> dict[str, NodeRef]:
    """Emit the four averaged residual terms at a candidate point.

    Each returned node has shape (b, 1): stationarity of the Lagrangian
    in x, inequality feasibility (bound rows masked), equality
    feasibility, and complementary slackness.
    """
    g_node = problem.g(graph, x, p) if problem.n_g > 0 else None
    h_node = problem.h(graph, x, p) if problem.n_h > 0 else None
    L = lagrangian(problem, graph, x, lam, mu, p, g_node=g_node, h_node=h_node)
    stop = [n for n in (x, lam, mu) if n is not None]
    (grad_x,) = graph.gradient(L, [x], stop=stop)
    out = {}
    out["stat"] = penalty_node(graph, pset.stat, grad_x).sum() / problem.n_x
    if problem.n_g > 0:
        viol = graph.build("relu", [g_node])
        masked = penalty_node(graph, pset.feas_g, viol) * graph.const(problem.feas_g_mask())
        out["feas_g"] = masked.sum() / problem.n_g
        out["csl"] = penalty_node(graph, pset.csl, mu * g_node).sum() / problem.n_g
    else:
        out["feas_g"] = graph.const(0.0)
        out["csl"] = graph.const(0.0)
    if problem.n_h > 0:
        out["feas_h"] = penalty_node(graph, pset.feas_h, h_node).sum() / problem.n_h
    else:
        out["feas_h"] = graph.const(0.0)
    return out


def _residual_graph(problem: ProblemDef, pset: PenaltySet, batch: int):
    key = ("residual", pset.key(), batch)
    hit = problem._cache.get(key)
    if hit is not None:
        return hit
    graph = Graph()
    x = graph.leaf(b=batch, n=problem.n_x, name="x")
    p = graph.leaf(b=batch, n=problem.n_p, name="p")
    lam = graph.leaf(b=batch, n=problem.n_h, name="lam") if problem.n_h else None
    mu = graph.leaf(b=batch, n=problem.n_g, name="mu") if problem.n_g else None
    terms = residual_nodes(problem, graph, x, lam, mu, p, pset)
    entry = (graph, x, lam, mu, p, terms)
    problem._cache[key] = entry
    return entry


def kkt_residual_batch(problem: ProblemDef, X: np.ndarray, Lam: np.ndarray,
                       Mu: np.ndarray, P: np.ndarray,
                       pset: PenaltySet = PenaltySet()) -> dict[str, np.ndarray]:
    """Residual terms for a batch of candidate points, vectorized over rows."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    B = X.shape[0]
    graph, xn, ln, mn, pn, terms = _residual_graph(problem, pset, B)
    leaves = {xn: X, pn: P}
    if mn is not None:
        Mu = np.atleast_2d(np.asarray(Mu, dtype=np.float64))
        if np.any(Mu < 0.0):
            raise ValueError("negative inequality multiplier")
        leaves[mn] = Mu
    if ln is not None:
        leaves[ln] = np.atleast_2d(np.asarray(Lam, dtype=np.float64))
    targets = [terms[k] for k in ("stat", "feas_g", "feas_h", "csl")]
    vals = graph.evaluate(leaves, targets=targets)
    return {k: np.broadcast_to(vals[terms[k].id], (B, 1)).ravel().copy()
            for k in ("stat", "feas_g", "feas_h", "csl")}


def kkt_point_residuals(problem: ProblemDef, y: PrimalDual, p,
                        pset: PenaltySet = PenaltySet()) -> KktResiduals:
    """The four averaged KKT residuals of one candidate point.

    All four are zero exactly at KKT points of the problem.  Raises on
    dimension mismatches and on negative inequality multipliers.
    """
    x = np.asarray(y.x, dtype=np.float64).ravel()
    lam = np.asarray(y.lam, dtype=np.float64).ravel()
    mu = np.asarray(y.mu, dtype=np.float64).ravel()
    p = np.atleast_1d(np.asarray(p, dtype=np.float64)).ravel()
    if x.size != problem.n_x or lam.size != problem.n_h or mu.size != problem.n_g:
        raise ValueError(
            f"{problem.name}: got sizes x={x.size} lam={lam.size} mu={mu.size}, "
            f"expected {problem.n_x}/{problem.n_h}/{problem.n_g}")
    if p.size != problem.n_p:
        raise ValueError(f"{problem.name}: parameter size {p.size} != {problem.n_p}")
    r = kkt_residual_batch(problem, x[None, :], lam[None, :], mu[None, :],
                           p[None, :], pset)
    return KktResiduals(stat=float(r["stat"][0]), feas_g=float(r["feas_g"][0]),
                        feas_h=float(r["feas_h"][0]), csl=float(r["csl"][0]))


def _point_graph(problem: ProblemDef, batch: int):
    key = ("point", batch)
    hit = problem._cache.get(key)
    if hit is not None:
        return hit
    graph = Graph()
    x = graph.leaf(b=batch, n=problem.n_x, name="x")
    p = graph.leaf(b=batch, n=problem.n_p, name="p")
    f = problem.f(graph, x, p)
    g = problem.g(graph, x, p) if problem.n_g else None
    h = problem.h(graph, x, p) if problem.n_h else None
    entry = (graph, x, p, f, g, h)
    problem._cache[key] = entry
    return entry


def point_values(problem: ProblemDef, X: np.ndarray, P: np.ndarray):
    """Objective, inequality and equality values for rows of (X, P).

    Returns ``(f, g, h)`` with shapes ``(B,)``, ``(B, n_g)``, ``(B, n_h)``;
    g and h come back as empty arrays when the problem lacks them.
    """
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    B = X.shape[0]
    graph, xn, pn, fn, gn, hn = _point_graph(problem, B)
    targets = [fn] + [n for n in (gn, hn) if n is not None]
    vals = graph.evaluate({xn: X, pn: P}, targets=targets)
    f = vals[fn.id].ravel().copy()
    g = vals[gn.id].copy() if gn is not None else np.zeros((B, 0))
    h = vals[hn.id].copy() if hn is not None else np.zeros((B, 0))
    return f, g, h


# ----- benchmark problems -----------------------------------------------

LP_A = np.array([
    [0.01, 0.01],
    [0.04, 0.12],
    [0.06, 0.12],
    [-0.1, 0.0],
    [0.0, -0.1],
])
LP_B0 = np.array([0.4, 2.4, 3.12, 0.0, 0.0])
LP_C = np.array([-0.1, -0.25])


def make_lp() -> ProblemDef:
    """Two-variable LP whose second resource limit moves with p."""

    def f(graph, x, p):
        return graph.build("dot", [graph.const(LP_C), x])

    def g(graph, x, p):
        ax = graph.build("matvec", [graph.const(LP_A.ravel()), x], m=5, n=2)
        shift = graph.build("pad", [p / 1000.0], start=1, stop=2, step=1, out_len=5)
        return ax - (graph.const(LP_B0) + shift)

    return ProblemDef(
        name="lp", n_x=2, n_p=1, n_g=5, n_h=0,
        region_lo=np.array([-2400.0]), region_hi=np.array([720.0]),
        f=f, g=g, h=None,
        bounds=[("lower", 0.0), ("lower", 0.0)],
        bound_g_rows=[3, 4],
        constants={"A": LP_A, "b0": LP_B0, "c": LP_C},
    )


def _cubic(t):
    """2 t^3 + 3 t^2 + 2 t + 1 as graph ops."""
    t2 = t.graph.build("square", [t])
    return 2.0 * (t2 * t) + 3.0 * t2 + 2.0 * t + 1.0


def make_nonconvex_projection() -> ProblemDef:
    """Euclidean projection of p onto {z : |z2| <= c(z1), |z2| <= c(-z1)}.

    c is a cubic with c(-1) = 0 and c(0) = 1, which pinches the set to
    a nonconvex lens over z1 in [-1, 1].
    """

    def f(graph, z, p):
        d = z - p
        return graph.build("dot", [d, d])

    def g(graph, z, p):
        z1, z2 = z[0], z[1]
        up_l = _cubic(z1)
        up_r = _cubic(-z1)
        return graph.build("concat", [z2 - up_l, -z2 - up_l,
                                      z2 - up_r, -z2 - up_r])

    return ProblemDef(
        name="nonconvex", n_x=2, n_p=2, n_g=4, n_h=0,
        region_lo=np.array([-1.0, -1.0]), region_hi=np.array([1.0, 1.0]),
        f=f, g=g, h=None,
        bounds=[("free",), ("free",)],
        bound_g_rows=[],
        constants={},
    )


def make_rocket_car(n_steps: int = 32, dt: float = 0.4) -> ProblemDef:
    """Minimum-energy double integrator from rest at 0 to rest at p.

    Decision vector: states (z_0, v_0, ..., z_N, v_N) time-major, then
    inputs (u_0, ..., u_{N-1}).  Equalities: the 2N interleaved
    dynamics defects, then the 2 initial-state rows, then the 2
    terminal-state rows (z_N - p, v_N).  Inequalities: u_k - 1 for all
    k, then -u_k - 1 for all k; all rows restate the input box.
    """
    N = n_steps
    ns = 2 * (N + 1)
    n_x = ns + N

    def f(graph, x, p):
        u = x[ns:n_x]
        return dt * graph.build("square", [u]).sum()

    def g(graph, x, p):
        u = x[ns:n_x]
        return graph.build("concat", [u - 1.0, -u - 1.0])

    def h(graph, x, p):
        z = x[0:ns:2]
        v = x[1:ns:2]
        u = x[ns:n_x]
        zk, zk1 = z[0:N], z[1:N + 1]
        vk, vk1 = v[0:N], v[1:N + 1]
        dz = zk1 - zk - dt * vk - (dt * dt / 2.0) * u
        dv = vk1 - vk - dt * u
        dyn = graph.build("pad", [dz], start=0, stop=2 * N, step=2, out_len=2 * N) \
            + graph.build("pad", [dv], start=1, stop=2 * N, step=2, out_len=2 * N)
        init = x[0:2]
        term = x[ns - 2:ns] - graph.build("concat", [p, graph.const(0.0)])
        return graph.build("concat", [dyn, init, term])

    bounds = [("free",)] * ns + [("box", -1.0, 1.0)] * N
    return ProblemDef(
        name="rocket_car", n_x=n_x, n_p=1, n_g=2 * N, n_h=2 * N + 4,
        region_lo=np.array([0.0]), region_hi=np.array([40.0]),
        f=f, g=g, h=h,
        bounds=bounds,
        bound_g_rows=list(range(2 * N)),
        constants={"n_steps": N, "dt": dt},
    )


def make_pendulum(n_steps: int = 100, mass: float = 1.0, length: float = 1.0,
                  grav: float = 9.81, torque_max: float = 2.0) -> ProblemDef:
    """Pendulum swing-up with RK4 collocation and duration p.

    The endpoint states are fixed constants (hanging at rest, upright
    at rest), so the decision vector holds the 99 interior states
    (angle, velocity interleaved) followed by the 100 torques.  The
    step size is p / N.  Equalities are the interleaved RK4 defects;
    inequalities restate the torque box.
    """
    N = n_steps
    ni = 2 * (N - 1)
    n_x = ni + N
    c_grav = grav / length
    c_tau = 1.0 / (mass * length * length)

    def f(graph, x, p):
        tau = x[ni:n_x]
        return (p / N) * graph.build("square", [tau]).sum()

    def g(graph, x, p):
        tau = x[ni:n_x]
        return graph.build("concat", [tau - torque_max, -tau - torque_max])

    def h(graph, x, p):
        phi_i = x[0:ni:2]
        om_i = x[1:ni:2]
        tau = x[ni:n_x]
        zero = graph.const(0.0)
        phi0 = graph.build("concat", [zero, phi_i])
        om0 = graph.build("concat", [zero, om_i])
        phi1 = graph.build("concat", [phi_i, graph.const(np.pi)])
        om1 = graph.build("concat", [om_i, zero])
        dtn = p / N

        def acc(phi):
            return -c_grav * graph.build("sin", [phi]) + c_tau * tau

        k1p, k1o = om0, acc(phi0)
        pa = phi0 + (dtn / 2.0) * k1p
        oa = om0 + (dtn / 2.0) * k1o
        k2p, k2o = oa, acc(pa)
        pb = phi0 + (dtn / 2.0) * k2p
        ob = om0 + (dtn / 2.0) * k2o
        k3p, k3o = ob, acc(pb)
        pc = phi0 + dtn * k3p
        oc = om0 + dtn * k3o
        k4p, k4o = oc, acc(pc)
        phi_next = phi0 + (dtn / 6.0) * (k1p + 2.0 * k2p + 2.0 * k3p + k4p)
        om_next = om0 + (dtn / 6.0) * (k1o + 2.0 * k2o + 2.0 * k3o + k4o)
        dphi = phi1 - phi_next
        dom = om1 - om_next
        return graph.build("pad", [dphi], start=0, stop=2 * N, step=2, out_len=2 * N) \
            + graph.build("pad", [dom], start=1, stop=2 * N, step=2, out_len=2 * N)

    bounds = [("free",)] * ni + [("box", -torque_max, torque_max)] * N
    return ProblemDef(
        name="pendulum", n_x=n_x, n_p=1, n_g=2 * N, n_h=2 * N,
        region_lo=np.array([6.0]), region_hi=np.array([15.0]),
        f=f, g=g, h=h,
        bounds=bounds,
        bound_g_rows=list(range(2 * N)),
        constants={"n_steps": N, "mass": mass, "length": length,
                   "grav": grav, "torque_max": torque_max},
    )


def make_scalar_demo() -> ProblemDef:
    """One-variable toy, min -x s.t. x <= 1, used to expose penalty bias.

    The parameter is a dummy input; the optimum sits at x = 1 for every
    p, while a quadratic penalty with weight gamma settles at
    1 + 1/(2 gamma).
    """

    def f(graph, x, p):
        return -x[0]

    def g(graph, x, p):
        return x[0] - 1.0

    return ProblemDef(
        name="scalar", n_x=1, n_p=1, n_g=1, n_h=0,
        region_lo=np.array([0.0]), region_hi=np.array([1.0]),
        f=f, g=g, h=None,
        bounds=[("free",)],
        bound_g_rows=[],
        constants={},
    )


def get_problem(name: str, **kwargs) -> ProblemDef:
    """Look up a benchmark by its registry name.

    Keyword arguments are forwarded to the problem constructor, so
    callers can override discretization or physical constants where the
    constructor exposes them.
    """
    makers = {
        "lp": make_lp,
        "nonconvex": make_nonconvex_projection,
        "rocket_car": make_rocket_car,
        "pendulum": make_pendulum,
        "scalar": make_scalar_demo,
    }
    if name not in makers:
        raise ValueError(f"unknown problem {name!r}, choose from {sorted(makers)}")
    return makers[name](**kwargs)
