"""Reference solvers and dataset generation.

Each benchmark has a dedicated way of producing ground-truth
primal-dual solutions: the LP has a piecewise closed form, the
projection problem is solved by searching the boundary curves, the
rocket car below its input-saturation threshold is one equality-KKT
linear solve, and everything else goes through a generic augmented
Lagrangian method with a damped-Newton inner loop.  All derivatives
the solvers need (gradients, Hessians, constraint Jacobians) come from
the autodiff graphs of the problem definitions; nothing is finite
differenced.

Datasets are written as one CSV of solution records plus a JSON
sidecar describing dimensions and conventions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.optimize import brentq

from .autodiff import Graph
from .problems import (PrimalDual, ProblemDef, kkt_point_residuals,
                       lagrangian, make_pendulum, point_values)

__all__ = [
    "lp_closed_form",
    "solve_augmented_lagrangian",
    "solve_nonconvex_projection",
    "solve_rocket_car_unconstrained",
    "solve",
    "solve_grid",
    "Dataset",
    "generate_dataset",
    "save_dataset",
    "load_dataset",
    "default_train_params",
    "SolveError",
    "RC_INPUT_LIMIT_P",
]

# Parameter value at which the rocket car's unconstrained minimum-energy
# input first reaches the box limit; beyond it the equality-only solve
# is invalid and the inequality-aware solver must be used.
RC_INPUT_LIMIT_P = 28.16


class SolveError(RuntimeError):
    """A reference solve failed to reach its tolerances."""


# ----- LP: piecewise closed form ------------------------------------------

def lp_closed_form(p: float) -> PrimalDual:
    """Exact solution of the LP benchmark, evaluated in rational arithmetic.

    Valid for p >= -2400; below that the feasible set is empty and a
    ValueError is raised.  The four branches join at p = -800, 160, 720.
    """
    q = Fraction(float(p))
    if q >= 720:
        x = (Fraction(0), Fraction(26))
        mu = (Fraction(0), Fraction(0), Fraction(25, 12), Fraction(1, 4), Fraction(0))
    elif q >= 160:
        x = (36 - q / 20, 8 + q / 40)
        mu = (Fraction(0), Fraction(5, 4), Fraction(5, 6), Fraction(0), Fraction(0))
    elif q >= -800:
        x = (30 - q / 80, 10 + q / 80)
        mu = (Fraction(5, 2), Fraction(15, 8), Fraction(0), Fraction(0), Fraction(0))
    elif q >= -2400:
        x = (60 + q / 40, Fraction(0))
        mu = (Fraction(0), Fraction(5, 2), Fraction(0), Fraction(0), Fraction(1, 2))
    else:
        raise ValueError(f"LP infeasible for p = {p} < -2400")
    return PrimalDual(x=np.array([float(v) for v in x]),
                      lam=np.zeros(0),
                      mu=np.array([float(v) for v in mu]))


# ----- generic augmented Lagrangian ----------------------------------------

def _al_graphs(problem: ProblemDef) -> dict:
    """Build (once per problem) the solver's evaluation graphs."""
    hit = problem._cache.get("al")
    if hit is not None:
        return hit
    n_x, n_g, n_h, n_p = problem.n_x, problem.n_g, problem.n_h, problem.n_p

    def emit_phi(graph, x, lam, mu, rho, p):
        phi = problem.f(graph, x, p)
        if n_h:
            h = problem.h(graph, x, p)
            phi = phi + graph.build("dot", [lam, h]) \
                + (rho / 2.0) * graph.build("square", [h]).sum()
        if n_g:
            g = problem.g(graph, x, p)
            shifted = graph.build("relu", [mu + rho * g])
            phi = phi + (graph.build("square", [shifted]).sum()
                         - graph.build("square", [mu]).sum()) / (2.0 * rho)
        return phi

    # value and gradient of the AL objective at a single point
    gv = Graph()
    xv = gv.leaf(n=n_x, name="x")
    lv = gv.leaf(n=max(n_h, 1), name="lam")
    mv = gv.leaf(n=max(n_g, 1), name="mu")
    rv = gv.leaf(name="rho")
    pv = gv.leaf(n=n_p, name="p")
    phiv = emit_phi(gv, xv, lv, mv, rv, pv)
    (gphiv,) = gv.gradient(phiv, [xv])

    # Hessian of the AL objective: one lane per coordinate, unit seeds
    gh = Graph()
    xh = gh.leaf(b=n_x, n=n_x, name="x")
    lh = gh.leaf(n=max(n_h, 1), name="lam")
    mh = gh.leaf(n=max(n_g, 1), name="mu")
    rh = gh.leaf(name="rho")
    ph = gh.leaf(n=n_p, name="p")
    phih = emit_phi(gh, xh, lh, mh, rh, ph)
    (gph,) = gh.gradient(phih, [xh])
    seedh = gh.leaf(b=n_x, n=n_x, name="seed")
    (hess,) = gh.gradient(gh.build("dot", [gph, seedh]), [xh])
    hess_entry = (gh, xh, lh, mh, rh, ph, seedh, hess)

    # Lagrangian gradient plus raw constraint values at a point
    gl = Graph()
    xl = gl.leaf(n=n_x, name="x")
    ll = gl.leaf(n=max(n_h, 1), name="lam")
    ml = gl.leaf(n=max(n_g, 1), name="mu")
    pl = gl.leaf(n=n_p, name="p")
    g_node = problem.g(gl, xl, pl) if n_g else None
    h_node = problem.h(gl, xl, pl) if n_h else None
    lag = lagrangian(problem, gl, xl, ll if n_h else None, ml if n_g else None,
                     pl, g_node=g_node, h_node=h_node)
    (glag,) = gl.gradient(lag, [xl], stop=[xl])

    # Hessian of the Lagrangian and constraint Jacobians, for polishing
    gH = Graph()
    xH = gH.leaf(b=n_x, n=n_x, name="x")
    lH = gH.leaf(n=max(n_h, 1), name="lam")
    mH = gH.leaf(n=max(n_g, 1), name="mu")
    pH = gH.leaf(n=n_p, name="p")
    lagH = lagrangian(problem, gH, xH, lH if n_h else None, mH if n_g else None, pH)
    (gLH,) = gH.gradient(lagH, [xH])
    seedH = gH.leaf(b=n_x, n=n_x, name="seed")
    (hessL,) = gH.gradient(gH.build("dot", [gLH, seedH]), [xH])
    hessL_entry = (gH, xH, lH, mH, pH, seedH, hessL)

    jacs = {}
    for tag, fn, rows in (("g", problem.g, n_g), ("h", problem.h, n_h)):
        if rows == 0:
            continue
        gj = Graph()
        xj = gj.leaf(b=rows, n=n_x, name="x")
        pj = gj.leaf(n=n_p, name="p")
        cons = fn(gj, xj, pj)
        seedj = gj.leaf(b=rows, n=rows, name="seed")
        (jac,) = gj.gradient(gj.build("dot", [cons, seedj]), [xj])
        jacs[tag] = (gj, xj, pj, seedj, jac)

    entry = {
        "vg": (gv, xv, lv, mv, rv, pv, phiv, gphiv),
        "hess": hess_entry,
        "lag": (gl, xl, ll, ml, pl, glag, g_node, h_node),
        "hessL": hessL_entry,
        "jac": jacs,
    }
    problem._cache["al"] = entry
    return entry


def _lam_mu(problem, lam, mu):
    l = lam if problem.n_h else np.zeros(1)
    m = mu if problem.n_g else np.zeros(1)
    return l, m


def _phi_and_grad(problem, al, x, lam, mu, rho, p):
    gv, xv, lv, mv, rv, pv, phiv, gphiv = al["vg"]
    l, m = _lam_mu(problem, lam, mu)
    vals = gv.evaluate({xv: x, lv: l, mv: m, rv: rho, pv: p},
                       targets=[phiv, gphiv])
    return float(vals[phiv.id][0, 0]), vals[gphiv.id].ravel().copy()


def _phi_hess(problem, al, x, lam, mu, rho, p):
    gh, xh, lh, mh, rh, ph, seedh, hess = al["hess"]
    n = problem.n_x
    l, m = _lam_mu(problem, lam, mu)
    vals = gh.evaluate({xh: np.tile(x, (n, 1)), lh: l, mh: m, rh: rho,
                        ph: p, seedh: np.eye(n)}, targets=[hess])
    return vals[hess.id].copy()


def _lag_point(problem, al, x, lam, mu, p):
    gl, xl, ll, ml, pl, glag, g_node, h_node = al["lag"]
    l, m = _lam_mu(problem, lam, mu)
    targets = [glag] + [n for n in (g_node, h_node) if n is not None]
    vals = gl.evaluate({xl: x, ll: l, ml: m, pl: p}, targets=targets)
    gL = vals[glag.id].ravel().copy()
    g = vals[g_node.id].ravel().copy() if g_node is not None else np.zeros(0)
    h = vals[h_node.id].ravel().copy() if h_node is not None else np.zeros(0)
    return gL, g, h


def _hess_lagrangian(problem, al, x, lam, mu, p):
    gH, xH, lH, mH, pH, seedH, hessL = al["hessL"]
    n = problem.n_x
    l, m = _lam_mu(problem, lam, mu)
    vals = gH.evaluate({xH: np.tile(x, (n, 1)), lH: l, mH: m, pH: p,
                        seedH: np.eye(n)}, targets=[hessL])
    return vals[hessL.id].copy()


def _jacobian(problem, al, tag, x, p):
    gj, xj, pj, seedj, jac = al["jac"][tag]
    rows = problem.n_g if tag == "g" else problem.n_h
    vals = gj.evaluate({xj: np.tile(x, (rows, 1)), pj: p,
                        seedj: np.eye(rows)}, targets=[jac])
    return vals[jac.id].copy()


def _newton_inner(problem, al, x, lam, mu, rho, p, gtol, max_iter=120):
    """Damped Newton minimization of the AL objective in x."""
    n = x.size
    eye = np.eye(n)
    phi, gphi = _phi_and_grad(problem, al, x, lam, mu, rho, p)
    tau = 0.0
    for _ in range(max_iter):
        if np.abs(gphi).max() <= gtol:
            break
        H = _phi_hess(problem, al, x, lam, mu, rho, p)
        scale = max(1.0, np.abs(np.diag(H)).max())
        d = None
        tau_try = tau
        for _ in range(30):
            try:
                d = np.linalg.solve(H + (tau_try + 1e-12 * scale) * eye, -gphi)
            except np.linalg.LinAlgError:
                d = None
            if d is not None and gphi @ d < 0:
                break
            tau_try = max(4.0 * tau_try, 1e-8 * scale)
        else:
            break
        slope = gphi @ d
        t = 1.0
        accepted = False
        for _ in range(50):
            xn = x + t * d
            phin, gn = _phi_and_grad(problem, al, xn, lam, mu, rho, p)
            if np.isfinite(phin) and phin <= phi + 1e-4 * t * slope:
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
        x, phi, gphi = xn, phin, gn
        tau = tau_try * 0.25
    return x


def _polish_kkt(problem, al, x, lam, mu, p, tol=1e-12, max_iter=20):
    """Newton refinement of the KKT system on the current active set."""
    n_g, n_h = problem.n_g, problem.n_h
    gL, g, h = _lag_point(problem, al, x, lam, mu, p)
    act = [i for i in range(n_g) if mu[i] > 1e-7 or g[i] > -1e-6]
    for _ in range(max_iter):
        gL, g, h = _lag_point(problem, al, x, lam, mu, p)
        F = np.concatenate([gL, h, g[act] if act else np.zeros(0)])
        if np.abs(F).max() <= tol:
            break
        H = _hess_lagrangian(problem, al, x, lam, mu, p)
        if n_h:
            Jh = _jacobian(problem, al, "h", x, p)
        if act:
            Ja = _jacobian(problem, al, "g", x, p)[act]
        n = problem.n_x
        na = len(act)
        dim = n + n_h + na
        K = np.zeros((dim, dim))
        K[:n, :n] = H
        if n_h:
            K[:n, n:n + n_h] = Jh.T
            K[n:n + n_h, :n] = Jh
        if na:
            K[:n, n + n_h:] = Ja.T
            K[n + n_h:, :n] = Ja
        try:
            dw, *_ = np.linalg.lstsq(K, -F, rcond=None)
        except np.linalg.LinAlgError:
            break
        x = x + dw[:n]
        if n_h:
            lam = lam + dw[n:n + n_h]
        if na:
            mu = mu.copy()
            mu[act] += dw[n + n_h:]
        dropped = [i for i in act if mu[i] < -1e-10]
        if dropped:
            mu[dropped] = 0.0
            act = [i for i in act if i not in dropped]
    mu = np.maximum(mu, 0.0)
    off = np.ones(n_g, dtype=bool)
    off[act] = False
    mu[off] = 0.0
    return x, lam, mu


def solve_augmented_lagrangian(problem: ProblemDef, p, x0=None, lam0=None,
                               mu0=None, tol: float = 1e-8, rho0: float = 10.0,
                               max_outer: int = 60,
                               polish: bool = True) -> PrimalDual:
    """Classic augmented Lagrangian loop with damped-Newton inner solves.

    Multiplier estimates follow the standard first-order updates, but
    only when the inner solve actually reduced the constraint violation;
    otherwise the penalty weight grows tenfold and the estimates are
    left alone, so one bad inner solve cannot poison them.  When
    ``polish`` is set, a final Newton pass on the active-set KKT system
    pushes the residuals to machine precision.  Raises
    :class:`SolveError` if the stationarity, feasibility and
    complementarity targets are not all met.
    """
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    al = _al_graphs(problem)
    x = np.zeros(problem.n_x) if x0 is None else np.asarray(x0, dtype=np.float64).copy()
    lam = np.zeros(problem.n_h) if lam0 is None else np.asarray(lam0, dtype=np.float64).copy()
    mu = np.zeros(problem.n_g) if mu0 is None else np.asarray(mu0, dtype=np.float64).copy()
    rho = rho0
    rho_cap = 1e10
    prev_viol = np.inf
    stall = 0
    stat = feas = comp = np.inf
    best = None
    for outer in range(max_outer):
        gtol = max(0.1 * tol, min(1e-2, 1.0 / (rho * rho)))
        x = _newton_inner(problem, al, x, lam, mu, rho, p, gtol)
        gL, g, h = _lag_point(problem, al, x, lam, mu, p)
        viol = 0.0
        if problem.n_h:
            viol = np.abs(h).max()
        if problem.n_g:
            viol = max(viol, float(np.maximum(g, 0.0).max()))
        viol_ref = prev_viol
        if viol <= max(10.0 * tol, 0.25 * viol_ref):
            if problem.n_h:
                lam = lam + rho * h
            if problem.n_g:
                mu = np.maximum(0.0, mu + rho * g)
            gL, g, h = _lag_point(problem, al, x, lam, mu, p)
            prev_viol = min(prev_viol, viol)
            stall = 0
        else:
            stall += 1
        stat = np.abs(gL).max() if gL.size else 0.0
        comp = float(np.abs(mu * g).max()) if problem.n_g else 0.0
        feas = 0.0
        if problem.n_h:
            feas = np.abs(h).max()
        if problem.n_g:
            feas = max(feas, float(np.maximum(g, 0.0).max()))
        if best is None or max(stat, feas, comp) < best[0]:
            best = (max(stat, feas, comp), x.copy(), lam.copy(), mu.copy())
        if stat <= tol and feas <= tol and comp <= tol:
            break
        if viol > 0.25 * viol_ref and viol > tol:
            if rho >= rho_cap or stall >= 4:
                break
            rho = min(rho * 10.0, rho_cap)
    if best is not None and best[0] < max(stat, feas, comp):
        _, x, lam, mu = best
        gL, g, h = _lag_point(problem, al, x, lam, mu, p)
        stat = np.abs(gL).max() if gL.size else 0.0
        comp = float(np.abs(mu * g).max()) if problem.n_g else 0.0
        feas = 0.0
        if problem.n_h:
            feas = np.abs(h).max()
        if problem.n_g:
            feas = max(feas, float(np.maximum(g, 0.0).max()))
    if polish:
        xp, lp_, mp = _polish_kkt(problem, al, x.copy(), lam.copy(), mu.copy(), p)
        gLp, gp, hp = _lag_point(problem, al, xp, lp_, mp, p)
        res_p = max(np.abs(gLp).max() if gLp.size else 0.0,
                    np.abs(hp).max() if hp.size else 0.0,
                    float(np.maximum(gp, 0.0).max()) if gp.size else 0.0,
                    float(np.abs(mp * gp).max()) if gp.size else 0.0)
        res_0 = max(stat, feas, comp)
        if res_p <= res_0:
            x, lam, mu = xp, lp_, mp
            stat = feas = comp = res_p
    if not (stat <= tol and feas <= tol and comp <= tol):
        raise SolveError(
            f"{problem.name} at p={np.array2string(p, precision=6)}: "
            f"stat={stat:.3e} feas={feas:.3e} comp={comp:.3e} > tol={tol:.1e}")
    return PrimalDual(x=x, lam=lam, mu=mu)


# ----- nonconvex projection -------------------------------------------------

def _cubic_np(t):
    return 2.0 * t ** 3 + 3.0 * t ** 2 + 2.0 * t + 1.0


def _cubic_dnp(t):
    return 6.0 * t ** 2 + 6.0 * t + 2.0


def solve_nonconvex_projection(p, n_grid: int = 1000) -> PrimalDual:
    """Project p onto the lens-shaped feasible set of the cubic benchmark.

    Strictly feasible points map to themselves with zero multipliers.
    Otherwise the four boundary curves are searched on a dense grid,
    each local bracket is refined by root finding on the derivative of
    the squared distance, and the curve intersections (0, +-1) and
    pinch points (+-1, 0) are added as candidates.  Multipliers of the
    active rows are recovered by least squares on the stationarity
    condition, clamped to be nonnegative.
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    p1, p2 = p

    def gvals(z):
        z1, z2 = z
        return np.array([z2 - _cubic_np(z1), -z2 - _cubic_np(z1),
                         z2 - _cubic_np(-z1), -z2 - _cubic_np(-z1)])

    if np.all(gvals(p) < 0.0):
        return PrimalDual(x=p.copy(), lam=np.zeros(0), mu=np.zeros(4))

    # (curve function, z1 domain) for each inequality row
    curves = [
        (lambda t: _cubic_np(t), lambda t: _cubic_dnp(t), -1.0, 0.0, +1.0),
        (lambda t: -_cubic_np(t), lambda t: -_cubic_dnp(t), -1.0, 0.0, +1.0),
        (lambda t: _cubic_np(-t), lambda t: -_cubic_dnp(-t), 0.0, 1.0, +1.0),
        (lambda t: -_cubic_np(-t), lambda t: _cubic_dnp(-t), 0.0, 1.0, +1.0),
    ]
    cands = [np.array(c) for c in ((0.0, 1.0), (0.0, -1.0), (-1.0, 0.0), (1.0, 0.0))]
    for cfun, cder, lo, hi, _sgn in curves:
        ts = np.linspace(lo, hi, n_grid)
        # derivative of the squared distance along the curve
        dd = 2.0 * (ts - p1) + 2.0 * (cfun(ts) - p2) * cder(ts)
        for j in range(len(ts) - 1):
            if dd[j] == 0.0:
                cands.append(np.array([ts[j], cfun(ts[j])]))
            elif dd[j] * dd[j + 1] < 0.0:
                t = brentq(lambda t: 2.0 * (t - p1) + 2.0 * (cfun(t) - p2) * cder(t),
                           ts[j], ts[j + 1])
                cands.append(np.array([t, cfun(t)]))
        jbest = int(np.argmin((ts - p1) ** 2 + (cfun(ts) - p2) ** 2))
        cands.append(np.array([ts[jbest], cfun(ts[jbest])]))

    feas = [z for z in cands if np.all(gvals(z) <= 1e-10)]
    dists = [float(np.sum((z - p) ** 2)) for z in feas]
    z = feas[int(np.argmin(dists))]

    g = gvals(z)
    act = [i for i in range(4) if g[i] > -1e-9]
    z1 = z[0]
    grads = np.array([
        [-_cubic_dnp(z1), 1.0],
        [-_cubic_dnp(z1), -1.0],
        [_cubic_dnp(-z1), 1.0],
        [_cubic_dnp(-z1), -1.0],
    ])
    mu = np.zeros(4)
    rhs = -2.0 * (z - p)
    work = list(act)
    for _ in range(4):
        if not work:
            break
        sol, *_ = np.linalg.lstsq(grads[work].T, rhs, rcond=None)
        if np.all(sol >= -1e-12):
            mu[work] = np.maximum(sol, 0.0)
            break
        keep = [i for i, s in zip(work, sol) if s > 0.0]
        if keep == work:
            mu[work] = np.maximum(sol, 0.0)
            break
        work = keep
    return PrimalDual(x=z, lam=np.zeros(0), mu=mu)


# ----- rocket car: equality-constrained QP ----------------------------------

def solve_rocket_car_unconstrained(p: float, problem: ProblemDef | None = None) -> PrimalDual:
    """One dense KKT solve of the rocket car without its input box.

    Valid for 0 <= p < RC_INPUT_LIMIT_P, where the resulting inputs stay
    inside the box and the zero inequality multipliers are correct.
    Raises ValueError outside that range.
    """
    if not (0.0 <= p < RC_INPUT_LIMIT_P):
        raise ValueError(
            f"equality-only rocket car solve needs 0 <= p < {RC_INPUT_LIMIT_P}, got {p}")
    N = 32 if problem is None else problem.constants["n_steps"]
    dt = 0.4 if problem is None else problem.constants["dt"]
    ns = 2 * (N + 1)
    n_x = ns + N
    n_h = 2 * N + 4
    J = np.zeros((n_h, n_x))
    r = np.zeros(n_h)
    for k in range(N):
        J[2 * k, 2 * (k + 1)] = 1.0
        J[2 * k, 2 * k] = -1.0
        J[2 * k, 2 * k + 1] = -dt
        J[2 * k, ns + k] = -dt * dt / 2.0
        J[2 * k + 1, 2 * (k + 1) + 1] = 1.0
        J[2 * k + 1, 2 * k + 1] = -1.0
        J[2 * k + 1, ns + k] = -dt
    J[2 * N, 0] = 1.0
    J[2 * N + 1, 1] = 1.0
    J[2 * N + 2, ns - 2] = 1.0
    J[2 * N + 3, ns - 1] = 1.0
    r[2 * N + 2] = p
    H = np.zeros((n_x, n_x))
    H[ns:, ns:] = 2.0 * dt * np.eye(N)
    K = np.block([[H, J.T], [J, np.zeros((n_h, n_h))]])
    rhs = np.concatenate([np.zeros(n_x), r])
    sol = np.linalg.solve(K, rhs)
    x, lam = sol[:n_x], sol[n_x:]
    u = x[ns:]
    if np.abs(u).max() > 1.0 + 1e-9:
        raise ValueError(f"input bound active at p={p}; threshold constant is stale")
    return PrimalDual(x=x, lam=lam, mu=np.zeros(2 * N))


# ----- dispatch and sweeps ---------------------------------------------------

def _pendulum_stage(problem: ProblemDef, torque_max: float) -> ProblemDef:
    """A copy of ``problem`` with a relaxed torque bound, cached on the original."""
    c = problem.constants
    if torque_max == c["torque_max"]:
        return problem
    key = ("stage", torque_max)
    hit = problem._cache.get(key)
    if hit is None:
        hit = make_pendulum(n_steps=c["n_steps"], mass=c["mass"],
                            length=c["length"], grav=c["grav"],
                            torque_max=torque_max)
        problem._cache[key] = hit
    return hit


def _solve_pendulum_cold(problem: ProblemDef, p, tol: float) -> PrimalDual:
    """Continuation on the torque bound, starting from a loose relaxation.

    The swing-up is solved first with the torque box widened enough that
    the linear-interpolation initial guess converges, then the bound is
    tightened to its real value.  If a tightening step fails, a midpoint
    stage is inserted, up to a few levels deep.
    """
    p = np.atleast_1d(np.asarray(p, dtype=np.float64))
    t_final = problem.constants["torque_max"]
    t_start = max(12.0, 4.0 * t_final)
    stage = _pendulum_stage(problem, t_start)
    y = solve_augmented_lagrangian(stage, p, x0=_pendulum_init(problem, float(p[0])),
                                   tol=max(tol, 1e-6))
    t_cur = t_start
    pending = [t_final]
    splits = 0
    while pending:
        t_next = pending[-1]
        stage = _pendulum_stage(problem, t_next)
        stage_tol = tol if t_next == t_final else max(tol, 1e-6)
        try:
            y = solve_augmented_lagrangian(stage, p, x0=y.x, lam0=y.lam,
                                           mu0=y.mu, tol=stage_tol)
        except SolveError:
            if splits >= 6:
                raise
            splits += 1
            pending.append(0.5 * (t_cur + t_next))
            continue
        t_cur = t_next
        pending.pop()
    return y


def _pendulum_init(problem: ProblemDef, p: float) -> np.ndarray:
    """Linear angle sweep at constant rate, zero torque."""
    N = problem.constants["n_steps"]
    x = np.zeros(problem.n_x)
    ks = np.arange(1, N)
    x[0:2 * (N - 1):2] = np.pi * ks / N
    x[1:2 * (N - 1):2] = np.pi / p
    return x


def solve(problem: ProblemDef, p, warm: PrimalDual | None = None,
          tol: float = 1e-8) -> PrimalDual:
    """Ground-truth primal-dual solution at one parameter value."""
    p_arr = np.atleast_1d(np.asarray(p, dtype=np.float64))
    if problem.name == "lp":
        return lp_closed_form(float(p_arr[0]))
    if problem.name == "nonconvex":
        return solve_nonconvex_projection(p_arr)
    if problem.name == "rocket_car":
        pv = float(p_arr[0])
        if pv < RC_INPUT_LIMIT_P:
            return solve_rocket_car_unconstrained(pv, problem)
        if warm is not None:
            try:
                return solve_augmented_lagrangian(problem, p_arr, x0=warm.x,
                                                  lam0=warm.lam, mu0=warm.mu,
                                                  tol=tol, rho0=1e3)
            except SolveError:
                pass
        y = solve_rocket_car_unconstrained(RC_INPUT_LIMIT_P * 0.999, problem)
        # rescale toward the target and clip the inputs to the box
        scale = pv / (RC_INPUT_LIMIT_P * 0.999)
        x0 = y.x * scale
        ns = 2 * (problem.constants["n_steps"] + 1)
        x0[ns:] = np.clip(x0[ns:], -1.0, 1.0)
        return solve_augmented_lagrangian(problem, p_arr, x0=x0, lam0=y.lam * scale,
                                          mu0=np.zeros(problem.n_g), tol=tol)
    if problem.name == "pendulum":
        if warm is not None:
            try:
                return solve_augmented_lagrangian(problem, p_arr, x0=warm.x,
                                                  lam0=warm.lam, mu0=warm.mu,
                                                  tol=tol, rho0=1e3)
            except SolveError:
                pass
        return _solve_pendulum_cold(problem, p_arr, tol)
    return solve_augmented_lagrangian(problem, p_arr, tol=tol)


def solve_grid(problem: ProblemDef, P: np.ndarray, tol: float = 1e-8) -> list[PrimalDual]:
    """Solve along a parameter sweep, warm starting each point from its neighbor."""
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    out: list[PrimalDual] = []
    warm = None
    for row in P:
        y = solve(problem, row, warm=warm, tol=tol)
        out.append(y)
        if problem.name in ("rocket_car", "pendulum"):
            warm = y
    return out


# ----- datasets --------------------------------------------------------------

_ORACLE_ID = {
    "lp": "lp_closed_form",
    "nonconvex": "boundary_projection",
    "rocket_car": "kkt_linear_solve/augmented_lagrangian",
    "pendulum": "augmented_lagrangian",
}


@dataclass
class Dataset:
    """Solver solutions at a finite set of parameter values."""

    problem: str
    P: np.ndarray
    X: np.ndarray
    Lam: np.ndarray
    Mu: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.P.shape[0]


def default_train_params(name: str) -> np.ndarray:
    """The parameter values used to build each benchmark's training set."""
    if name == "lp":
        return np.array([[-1500.0], [-300.0], [400.0], [1500.0]])
    if name == "nonconvex":
        side = np.linspace(-1.0, 1.0, 4)
        return np.array([[a, b] for a in side for b in side])
    if name == "rocket_car":
        return np.array([[0.0], [20.0], [40.0]])
    if name == "pendulum":
        return np.linspace(6.0, 15.0, 16).reshape(-1, 1)
    raise ValueError(f"no default training parameters for {name!r}")


def generate_dataset(problem: ProblemDef, params: np.ndarray | None = None,
                     verify_tol: float = 1e-6) -> Dataset:
    """Solve every parameter value and verify each record's KKT residuals.

    Aborts with :class:`SolveError` naming the offending parameter if
    any record's residuals (absolute-value penalties) exceed the
    tolerance on re-checking.
    """
    if params is None:
        params = default_train_params(problem.name)
    params = np.atleast_2d(np.asarray(params, dtype=np.float64))
    sols = solve_grid(problem, params)
    X = np.stack([s.x for s in sols])
    Lam = np.stack([s.lam for s in sols]) if problem.n_h else np.zeros((len(sols), 0))
    Mu = np.stack([s.mu for s in sols]) if problem.n_g else np.zeros((len(sols), 0))
    for i, (row, s) in enumerate(zip(params, sols)):
        r = kkt_point_residuals(problem, s, row)
        worst = max(r.stat, r.feas_g, r.feas_h, r.csl)
        if worst > verify_tol:
            raise SolveError(
                f"dataset record {i} at p={row} fails verification: "
                f"max residual {worst:.3e} > {verify_tol:.1e}")
    outside = [int(i) for i, row in enumerate(params)
               if np.any(row < problem.region_lo) or np.any(row > problem.region_hi)]
    meta = {
        "problem": problem.name,
        "n_p": problem.n_p, "n_x": problem.n_x,
        "n_h": problem.n_h, "n_g": problem.n_g,
        "oracle": _ORACLE_ID.get(problem.name, "augmented_lagrangian"),
        "tolerances": {"kkt_verify": verify_tol, "solver": 1e-8},
        "ordering": "columns are p_*, x_*, lambda_*, mu_*; variable and "
                    "constraint row order follows the problem definition",
        "params_outside_region": outside,
    }
    return Dataset(problem=problem.name, P=params, X=X, Lam=Lam, Mu=Mu, meta=meta)


def _header(ds: Dataset) -> list[str]:
    cols = [f"p_{j}" for j in range(ds.P.shape[1])]
    cols += [f"x_{j}" for j in range(ds.X.shape[1])]
    cols += [f"lambda_{j}" for j in range(ds.Lam.shape[1])]
    cols += [f"mu_{j}" for j in range(ds.Mu.shape[1])]
    return cols


def save_dataset(ds: Dataset, path) -> Path:
    """Write records CSV (17 significant digits) plus a JSON sidecar."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table = np.hstack([ds.P, ds.X, ds.Lam, ds.Mu])
    with open(path, "w") as fh:
        fh.write(",".join(_header(ds)) + "\n")
        for row in table:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")
    meta = dict(ds.meta)
    meta.setdefault("problem", ds.problem)
    meta.setdefault("n_p", ds.P.shape[1])
    meta.setdefault("n_x", ds.X.shape[1])
    meta.setdefault("n_h", ds.Lam.shape[1])
    meta.setdefault("n_g", ds.Mu.shape[1])
    with open(path.with_suffix(".json"), "w") as fh:
        json.dump(meta, fh, indent=2)
        fh.write("\n")
    return path


def load_dataset(path) -> Dataset:
    """Read a dataset CSV and its sidecar, validating the column layout."""
    path = Path(path)
    with open(path.with_suffix(".json")) as fh:
        meta = json.load(fh)
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [[float(v) for v in line.strip().split(",")]
                for line in fh if line.strip()]
    n_p, n_x = meta["n_p"], meta["n_x"]
    n_h, n_g = meta["n_h"], meta["n_g"]
    expect = [f"p_{j}" for j in range(n_p)] + [f"x_{j}" for j in range(n_x)] \
        + [f"lambda_{j}" for j in range(n_h)] + [f"mu_{j}" for j in range(n_g)]
    if header != expect:
        raise ValueError(f"{path}: header does not match sidecar dimensions")
    table = np.array(rows, dtype=np.float64).reshape(len(rows), len(expect))
    o = 0
    P = table[:, o:o + n_p]; o += n_p
    X = table[:, o:o + n_x]; o += n_x
    Lam = table[:, o:o + n_h]; o += n_h
    Mu = table[:, o:o + n_g]
    return Dataset(problem=meta["problem"], P=P, X=X, Lam=Lam, Mu=Mu, meta=meta)
