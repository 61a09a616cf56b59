"""Post-training metrics on the 256-point evaluation grid.

Everything here is CSV-oriented: per-seed reports carry per-grid-point
records (signed primal deviations, L1 violations, costs) and the seed
aggregator reduces a stack of reports to mean/min/max bands.  Metrics
needing ground truth take reference solutions explicitly so the caller
decides where those come from (fresh solves or a cached dataset).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .network import Network, predict
from .oracle import Dataset
from .problems import ProblemDef, point_values

__all__ = [
    "EvalReport",
    "SeedAggregate",
    "eval_grid",
    "reference_arrays",
    "primal_mse",
    "constraint_violation",
    "cost_comparison",
    "evaluate_network",
    "aggregate_seeds",
    "save_report",
    "save_aggregate",
]

GRID_POINTS = 256


def eval_grid(problem: ProblemDef) -> np.ndarray:
    """Equidistant evaluation grid: 256 points over the parameter region.

    One-dimensional regions get a linear grid with both endpoints;
    the two-dimensional region gets the 16 x 16 lattice.
    """
    lo = np.atleast_1d(problem.region_lo).astype(np.float64)
    hi = np.atleast_1d(problem.region_hi).astype(np.float64)
    if lo.size == 1:
        return np.linspace(lo[0], hi[0], GRID_POINTS).reshape(-1, 1)
    if lo.size == 2:
        side = int(round(np.sqrt(GRID_POINTS)))
        g0 = np.linspace(lo[0], hi[0], side)
        g1 = np.linspace(lo[1], hi[1], side)
        A, B = np.meshgrid(g0, g1, indexing="ij")
        return np.column_stack([A.ravel(), B.ravel()])
    raise ValueError(f"no grid rule for {lo.size}-dimensional regions")


def reference_arrays(refs) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(X, Lam, Mu) arrays from a Dataset or a list of solutions."""
    if isinstance(refs, Dataset):
        return refs.X, refs.Lam, refs.Mu
    X = np.stack([r.x for r in refs])
    Lam = np.stack([np.atleast_1d(r.lam) for r in refs])
    Mu = np.stack([np.atleast_1d(r.mu) for r in refs])
    return X, Lam, Mu


def _predicted_primal(model, P: np.ndarray) -> np.ndarray:
    if isinstance(model, Network):
        return predict(model, P)[0]
    return np.atleast_2d(np.asarray(model, dtype=np.float64))


def primal_mse(model, refs, grid: np.ndarray) -> float:
    """Sum over the grid of squared primal errors.

    ``model`` is a Network or a precomputed (N, n_x) prediction array;
    ``refs`` must cover every grid point.
    """
    P = np.atleast_2d(grid)
    X = _predicted_primal(model, P)
    Xref = reference_arrays(refs)[0]
    if Xref.shape[0] != P.shape[0]:
        raise ValueError(f"{Xref.shape[0]} reference solutions for {P.shape[0]} grid points")
    return float(np.sum((X - Xref) ** 2))


def constraint_violation(model, problem: ProblemDef, grid: np.ndarray) -> tuple[float, float]:
    """(equality, inequality) L1 violation totals over the grid.

    Oracle-free.  Every inequality row counts, including rows that the
    KKT loss masks out as architecturally enforced bounds; a correctly
    wired bound head therefore contributes exactly zero here.
    """
    P = np.atleast_2d(grid)
    X = _predicted_primal(model, P)
    fv, gv, hv = point_values(problem, X, P)
    eq = float(np.sum(np.abs(hv))) if problem.n_h else 0.0
    ineq = float(np.sum(np.maximum(gv, 0.0))) if problem.n_g else 0.0
    return eq, ineq


@dataclass
class CostComparison:
    pred_cost: np.ndarray
    oracle_cost: np.ndarray

    @property
    def gap(self) -> np.ndarray:
        return self.pred_cost - self.oracle_cost

    @property
    def gap_mse(self) -> float:
        return float(np.mean(self.gap ** 2))

    @property
    def rel_gap_mse(self) -> float:
        scale = np.maximum(np.abs(self.oracle_cost), 1e-12)
        return float(np.mean((self.gap / scale) ** 2))


def cost_comparison(model, problem: ProblemDef, grid: np.ndarray, refs) -> CostComparison:
    """Predicted objective value against the reference value per point."""
    P = np.atleast_2d(grid)
    X = _predicted_primal(model, P)
    Xref = reference_arrays(refs)[0]
    pred = point_values(problem, X, P)[0].ravel()
    orac = point_values(problem, Xref, P)[0].ravel()
    return CostComparison(pred_cost=pred, oracle_cost=orac)


@dataclass
class EvalReport:
    """Everything measured for one trained network on the grid."""

    problem: str
    method: str
    seed: int
    P: np.ndarray
    x_pred: np.ndarray
    eq_l1: np.ndarray
    ineq_l1: np.ndarray
    pred_cost: np.ndarray
    x_ref: np.ndarray | None = None
    oracle_cost: np.ndarray | None = None
    summary: dict = field(default_factory=dict)

    @property
    def deviation(self) -> np.ndarray | None:
        if self.x_ref is None:
            return None
        return self.x_pred - self.x_ref

    def point_sq_error(self) -> np.ndarray | None:
        d = self.deviation
        return None if d is None else np.sum(d * d, axis=1)


def evaluate_network(net: Network, problem: ProblemDef, refs=None,
                     grid: np.ndarray | None = None, method: str = "optinn",
                     seed: int = 0) -> EvalReport:
    """Run all grid metrics for one network; refs may be omitted."""
    P = eval_grid(problem) if grid is None else np.atleast_2d(grid)
    X = predict(net, P)[0]
    fv, gv, hv = point_values(problem, X, P)
    eq_l1 = np.sum(np.abs(hv), axis=1) if problem.n_h else np.zeros(P.shape[0])
    ineq_l1 = (np.sum(np.maximum(gv, 0.0), axis=1) if problem.n_g
               else np.zeros(P.shape[0]))
    rep = EvalReport(problem=problem.name, method=method, seed=seed, P=P,
                     x_pred=X, eq_l1=eq_l1, ineq_l1=ineq_l1,
                     pred_cost=fv.ravel())
    rep.summary = {
        "eq_total": float(np.sum(eq_l1)),
        "ineq_total": float(np.sum(ineq_l1)),
    }
    if refs is not None:
        Xref = reference_arrays(refs)[0]
        if Xref.shape[0] != P.shape[0]:
            raise ValueError("reference count does not match the grid")
        rep.x_ref = Xref
        rep.oracle_cost = point_values(problem, Xref, P)[0].ravel()
        err = rep.point_sq_error()
        gaps = rep.pred_cost - rep.oracle_cost
        scale = np.maximum(np.abs(rep.oracle_cost), 1e-12)
        rep.summary.update({
            "primal_mse_sum": float(np.sum(err)),
            "primal_mse_mean": float(np.mean(err)),
            "cost_gap_mse": float(np.mean(gaps ** 2)),
            "rel_cost_gap_mse": float(np.mean((gaps / scale) ** 2)),
        })
    return rep


@dataclass
class SeedAggregate:
    """Componentwise mean/min/max bands across seed reports."""

    problem: str
    method: str
    seeds: list
    P: np.ndarray
    fields: dict  # name -> (mean, lo, hi) arrays over grid points
    summary: dict  # name -> (mean, lo, hi) scalars


def aggregate_seeds(reports: list[EvalReport]) -> SeedAggregate:
    if not reports:
        raise ValueError("no reports to aggregate")
    first = reports[0]
    for r in reports[1:]:
        if r.P.shape != first.P.shape or not np.allclose(r.P, first.P):
            raise ValueError("reports use different grids")
    per_point = {"eq_l1": [r.eq_l1 for r in reports],
                 "ineq_l1": [r.ineq_l1 for r in reports],
                 "pred_cost": [r.pred_cost for r in reports]}
    if all(r.x_ref is not None for r in reports):
        per_point["point_sq_error"] = [r.point_sq_error() for r in reports]
    fields = {}
    for name, stack in per_point.items():
        A = np.stack(stack)
        fields[name] = (A.mean(axis=0), A.min(axis=0), A.max(axis=0))
    summary = {}
    keys = set.intersection(*[set(r.summary) for r in reports])
    for k in sorted(keys):
        v = np.array([r.summary[k] for r in reports])
        summary[k] = (float(v.mean()), float(v.min()), float(v.max()))
    return SeedAggregate(problem=first.problem, method=first.method,
                         seeds=[r.seed for r in reports], P=first.P,
                         fields=fields, summary=summary)


def save_report(report: EvalReport, path) -> Path:
    """Per-seed CSV: one row per grid point."""
    path = Path(path)
    n_p = report.P.shape[1]
    n_x = report.x_pred.shape[1]
    dev = report.deviation
    head = [f"p_{i}" for i in range(n_p)]
    head += [f"x_{i}" for i in range(n_x)]
    if dev is not None:
        head += [f"dev_{i}" for i in range(n_x)]
    head += ["eq_l1", "ineq_l1", "pred_cost"]
    if report.oracle_cost is not None:
        head.append("oracle_cost")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(head)
        for i in range(report.P.shape[0]):
            row = [f"{v:.17g}" for v in report.P[i]]
            row += [f"{v:.17g}" for v in report.x_pred[i]]
            if dev is not None:
                row += [f"{v:.17g}" for v in dev[i]]
            row += [f"{report.eq_l1[i]:.17g}", f"{report.ineq_l1[i]:.17g}",
                    f"{report.pred_cost[i]:.17g}"]
            if report.oracle_cost is not None:
                row.append(f"{report.oracle_cost[i]:.17g}")
            w.writerow(row)
    return path


def save_aggregate(agg: SeedAggregate, path) -> Path:
    """Across-seed CSV: mean/min/max columns per tracked field."""
    path = Path(path)
    names = sorted(agg.fields)
    head = [f"p_{i}" for i in range(agg.P.shape[1])]
    for n in names:
        head += [f"{n}_mean", f"{n}_min", f"{n}_max"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(head)
        for i in range(agg.P.shape[0]):
            row = [f"{v:.17g}" for v in agg.P[i]]
            for n in names:
                mean, lo, hi = agg.fields[n]
                row += [f"{mean[i]:.17g}", f"{lo[i]:.17g}", f"{hi[i]:.17g}"]
            w.writerow(row)
    return path
