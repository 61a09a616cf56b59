"""Grid metrics, seed aggregation and report serialization."""

import csv
from types import SimpleNamespace

import numpy as np
import pytest

from kktnet.evaluate import (
    GRID_POINTS,
    CostComparison,
    EvalReport,
    aggregate_seeds,
    constraint_violation,
    cost_comparison,
    eval_grid,
    evaluate_network,
    primal_mse,
    reference_arrays,
    save_aggregate,
    save_report,
)
from kktnet.network import network_for
from kktnet.oracle import Dataset, lp_closed_form
from kktnet.problems import PrimalDual, get_problem


def _lp_refs(grid):
    sols = [lp_closed_form(float(p)) for p in grid[:, 0]]
    return Dataset(problem="lp", P=grid,
                   X=np.stack([s.x for s in sols]),
                   Lam=np.zeros((len(sols), 0)),
                   Mu=np.stack([s.mu for s in sols]))


def test_eval_grid_1d_linear():
    lp = get_problem("lp")
    grid = eval_grid(lp)
    assert grid.shape == (GRID_POINTS, 1)
    assert grid[0, 0] == -2400.0 and grid[-1, 0] == 720.0
    steps = np.diff(grid[:, 0])
    np.testing.assert_allclose(steps, steps[0], rtol=1e-12)


def test_eval_grid_2d_lattice():
    ncvx = get_problem("nonconvex")
    grid = eval_grid(ncvx)
    assert grid.shape == (GRID_POINTS, 2)
    assert len(np.unique(grid[:, 0])) == 16
    assert len(np.unique(grid[:, 1])) == 16
    corners = {(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)}
    present = {tuple(row) for row in grid}
    assert corners <= present


def test_eval_grid_rejects_higher_dims():
    fake = SimpleNamespace(region_lo=np.zeros(3), region_hi=np.ones(3))
    with pytest.raises(ValueError, match="grid rule"):
        eval_grid(fake)


def test_primal_mse_constant_offset():
    lp = get_problem("lp")
    grid = eval_grid(lp)
    refs = _lp_refs(grid)
    shifted = refs.X + np.array([0.1, 0.0])
    assert primal_mse(shifted, refs, grid) == pytest.approx(2.56, rel=1e-12)
    assert primal_mse(refs.X, refs, grid) == 0.0
    with pytest.raises(ValueError, match="reference"):
        primal_mse(shifted[:10], refs, grid[:9])


def test_constraint_violation_counts_every_row():
    lp = get_problem("lp")
    grid = eval_grid(lp)
    X = np.tile([-1.0, -1.0], (grid.shape[0], 1))
    eq, ineq = constraint_violation(X, lp, grid)
    assert eq == 0.0
    # only the two sign rows are violated, by 0.1 each, at every point;
    # the evaluation metric must not mask them the way the loss does
    assert ineq == pytest.approx(0.2 * GRID_POINTS, rel=1e-12)


@pytest.mark.parametrize("name", ["rocket_car", "pendulum"])
def test_inequalities_architecturally_zero(name):
    problem = get_problem(name)
    grid = eval_grid(problem)
    for seed in (0, 1):
        net = network_for(problem, width=4, depth=1, seed=seed)
        rng = np.random.default_rng(seed + 17)
        net.theta = rng.normal(scale=3.0, size=net.theta.shape)
        rep = evaluate_network(net, problem, method="optinn", seed=seed)
        assert rep.summary["ineq_total"] == 0.0


def test_cost_comparison_properties():
    cc = CostComparison(pred_cost=np.array([1.0, 2.0]),
                        oracle_cost=np.array([1.0, 1.0]))
    np.testing.assert_array_equal(cc.gap, [0.0, 1.0])
    assert cc.gap_mse == pytest.approx(0.5)
    assert cc.rel_gap_mse == pytest.approx(0.5)

    lp = get_problem("lp")
    grid = eval_grid(lp)
    refs = _lp_refs(grid)
    cc = cost_comparison(refs.X, lp, grid, refs)
    assert cc.gap_mse == 0.0


def test_evaluate_network_summary():
    lp = get_problem("lp")
    net = network_for(lp, width=6, depth=2, seed=0)
    grid = eval_grid(lp)
    refs = _lp_refs(grid)
    rep = evaluate_network(net, lp, refs=refs, method="optinn", seed=3)
    for key in ("eq_total", "ineq_total", "primal_mse_sum", "primal_mse_mean",
                "cost_gap_mse", "rel_cost_gap_mse"):
        assert key in rep.summary, key
    assert rep.summary["primal_mse_mean"] == pytest.approx(
        rep.summary["primal_mse_sum"] / GRID_POINTS, rel=1e-12)
    assert rep.seed == 3 and rep.method == "optinn"

    bare = evaluate_network(net, lp)
    assert bare.x_ref is None and bare.deviation is None
    assert set(bare.summary) == {"eq_total", "ineq_total"}
    with pytest.raises(ValueError, match="reference"):
        evaluate_network(net, lp, refs=refs, grid=grid[:5])


def test_reference_arrays_accept_solution_lists():
    sols = [PrimalDual(x=np.array([1.0, 2.0]), lam=np.zeros(0),
                       mu=np.array([0.5])),
            PrimalDual(x=np.array([3.0, 4.0]), lam=np.zeros(0),
                       mu=np.array([0.0]))]
    X, Lam, Mu = reference_arrays(sols)
    np.testing.assert_array_equal(X, [[1.0, 2.0], [3.0, 4.0]])
    assert Lam.shape == (2, 0)
    np.testing.assert_array_equal(Mu, [[0.5], [0.0]])


def _fake_report(seed, eq, ineq, cost, ref=False):
    P = np.linspace(0.0, 1.0, 4).reshape(-1, 1)
    n = P.shape[0]
    rep = EvalReport(problem="toy", method="optinn", seed=seed, P=P,
                     x_pred=np.full((n, 1), float(seed)),
                     eq_l1=np.full(n, eq), ineq_l1=np.full(n, ineq),
                     pred_cost=np.full(n, cost))
    rep.summary = {"eq_total": eq * n, "ineq_total": ineq * n}
    if ref:
        rep.x_ref = np.zeros((n, 1))
        rep.oracle_cost = np.zeros(n)
        rep.summary["primal_mse_sum"] = float(seed ** 2 * n)
    return rep


def test_aggregate_seeds_bands():
    reps = [_fake_report(0, 1.0, 0.0, 5.0, ref=True),
            _fake_report(2, 3.0, 0.0, 7.0, ref=True)]
    agg = aggregate_seeds(reps)
    assert agg.seeds == [0, 2]
    mean, lo, hi = agg.fields["eq_l1"]
    np.testing.assert_array_equal(mean, np.full(4, 2.0))
    np.testing.assert_array_equal(lo, np.full(4, 1.0))
    np.testing.assert_array_equal(hi, np.full(4, 3.0))
    assert "point_sq_error" in agg.fields
    assert agg.summary["primal_mse_sum"] == (8.0, 0.0, 16.0)

    with pytest.raises(ValueError, match="no reports"):
        aggregate_seeds([])
    other = _fake_report(1, 1.0, 0.0, 5.0)
    other.P = other.P + 0.5
    with pytest.raises(ValueError, match="grids"):
        aggregate_seeds([reps[0], other])


def test_aggregate_skips_point_error_without_refs():
    reps = [_fake_report(0, 1.0, 0.0, 5.0), _fake_report(1, 2.0, 0.0, 6.0)]
    agg = aggregate_seeds(reps)
    assert "point_sq_error" not in agg.fields
    assert set(agg.summary) == {"eq_total", "ineq_total"}


def test_save_report_layout(tmp_path):
    rep = _fake_report(0, 1.5, 0.25, 5.0, ref=True)
    path = save_report(rep, tmp_path / "seed0.csv")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["p_0", "x_0", "dev_0", "eq_l1", "ineq_l1",
                       "pred_cost", "oracle_cost"]
    assert len(rows) == 1 + 4
    assert float(rows[1][3]) == 1.5

    bare = _fake_report(1, 0.0, 0.0, 2.0)
    path2 = save_report(bare, tmp_path / "seed1.csv")
    with open(path2, newline="") as fh:
        head = next(csv.reader(fh))
    assert head == ["p_0", "x_0", "eq_l1", "ineq_l1", "pred_cost"]


def test_save_aggregate_layout(tmp_path):
    agg = aggregate_seeds([_fake_report(0, 1.0, 0.5, 5.0),
                           _fake_report(1, 3.0, 0.0, 6.0)])
    path = save_aggregate(agg, tmp_path / "agg.csv")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0][0] == "p_0"
    for name in ("eq_l1", "ineq_l1", "pred_cost"):
        for stat in ("mean", "min", "max"):
            assert f"{name}_{stat}" in rows[0]
    assert len(rows) == 1 + 4
    i = rows[0].index("eq_l1_mean")
    assert float(rows[1][i]) == 2.0
