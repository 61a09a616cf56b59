"""Command-line front end.

Subcommands:

* ``gen-data``  solve the training parameter values and write the dataset
* ``train``     fit networks for a list of seeds, one checkpoint each
* ``eval``      grid metrics for trained checkpoints, per seed + aggregate
* ``compare``   side-by-side metrics and figures for both methods
* ``selfcheck`` fast numerical sanity suite

Every run is driven by an :class:`~kktnet.config.ExperimentConfig`,
either loaded from ``--config`` or synthesized from per-problem
defaults, with ``--problem``, ``--seeds`` and ``--out`` overriding the
file values.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import network as netmod
from .config import ConfigError, ExperimentConfig, default_config, load_config
from .evaluate import (EvalReport, aggregate_seeds, eval_grid, evaluate_network,
                       save_aggregate, save_report)
from .loss import alpha_at, balance_weights, penalty_value
from .network import load_checkpoint, network_for, predict, save_checkpoint
from .oracle import (Dataset, SolveError, default_train_params, generate_dataset,
                     load_dataset, lp_closed_form, save_dataset, solve_grid)
from .problems import (PrimalDual, get_problem, kkt_point_residuals,
                       penalty_option, point_values)
from .training import TrainingError, load_history, save_history

__all__ = ["main"]


def _fail(msg: str, code: int = 1):
    print(f"error: {msg}", file=sys.stderr)
    raise SystemExit(code)


def _load_config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
        if getattr(args, "problem", None) and args.problem != cfg.problem:
            _fail(f"--problem {args.problem} contradicts config problem {cfg.problem}")
    else:
        if not getattr(args, "problem", None):
            _fail("either --config or --problem is required")
        cfg = default_config(args.problem)
    if getattr(args, "seeds", None):
        cfg.seeds = _parse_seeds(args.seeds)
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    cfg.validate()
    return cfg


def _parse_seeds(text: str) -> list:
    """Seed list syntax: '5' means seeds 0..4, '0,3,7' means exactly those."""
    text = text.strip()
    if "," in text:
        return [int(t) for t in text.split(",") if t.strip()]
    n = int(text)
    return list(range(n))


def _parse_params(text: str, n_p: int) -> np.ndarray:
    """Parameter list: comma-separated scalars, or colon-joined tuples."""
    rows = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        vals = [float(v) for v in part.split(":")]
        if len(vals) != n_p:
            raise ValueError(f"parameter {part!r} has {len(vals)} entries, "
                             f"problem expects {n_p}")
        rows.append(vals)
    if not rows:
        raise ValueError("empty parameter list")
    return np.array(rows)


def _dataset_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir) / f"dataset_{cfg.problem}.csv"


def _ckpt_base(cfg: ExperimentConfig, method: str, seed: int) -> Path:
    return Path(cfg.out_dir) / f"{cfg.problem}_{method}_seed{seed}"


def _history_path(cfg: ExperimentConfig, method: str, seed: int) -> Path:
    return Path(cfg.out_dir) / f"{cfg.problem}_{method}_seed{seed}_history.csv"


def _reference_path(cfg: ExperimentConfig) -> Path:
    return Path(cfg.out_dir) / f"reference_{cfg.problem}_{cfg.grid_points}.csv"


def _grid(cfg: ExperimentConfig, problem) -> np.ndarray:
    if cfg.grid_points == 256:
        return eval_grid(problem)
    lo, hi = problem.region_lo, problem.region_hi
    if lo.size == 1:
        return np.linspace(lo[0], hi[0], cfg.grid_points).reshape(-1, 1)
    side = int(round(cfg.grid_points ** 0.5))
    a = np.linspace(lo[0], hi[0], side)
    b = np.linspace(lo[1], hi[1], side)
    A, B = np.meshgrid(a, b, indexing="ij")
    return np.column_stack([A.ravel(), B.ravel()])


def _reference_grid(cfg: ExperimentConfig, problem) -> Dataset:
    """Solver solutions over the evaluation grid, cached on disk."""
    path = _reference_path(cfg)
    if path.exists():
        ds = load_dataset(path)
        if ds.P.shape[0] == cfg.grid_points:
            return ds
    P = _grid(cfg, problem)
    print(f"solving reference grid ({P.shape[0]} points) ...")
    if problem.name == "lp":
        sols = [lp_closed_form(float(p)) for p in P[:, 0]]
    else:
        sols = solve_grid(problem, P, tol=max(cfg.oracle.tol, 1e-10))
    ds = Dataset(problem=problem.name, P=P,
                 X=np.stack([s.x for s in sols]),
                 Lam=np.stack([np.atleast_1d(s.lam) for s in sols]),
                 Mu=np.stack([np.atleast_1d(s.mu) for s in sols]))
    save_dataset(ds, path)
    return ds


# ----- gen-data -------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    problem = get_problem(cfg.problem, **cfg.problem_args)
    if args.params:
        try:
            P = _parse_params(args.params, problem.n_p)
        except ValueError as exc:
            _fail(str(exc))
    elif cfg.oracle.train_params is not None:
        P = np.atleast_2d(np.array(cfg.oracle.train_params, dtype=np.float64))
    else:
        P = default_train_params(cfg.problem)
    try:
        ds = generate_dataset(problem, P, verify_tol=cfg.oracle.verify_tol)
    except (SolveError, ValueError) as exc:
        _fail(f"data generation failed: {exc}", code=2)
    path = _dataset_path(cfg)
    save_dataset(ds, path)
    print(f"wrote {len(ds)} records to {path}")
    worst = 0.0
    for i in range(len(ds)):
        y = PrimalDual(x=ds.X[i], lam=ds.Lam[i], mu=ds.Mu[i])
        r = kkt_point_residuals(problem, y, ds.P[i], penalty_option(1))
        m = max(r.stat, r.feas_g, r.feas_h, r.csl)
        worst = max(worst, m)
        pa = ", ".join(f"{v:g}" for v in ds.P[i])
        print(f"  p = ({pa}): max KKT residual {m:.3e}")
    print(f"worst residual {worst:.3e} (verify tolerance {cfg.oracle.verify_tol:g})")
    return 0


# ----- train ----------------------------------------------------------------

def _train_one(cfg_doc: dict, method: str, seed: int, no_data: bool) -> tuple:
    """Worker: returns (seed, ok, message). Runs in its own process."""
    try:
        cfg = cfgmod.from_dict(cfg_doc)
        problem = get_problem(cfg.problem, **cfg.problem_args)
        if no_data:
            ds = Dataset(problem=cfg.problem,
                         P=np.zeros((0, problem.n_p)),
                         X=np.zeros((0, problem.n_x)),
                         Lam=np.zeros((0, problem.n_h)),
                         Mu=np.zeros((0, problem.n_g)))
        else:
            ds = load_dataset(_dataset_path(cfg))
        tc = cfg.train_config(method, seed)
        if method == "optinn":
            from .training import train_optinn as drive
        else:
            from .training import train_pmnn as drive
        net, hist = drive(problem, ds, tc)
        save_checkpoint(net, _ckpt_base(cfg, method, seed))
        save_history(hist, _history_path(cfg, method, seed))
        msg = (f"{hist.termination} after {len(hist.epoch)} epochs, "
               f"best val {hist.best_val:.3e} at epoch {hist.best_epoch}")
        return seed, True, msg
    except (TrainingError, SolveError, OSError, ConfigError) as exc:
        return seed, False, str(exc)


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if getattr(cfg, args.method, None) is None:
        _fail(f"config has no {args.method} section")
    if not args.no_data and not _dataset_path(cfg).exists():
        _fail(f"dataset {_dataset_path(cfg)} not found; run gen-data first "
              "or pass --no-data")
    Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
    doc = cfg.to_dict()
    jobs = max(1, args.jobs)
    results = []
    if jobs == 1 or len(cfg.seeds) == 1:
        for seed in cfg.seeds:
            results.append(_train_one(doc, args.method, seed, args.no_data))
            _report_seed(cfg.problem, args.method, results[-1])
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = [pool.submit(_train_one, doc, args.method, s, args.no_data)
                    for s in cfg.seeds]
            for fut in concurrent.futures.as_completed(futs):
                results.append(fut.result())
                _report_seed(cfg.problem, args.method, results[-1])
    failed = [r for r in results if not r[1]]
    if failed:
        print(f"{len(failed)} of {len(results)} seeds failed", file=sys.stderr)
        return 1
    return 0


def _report_seed(problem: str, method: str, result: tuple) -> None:
    seed, ok, msg = result
    status = "done" if ok else "FAILED"
    print(f"{problem} {method} seed {seed}: {status} ({msg})")


# ----- eval -----------------------------------------------------------------

def _check_architecture(net, problem, cfg: ExperimentConfig, method: str, seed: int):
    want = network_for(problem, cfg.network.width, cfg.network.depth, seed=0,
                       primal_only=(method == "pmnn"))
    if net.sizes != want.sizes or net.split != want.split:
        _fail(f"checkpoint {_ckpt_base(cfg, method, seed)} architecture "
              f"{net.sizes}/{net.split} does not match config "
              f"{want.sizes}/{want.split}")


def _eval_reports(cfg: ExperimentConfig, problem, method: str,
                  refs: Dataset) -> list[EvalReport]:
    missing = [s for s in cfg.seeds
               if not _ckpt_base(cfg, method, s).with_suffix(".json").exists()]
    if missing:
        _fail(f"missing {method} checkpoints for seeds {missing} in {cfg.out_dir}")
    reports = []
    for seed in cfg.seeds:
        net = load_checkpoint(_ckpt_base(cfg, method, seed))
        _check_architecture(net, problem, cfg, method, seed)
        reports.append(evaluate_network(net, problem, refs=refs, grid=refs.P,
                                        method=method, seed=seed))
    return reports


def _oracle_report(problem, refs: Dataset) -> EvalReport:
    """The reference solutions scored as if they were predictions."""
    P, X = refs.P, refs.X
    fv, gv, hv = point_values(problem, X, P)
    eq = np.sum(np.abs(hv), axis=1) if problem.n_h else np.zeros(P.shape[0])
    ineq = (np.sum(np.maximum(gv, 0.0), axis=1) if problem.n_g
            else np.zeros(P.shape[0]))
    rep = EvalReport(problem=problem.name, method="oracle", seed=0, P=P,
                     x_pred=X, eq_l1=eq, ineq_l1=ineq, pred_cost=fv.ravel())
    rep.x_ref = X
    rep.oracle_cost = fv.ravel()
    rep.summary = {
        "eq_total": float(np.sum(eq)),
        "ineq_total": float(np.sum(ineq)),
        "primal_mse_sum": 0.0,
        "primal_mse_mean": 0.0,
        "cost_gap_mse": 0.0,
        "rel_cost_gap_mse": 0.0,
    }
    return rep


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    problem = get_problem(cfg.problem, **cfg.problem_args)
    refs = _reference_grid(cfg, problem)
    out = Path(cfg.out_dir)
    if args.oracle:
        rep = _oracle_report(problem, refs)
        path = save_report(rep, out / f"{cfg.problem}_oracle_eval.csv")
        print(f"oracle as model: primal MSE {rep.summary['primal_mse_sum']:g}, "
              f"wrote {path}")
        return 0
    reports = _eval_reports(cfg, problem, args.method, refs)
    for rep in reports:
        save_report(rep, out / f"{cfg.problem}_{args.method}_seed{rep.seed}_eval.csv")
        s = rep.summary
        print(f"seed {rep.seed}: primal MSE {s['primal_mse_mean']:.3e} "
              f"(mean/pt), eq {s['eq_total']:.3e}, ineq {s['ineq_total']:.3e}, "
              f"cost-gap MSE {s['cost_gap_mse']:.3e}")
    agg = aggregate_seeds(reports)
    path = save_aggregate(agg, out / f"{cfg.problem}_{args.method}_aggregate.csv")
    med = {k: float(np.median([r.summary[k] for r in reports]))
           for k in reports[0].summary}
    print(f"median over {len(reports)} seeds: "
          + ", ".join(f"{k} {v:.3e}" for k, v in sorted(med.items())))
    print(f"wrote {path}")
    return 0


# ----- compare --------------------------------------------------------------

def cmd_compare(args) -> int:
    from . import report as repmod
    cfg = _load_config(args)
    problem = get_problem(cfg.problem, **cfg.problem_args)
    refs = _reference_grid(cfg, problem)
    out = Path(cfg.out_dir)
    reports = {}
    for method in ("optinn", "pmnn"):
        if getattr(cfg, method) is None:
            continue
        reports[method] = _eval_reports(cfg, problem, method, refs)
    if not reports:
        _fail("config enables neither method")
    rows = []
    for method, reps in sorted(reports.items()):
        for rep in reps:
            s = rep.summary
            rows.append([method, rep.seed, s["primal_mse_mean"], s["eq_total"],
                         s["ineq_total"], s["cost_gap_mse"]])
        meds = [float(np.median([r.summary[k] for r in reps]))
                for k in ("primal_mse_mean", "eq_total", "ineq_total",
                          "cost_gap_mse")]
        rows.append([f"{method}-median", "", *meds])
    cmp_path = out / f"{cfg.problem}_comparison.csv"
    with open(cmp_path, "w") as fh:
        fh.write("method,seed,primal_mse_mean,eq_total,ineq_total,cost_gap_mse\n")
        for row in rows:
            fh.write(",".join(str(v) if isinstance(v, (str, int)) else f"{v:.17g}"
                              for v in row) + "\n")
    print(f"wrote {cmp_path}")
    for row in rows:
        if isinstance(row[0], str) and row[0].endswith("-median"):
            print(f"  {row[0]}: primal MSE {row[2]:.3e}, eq {row[3]:.3e}, "
                  f"ineq {row[4]:.3e}, cost-gap MSE {row[5]:.3e}")
    histories = {}
    for method, reps in reports.items():
        for rep in reps:
            hp = _history_path(cfg, method, rep.seed)
            if hp.exists():
                histories[(method, rep.seed)] = load_history(hp)
    train_P = None
    if _dataset_path(cfg).exists():
        train_P = load_dataset(_dataset_path(cfg)).P
    figures = repmod.render_all(cfg.problem, reports, out,
                                histories=histories or None, train_P=train_P)
    for fp in figures:
        print(f"wrote {fp}")
    return 0


# ----- selfcheck ------------------------------------------------------------

def _check(name: str, ok: bool, detail: str = "") -> bool:
    mark = "ok " if ok else "FAIL"
    print(f"[{mark}] {name}" + (f": {detail}" if detail else ""))
    return ok


def cmd_selfcheck(args) -> int:
    from .loss import AlphaSchedule, kkt_loss, loss_value
    rng = np.random.default_rng(0)
    all_ok = True

    if args.corrupt_softplus:
        netmod._softplus_np = lambda v: v

    # closed-form KKT points have zero residuals; perturbations do not
    problem = get_problem("lp")
    pset = penalty_option(1)
    worst_zero, worst_pert = 0.0, np.inf
    for p in (-1500.0, -300.0, 0.0, 400.0, 720.0):
        s = lp_closed_form(p)
        r = kkt_point_residuals(problem, s, np.array([p]), pset)
        worst_zero = max(worst_zero, r.total())
        bad = PrimalDual(x=s.x + rng.normal(scale=0.8, size=s.x.shape),
                         lam=s.lam, mu=s.mu)
        r2 = kkt_point_residuals(problem, bad, np.array([p]), pset)
        worst_pert = min(worst_pert, r2.total())
    all_ok &= _check("zero residual at optimum", worst_zero < 1e-12,
                     f"max {worst_zero:.2e}")
    all_ok &= _check("positive residual off optimum", worst_pert > 1e-3,
                     f"min {worst_pert:.2e}")

    # penalty shift: argmin of -x + gamma relu(x-1)^2 sits at 1 + 1/(2 gamma)
    xs = np.arange(0.0, 3.0, 1e-5)
    ok = True
    for gamma in (0.5, 1.0, 2.0, 5.0):
        vals = -xs + gamma * np.maximum(xs - 1.0, 0.0) ** 2
        xmin = xs[np.argmin(vals)]
        ok &= abs(xmin - (1.0 + 1.0 / (2.0 * gamma))) < 1e-4
    all_ok &= _check("penalty minimizer shift 1 + 1/(2g)", ok)

    # dual feasibility of the trivialized head
    net = network_for(problem, width=4, depth=2, seed=1)
    theta = rng.normal(scale=0.5, size=net.theta.size)
    _, _, mu = predict(net, rng.uniform(-2400.0, 720.0, size=(16, 1)), theta)
    all_ok &= _check("multiplier head stays nonnegative", bool(np.all(mu >= 0.0)),
                     f"min mu {mu.min():.2e}")

    # gradient of the KKT loss against central differences, width-4 LP net
    P = np.array([[-900.0], [250.0]])
    node = kkt_loss(net, theta, problem, P, penalty_option(2))
    binds = node.graph.bindings
    th_leaf = next(k for k, v in binds.items() if v.shape == (1, theta.size))
    grad_node = node.graph.gradient(node, [th_leaf])[0]
    g = node.graph.evaluate(binds, [grad_node])[grad_node.id].ravel()
    eps = 1e-6
    idx = rng.choice(theta.size, size=12, replace=False)
    rel = 0.0
    for i in idx:
        tp, tm = theta.copy(), theta.copy()
        tp[i] += eps
        tm[i] -= eps
        fp = loss_value(kkt_loss(net, tp, problem, P, penalty_option(2)))
        fm = loss_value(kkt_loss(net, tm, problem, P, penalty_option(2)))
        fd = (fp - fm) / (2 * eps)
        rel = max(rel, abs(fd - g[i]) / max(abs(fd), 1e-12))
    all_ok &= _check("KKT loss gradient vs finite differences", rel < 1e-4,
                     f"max rel err {rel:.2e}")

    # schedule endpoints and balancing equalization
    sched = AlphaSchedule(0.1, 0.9, 50, 150)
    ok = (abs(alpha_at(sched, 0) - 0.1) < 1e-15
          and abs(alpha_at(sched, 50) - 0.1) < 1e-15
          and abs(alpha_at(sched, 200) - 0.9) < 1e-15)
    all_ok &= _check("alpha schedule endpoints", ok)
    norms = {"stat": 1.0, "feas_g": 3.0, "feas_h": 0.5, "csl": 2.0}
    w = balance_weights(norms)
    prods = [w.as_dict()[k] * v for k, v in norms.items()]
    all_ok &= _check("balancing equalizes weighted norms",
                     max(prods) - min(prods) < 1e-10)

    print("selfcheck " + ("passed" if all_ok else "FAILED"))
    return 0 if all_ok else 1


# ----- entry point ----------------------------------------------------------

def _add_common(sub, method=False):
    sub.add_argument("--problem", help="benchmark name")
    sub.add_argument("--config", help="experiment config JSON")
    sub.add_argument("--seeds", help="count like '5' or explicit list '0,3,7'")
    sub.add_argument("--out", help="output directory")
    if method:
        sub.add_argument("--method", choices=("optinn", "pmnn"),
                         default="optinn")


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="kktnet",
        description="Train and evaluate networks that map problem parameters "
                    "to primal-dual solutions.")
    subs = parser.add_subparsers(dest="command", required=True)

    sp = subs.add_parser("gen-data", help="solve training points, write dataset")
    _add_common(sp)
    sp.add_argument("--params", help="override parameter values, e.g. '0,20,40' "
                                     "or 'a:b,c:d' for two-dimensional regions")
    sp.set_defaults(func=cmd_gen_data)

    sp = subs.add_parser("train", help="train one network per seed")
    _add_common(sp, method=True)
    sp.add_argument("--no-data", action="store_true",
                    help="train without any reference records")
    sp.add_argument("--jobs", type=int, default=1,
                    help="parallel worker processes over seeds")
    sp.set_defaults(func=cmd_train)

    sp = subs.add_parser("eval", help="grid metrics for trained checkpoints")
    _add_common(sp, method=True)
    sp.add_argument("--oracle", action="store_true",
                    help="score the reference solutions themselves (debug)")
    sp.set_defaults(func=cmd_eval)

    sp = subs.add_parser("compare", help="side-by-side test of both methods")
    _add_common(sp)
    sp.set_defaults(func=cmd_compare)

    sp = subs.add_parser("selfcheck", help="fast numerical sanity suite")
    sp.add_argument("--corrupt-softplus", action="store_true",
                    help="fault injection: break the positivity transform")
    sp.set_defaults(func=cmd_selfcheck)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
