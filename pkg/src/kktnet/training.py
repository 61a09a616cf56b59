"""Full-batch AdamW training drivers for both network variants.

One graph is assembled per run, holding the training loss, the
validation loss and every gradient as nodes; each epoch then binds
fresh parameter samples and the current scalar knobs (alpha, loss
weights) and evaluates just the nodes it needs.  This keeps the
per-epoch Python overhead at a couple of array dict lookups.

The validation loss never depends on reference data: for the KKT
variant it is the absolute-penalty, unit-weight KKT loss on freshly
sampled parameters; for the penalty variant it is the fixed-gamma
penalty objective on fresh samples.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autodiff import Graph
from .loss import (TERM_ORDER, AlphaSchedule, LossWeights, PenaltyConfig, alpha_at,
                   balance_weights, emit_kkt_terms, emit_mse, emit_pm)
from .network import Network, n_params, network_for
from .problems import PenaltySet, ProblemDef, penalty_option

__all__ = [
    "TrainingError",
    "TrainConfig",
    "TrainHistory",
    "AdamState",
    "adamw_step",
    "lr_sequence",
    "reduce_lr_on_plateau",
    "early_stop",
    "sample_params",
    "train_optinn",
    "train_pmnn",
    "save_history",
    "load_history",
]


class TrainingError(RuntimeError):
    """Raised when a run cannot continue (non-finite loss or gradient)."""


@dataclass
class TrainConfig:
    """Knobs shared by both training drivers.

    The plateau/early-stop patiences default to desk-scale values; the
    long-run settings from the original protocol are factor 0.8 with
    patience 2000 and early stop patience 20000.
    """

    width: int = 32
    depth: int = 3
    epochs: int = 20000
    lr: float = 1e-3
    weight_decay: float = 1e-2
    n_collocation: int = 64
    n_validation: int = 64
    schedule: AlphaSchedule = field(default_factory=lambda: AlphaSchedule(
        alpha_lo=0.1, alpha_hi=0.9, d_init=1000, d_anneal=4000))
    alpha: float = 0.5
    pset: PenaltySet = field(default_factory=lambda: penalty_option(2))
    pconfig: PenaltyConfig = field(default_factory=PenaltyConfig)
    balance_beta: float = 1e-8
    balance_every: int = 100
    plateau_factor: float = 0.8
    plateau_patience: int = 500
    early_stop_patience: int = 5000
    min_improve: float = 1e-12
    seed: int = 0
    restore_best: bool = True
    pm_enforce_primal: bool = False

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.epochs < 1 or self.n_collocation < 1 or self.n_validation < 1:
            raise ValueError("epochs and sample counts must be at least 1")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ValueError("patience values must be positive")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("fixed alpha must lie in [0, 1]")


@dataclass
class TrainHistory:
    """Per-epoch record of one run."""

    epoch: list = field(default_factory=list)
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    alpha: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    omega_stat: list = field(default_factory=list)
    omega_feasg: list = field(default_factory=list)
    omega_feash: list = field(default_factory=list)
    omega_csl: list = field(default_factory=list)
    termination: str = "budget"
    best_epoch: int = -1
    best_val: float = np.inf


HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "alpha", "lr",
                   "omega_stat", "omega_feasg", "omega_feash", "omega_csl")


def save_history(history: TrainHistory, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTORY_COLUMNS)
        for i in range(len(history.epoch)):
            w.writerow([history.epoch[i],
                        f"{history.train_loss[i]:.10g}",
                        f"{history.val_loss[i]:.10g}",
                        f"{history.alpha[i]:.10g}",
                        f"{history.lr[i]:.10g}",
                        f"{history.omega_stat[i]:.10g}",
                        f"{history.omega_feasg[i]:.10g}",
                        f"{history.omega_feash[i]:.10g}",
                        f"{history.omega_csl[i]:.10g}"])
    return path


def load_history(path) -> TrainHistory:
    """Read a history CSV written by :func:`save_history`."""
    hist = TrainHistory()
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != HISTORY_COLUMNS:
        raise ValueError(f"{path}: unexpected history columns {rows[:1]}")
    for row in rows[1:]:
        hist.epoch.append(int(row[0]))
        hist.train_loss.append(float(row[1]))
        hist.val_loss.append(float(row[2]))
        hist.alpha.append(float(row[3]))
        hist.lr.append(float(row[4]))
        hist.omega_stat.append(float(row[5]))
        hist.omega_feasg.append(float(row[6]))
        hist.omega_feash.append(float(row[7]))
        hist.omega_csl.append(float(row[8]))
    if hist.val_loss:
        i = int(np.argmin(hist.val_loss))
        hist.best_epoch = hist.epoch[i]
        hist.best_val = hist.val_loss[i]
    return hist


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @staticmethod
    def zeros(n: int) -> "AdamState":
        return AdamState(m=np.zeros(n), v=np.zeros(n), t=0)


def adamw_step(theta: np.ndarray, grad: np.ndarray, state: AdamState,
               lr: float, weight_decay: float = 0.0,
               beta1: float = 0.9, beta2: float = 0.999,
               eps: float = 1e-8) -> tuple[np.ndarray, AdamState]:
    """One decoupled-weight-decay Adam update."""
    if theta.shape != grad.shape:
        raise ValueError("theta and gradient shapes differ")
    if not np.all(np.isfinite(grad)):
        bad = int(np.argmin(np.isfinite(grad)))
        raise TrainingError(f"non-finite gradient entry at index {bad}")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    new = theta * (1.0 - lr * weight_decay) - lr * mhat / (np.sqrt(vhat) + eps)
    return new, AdamState(m=m, v=v, t=t)


def lr_sequence(val_losses, lr0: float, factor: float = 0.8,
                patience: int = 2000, min_improve: float = 1e-12) -> np.ndarray:
    """Learning rate after each epoch under the plateau rule.

    The plateau counter resets on each reduction but the best loss is
    kept, so a long flat stretch produces one reduction per patience
    window.
    """
    lr = lr0
    best = np.inf
    since = 0
    out = np.empty(len(val_losses))
    for i, v in enumerate(val_losses):
        if v < best - min_improve:
            best = v
            since = 0
        else:
            since += 1
        if since >= patience:
            lr *= factor
            since = 0
        out[i] = lr
    return out


def reduce_lr_on_plateau(val_losses, lr0: float, factor: float = 0.8,
                         patience: int = 2000, min_improve: float = 1e-12) -> float:
    """Learning rate implied by a validation history (see lr_sequence)."""
    if len(val_losses) == 0:
        raise ValueError("empty history")
    return float(lr_sequence(val_losses, lr0, factor, patience, min_improve)[-1])


def early_stop(val_losses, patience: int = 20000, min_improve: float = 1e-12) -> bool:
    """True when the most recent `patience` epochs brought no new best."""
    if len(val_losses) == 0:
        raise ValueError("empty history")
    best = np.inf
    since = 0
    for v in val_losses:
        if v < best - min_improve:
            best = v
            since = 0
        else:
            since += 1
    return since >= patience


def sample_params(region, n: int, rng: np.random.Generator) -> np.ndarray:
    """n uniform draws from the box given as (lower, upper) arrays."""
    lo = np.atleast_1d(np.asarray(region[0], dtype=np.float64))
    hi = np.atleast_1d(np.asarray(region[1], dtype=np.float64))
    if n < 1:
        raise ValueError("need at least one sample")
    return rng.uniform(lo, hi, size=(n, lo.size))


def _mse_target(dataset, primal_only: bool) -> np.ndarray:
    cols = [np.atleast_2d(dataset.X)]
    if not primal_only:
        cols += [np.atleast_2d(dataset.Lam), np.atleast_2d(dataset.Mu)]
    return np.hstack([c for c in cols if c.size])


def _train(problem: ProblemDef, dataset, cfg: TrainConfig,
           method: str) -> tuple[Network, TrainHistory]:
    if method not in ("optinn", "pmnn"):
        raise ValueError(f"unknown method {method!r}")
    primal_only = method == "pmnn"
    net = network_for(problem, cfg.width, cfg.depth, seed=cfg.seed,
                      primal_only=primal_only,
                      enforce_primal=cfg.pm_enforce_primal if primal_only else True)
    n_theta = n_params(net.sizes)
    M = len(dataset) if dataset is not None else 0

    graph = Graph()
    th = graph.leaf(1, n_theta, name="theta")
    p_tr = graph.leaf(cfg.n_collocation, problem.n_p, name="p_train")
    p_va = graph.leaf(cfg.n_validation, problem.n_p, name="p_val")
    a_leaf = graph.leaf(1, 1, name="alpha")

    term_grads = {}
    w_leaves = {}
    if method == "optinn":
        terms = emit_kkt_terms(graph, net, th, p_tr, problem, cfg.pset)
        w_leaves = {k: graph.leaf(1, 1, name=f"w_{k}") for k in TERM_ORDER}
        l_opt = None
        for k in TERM_ORDER:
            piece = terms[k] * w_leaves[k]
            l_opt = piece if l_opt is None else l_opt + piece
        val_terms = emit_kkt_terms(graph, net, th, p_va, problem, penalty_option(1))
        l_val = None
        for k in TERM_ORDER:
            l_val = val_terms[k] if l_val is None else l_val + val_terms[k]
        for k in TERM_ORDER:
            term_grads[k] = graph.gradient(terms[k], [th])[0]
    else:
        l_opt = emit_pm(graph, net, th, p_tr, problem, cfg.pconfig)
        l_val = emit_pm(graph, net, th, p_va, problem, cfg.pconfig)

    if M > 0:
        p_data = graph.const(np.atleast_2d(dataset.P))
        y_data = graph.const(_mse_target(dataset, primal_only))
        l_mse = emit_mse(graph, net, th, p_data, y_data)
        total = a_leaf * l_opt + (1.0 - a_leaf) * l_mse
    else:
        total = l_opt
    grad_total = graph.gradient(total, [th])[0]

    rng_tr = np.random.default_rng([cfg.seed, 101])
    rng_va = np.random.default_rng([cfg.seed, 202])
    region = (problem.region_lo, problem.region_hi)

    theta = net.theta.copy()
    state = AdamState.zeros(n_theta)
    weights = LossWeights(beta=cfg.balance_beta)
    lr = cfg.lr
    hist = TrainHistory()
    best_theta = theta.copy()
    best = np.inf
    since_plateau = 0
    since_stop = 0

    for epoch in range(cfg.epochs):
        P_tr = sample_params(region, cfg.n_collocation, rng_tr)
        P_va = sample_params(region, cfg.n_validation, rng_va)
        if method == "optinn":
            a = 1.0 if M == 0 else alpha_at(cfg.schedule, epoch)
        else:
            a = 1.0 if M == 0 else cfg.alpha
        bindings = {th: theta[None, :], p_tr: P_tr, p_va: P_va,
                    a_leaf: np.array([[a]])}
        if method == "optinn" and epoch % cfg.balance_every == 0:
            vals = graph.evaluate(bindings, targets=list(term_grads.values()))
            norms = {k: float(np.linalg.norm(vals[term_grads[k].id]))
                     for k in TERM_ORDER}
            weights = balance_weights(norms, beta=cfg.balance_beta)
        for k, leaf in w_leaves.items():
            bindings[leaf] = np.array([[getattr(weights, k)]])
        vals = graph.evaluate(bindings, targets=[total, grad_total, l_val])
        loss = float(np.asarray(vals[total.id]).item())
        val = float(np.asarray(vals[l_val.id]).item())
        g = vals[grad_total.id].ravel()
        if not np.isfinite(loss) or not np.isfinite(val):
            raise TrainingError(
                f"{method} on {problem.name}: non-finite loss at epoch {epoch} "
                f"(train={loss}, val={val}, lr={lr:.3e})")

        hist.epoch.append(epoch)
        hist.train_loss.append(loss)
        hist.val_loss.append(val)
        hist.alpha.append(a)
        hist.lr.append(lr)
        hist.omega_stat.append(weights.stat)
        hist.omega_feasg.append(weights.feas_g)
        hist.omega_feash.append(weights.feas_h)
        hist.omega_csl.append(weights.csl)

        if val < best - cfg.min_improve:
            best = val
            best_theta = theta.copy()
            hist.best_epoch = epoch
            hist.best_val = val
            since_plateau = 0
            since_stop = 0
        else:
            since_plateau += 1
            since_stop += 1
        if since_stop >= cfg.early_stop_patience:
            hist.termination = "early-stop"
            break
        if since_plateau >= cfg.plateau_patience:
            lr *= cfg.plateau_factor
            since_plateau = 0

        try:
            theta, state = adamw_step(theta, g, state, lr, cfg.weight_decay)
        except TrainingError as exc:
            raise TrainingError(
                f"{method} on {problem.name}: {exc} at epoch {epoch} "
                f"(train={loss:.3e}, lr={lr:.3e})") from exc

    if cfg.restore_best and np.isfinite(best):
        theta = best_theta
    return replace(net, theta=theta), hist


def train_optinn(problem: ProblemDef, dataset, cfg: TrainConfig) -> tuple[Network, TrainHistory]:
    """Train the KKT-loss network; dataset may be None or empty (data-free)."""
    return _train(problem, dataset, cfg, "optinn")


def train_pmnn(problem: ProblemDef, dataset, cfg: TrainConfig) -> tuple[Network, TrainHistory]:
    """Train the penalty-method baseline network."""
    return _train(problem, dataset, cfg, "pmnn")
