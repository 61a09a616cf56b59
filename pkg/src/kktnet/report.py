"""Figure rendering for the command line.

Everything here takes already-computed evaluation data and writes PNG
files next to the CSV output.  Nothing in this module recomputes
metrics; it is presentation only.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .evaluate import EvalReport
from .training import TrainHistory

__all__ = [
    "render_training",
    "render_solution",
    "render_cost",
    "render_violation",
    "render_all",
]

_COLORS = {"optinn": "tab:blue", "pmnn": "tab:orange"}


def _axis_values(P: np.ndarray) -> tuple[np.ndarray, str]:
    """x-axis for grid plots: the parameter when scalar, else the index."""
    if P.shape[1] == 1:
        return P[:, 0], "parameter p"
    return np.arange(P.shape[0], dtype=float), "grid point"


def render_training(histories: dict, path) -> Path:
    """Validation-loss curves, one line per seed per method."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for (method, seed), hist in sorted(histories.items()):
        epochs = np.asarray(hist.epoch)
        val = np.asarray(hist.val_loss)
        ax.semilogy(epochs, val, color=_COLORS.get(method, "gray"),
                    alpha=0.7, lw=1.0,
                    label=f"{method} seed {seed}")
    ax.set_xlabel("epoch")
    ax.set_ylabel("validation loss")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def _band(ax, x, rows: list[np.ndarray], color, label):
    A = np.stack(rows)
    mid = np.median(A, axis=0)
    ax.fill_between(x, A.min(axis=0), A.max(axis=0), color=color, alpha=0.2)
    ax.plot(x, mid, color=color, lw=1.4, label=label)


def render_cost(reports: dict, path) -> Path:
    """Predicted objective value across the grid, seed band per method."""
    path = Path(path)
    fig, ax = plt.subplots(figsize=(7, 4.5))
    x = None
    for method, reps in sorted(reports.items()):
        x, xlabel = _axis_values(reps[0].P)
        _band(ax, x, [r.pred_cost for r in reps], _COLORS.get(method, "gray"),
              f"{method} predicted cost")
    first = next(iter(reports.values()))[0]
    if first.oracle_cost is not None:
        ax.plot(x, first.oracle_cost, "k--", lw=1.2, label="solver cost")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("objective value")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def render_violation(reports: dict, path) -> Path:
    """Per-point constraint violation (L1), log scale, seed band per method."""
    path = Path(path)
    first = next(iter(reports.values()))[0]
    has_eq = first.eq_l1.any() or any(r.eq_l1.any()
                                      for rs in reports.values() for r in rs)
    fig, axes = plt.subplots(1, 2 if has_eq else 1,
                             figsize=(10 if has_eq else 7, 4.2), squeeze=False)
    floor = 1e-16
    col = 0
    if has_eq:
        ax = axes[0][col]
        for method, reps in sorted(reports.items()):
            x, xlabel = _axis_values(reps[0].P)
            _band(ax, x, [np.maximum(r.eq_l1, floor) for r in reps],
                  _COLORS.get(method, "gray"), method)
        ax.set_yscale("log")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("equality violation (L1)")
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(fontsize=9)
        col += 1
    ax = axes[0][col]
    for method, reps in sorted(reports.items()):
        x, xlabel = _axis_values(reps[0].P)
        _band(ax, x, [np.maximum(r.ineq_l1, floor) for r in reps],
              _COLORS.get(method, "gray"), method)
    ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("inequality violation (L1)")
    ax.grid(True, which="both", alpha=0.3)
    ax.legend(fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def render_solution(reports: dict, path, train_P: np.ndarray | None = None,
                    max_coords: int = 4) -> Path | None:
    """Predicted primal coordinates against the reference curves.

    Only drawn for problems with a scalar parameter and a small primal
    vector; returns None otherwise.
    """
    first = next(iter(reports.values()))[0]
    if first.P.shape[1] != 1 or first.x_ref is None:
        return None
    n_show = min(first.x_pred.shape[1], max_coords)
    path = Path(path)
    fig, axes = plt.subplots(n_show, 1, figsize=(7, 2.6 * n_show),
                             sharex=True, squeeze=False)
    x = first.P[:, 0]
    for i in range(n_show):
        ax = axes[i][0]
        for method, reps in sorted(reports.items()):
            _band(ax, x, [r.x_pred[:, i] for r in reps],
                  _COLORS.get(method, "gray"), method)
        ax.plot(x, first.x_ref[:, i], "k--", lw=1.2, label="solver")
        if train_P is not None:
            for tp in np.atleast_2d(train_P)[:, 0]:
                ax.axvline(tp, color="gray", lw=0.6, alpha=0.5)
        ax.set_ylabel(f"x[{i}]")
        ax.grid(True, alpha=0.3)
        if i == 0:
            ax.legend(fontsize=9)
    axes[-1][0].set_xlabel("parameter p")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def render_all(problem_name: str, reports: dict, out_dir,
               histories: dict | None = None,
               train_P: np.ndarray | None = None) -> list[Path]:
    """Write the full figure set for one problem; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    written.append(render_cost(reports, out / f"{problem_name}_cost.png"))
    written.append(render_violation(reports, out / f"{problem_name}_violation.png"))
    sol = render_solution(reports, out / f"{problem_name}_solution.png", train_P)
    if sol is not None:
        written.append(sol)
    if histories:
        written.append(render_training(histories, out / f"{problem_name}_training.png"))
    return written
