"""MLP with layer normalization, a split output head and output transforms.

The network maps a parameter vector p to a raw output vector that is
split into primal variables, equality multipliers and inequality
multipliers.  A final transform layer maps raw outputs onto their
admissible ranges: softplus keeps multipliers positive, shifted
softplus enforces one-sided variable bounds, and a scaled sigmoid
enforces box bounds.  All parameters live in one flat vector theta so
the whole model can be differentiated through a single graph leaf.

Flat layout, layer-major: for each hidden layer the weight matrix
(row-major), bias, layer-norm scale, layer-norm shift; for the final
layer weight and bias only.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .autodiff import Graph, NodeRef
from .problems import ProblemDef

__all__ = [
    "Network",
    "n_params",
    "param_slices",
    "output_transforms",
    "init_mlp",
    "network_for",
    "pack",
    "unpack",
    "forward",
    "split_trivialize",
    "trivialize",
    "predict",
    "save_checkpoint",
    "load_checkpoint",
]

LAYER_NORM_EPS = 1e-5

TRANSFORM_KINDS = ("identity", "lower", "upper", "box", "positive")


@dataclass
class Network:
    """Architecture plus one flat parameter vector.

    ``split`` is (n_x, n_h, n_g); a penalty-method network uses
    (n_x, 0, 0).  ``transforms`` holds one spec per output unit, e.g.
    ("identity",), ("lower", 0.0), ("box", -1.0, 1.0), ("positive",).
    """

    sizes: tuple[int, ...]
    split: tuple[int, int, int]
    transforms: tuple[tuple, ...]
    theta: np.ndarray
    seed: int | None = None

    def __post_init__(self):
        if len(self.sizes) < 2:
            raise ValueError("need at least input and output sizes")
        if sum(self.split) != self.sizes[-1]:
            raise ValueError(
                f"output split {self.split} does not sum to layer size {self.sizes[-1]}")
        if len(self.transforms) != self.sizes[-1]:
            raise ValueError("one transform spec per output unit")
        for t in self.transforms:
            if t[0] not in TRANSFORM_KINDS:
                raise ValueError(f"unknown transform {t!r}")
        want = n_params(self.sizes)
        if self.theta.shape != (want,):
            raise ValueError(f"theta has shape {self.theta.shape}, expected ({want},)")


def n_params(sizes) -> int:
    """Number of trainable entries, counted layer by layer."""
    total = 0
    L = len(sizes) - 1
    for l in range(1, L + 1):
        total += sizes[l] * sizes[l - 1] + sizes[l]
        if l < L:
            total += 2 * sizes[l]
    return total


def param_slices(sizes) -> list[tuple[str, int, slice]]:
    """(name, layer, slice) triples describing the flat layout."""
    out = []
    off = 0
    L = len(sizes) - 1
    for l in range(1, L + 1):
        n_w = sizes[l] * sizes[l - 1]
        out.append(("W", l, slice(off, off + n_w)))
        off += n_w
        out.append(("b", l, slice(off, off + sizes[l])))
        off += sizes[l]
        if l < L:
            out.append(("ln_scale", l, slice(off, off + sizes[l])))
            off += sizes[l]
            out.append(("ln_shift", l, slice(off, off + sizes[l])))
            off += sizes[l]
    return out


def output_transforms(problem: ProblemDef, primal_only: bool = False,
                      enforce_primal: bool = True) -> tuple[tuple, ...]:
    """Per-output transform specs for a problem's solution layout.

    Primal entries follow the problem's declared variable bounds,
    equality multipliers are unconstrained and inequality multipliers
    are kept positive.  With ``enforce_primal`` off every primal entry
    is identity, which is how the penalty-method baseline runs.
    """
    specs: list[tuple] = []
    for bnd in problem.bounds:
        if not enforce_primal or bnd[0] == "free":
            specs.append(("identity",))
        elif bnd[0] == "lower":
            specs.append(("lower", float(bnd[1])))
        elif bnd[0] == "upper":
            specs.append(("upper", float(bnd[1])))
        elif bnd[0] == "box":
            specs.append(("box", float(bnd[1]), float(bnd[2])))
        else:
            raise ValueError(f"unknown bound {bnd!r}")
    if not primal_only:
        specs.extend([("identity",)] * problem.n_h)
        specs.extend([("positive",)] * problem.n_g)
    return tuple(specs)


def init_mlp(layer_sizes, output_split, transforms, seed: int = 0,
             input_box=None) -> Network:
    """Fresh network: Kaiming-uniform weights, zero biases, unit norm scale.

    When ``input_box`` = (lo, hi) arrays is given, first-layer biases
    are set to -w.t with anchor points t drawn uniformly from the box,
    which spreads the units' active regions across the whole input
    range.  With zero biases and a wide input box, layer normalization
    would collapse the first layer to a function of the input direction
    only, and training has to relearn the offsets from scratch.
    """
    sizes = tuple(int(s) for s in layer_sizes)
    split = tuple(int(s) for s in output_split)
    theta = np.zeros(n_params(sizes))
    rng = np.random.default_rng(seed)
    for name, l, sl in param_slices(sizes):
        if name == "W":
            bound = np.sqrt(6.0 / sizes[l - 1])
            theta[sl] = rng.uniform(-bound, bound, sl.stop - sl.start)
        elif name == "b" and l == 1 and input_box is not None:
            lo = np.atleast_1d(np.asarray(input_box[0], dtype=np.float64))
            hi = np.atleast_1d(np.asarray(input_box[1], dtype=np.float64))
            W1 = theta[sl.start - sizes[1] * sizes[0]:sl.start].reshape(sizes[1], sizes[0])
            anchors = rng.uniform(lo, hi, size=(sizes[1], sizes[0]))
            theta[sl] = -np.sum(W1 * anchors, axis=1)
        elif name == "ln_scale":
            theta[sl] = 1.0
    return Network(sizes=sizes, split=split,
                   transforms=tuple(tuple(t) for t in transforms),
                   theta=theta, seed=seed)


def network_for(problem: ProblemDef, width: int, depth: int, seed: int = 0,
                primal_only: bool = False, enforce_primal: bool | None = None) -> Network:
    """Problem-shaped network with ``depth`` hidden layers of ``width`` units."""
    if enforce_primal is None:
        enforce_primal = not primal_only
    n_out = problem.n_x if primal_only else problem.n_x + problem.n_h + problem.n_g
    sizes = (problem.n_p,) + (width,) * depth + (n_out,)
    split = (problem.n_x, 0, 0) if primal_only else (problem.n_x, problem.n_h, problem.n_g)
    specs = output_transforms(problem, primal_only=primal_only,
                              enforce_primal=enforce_primal)
    return init_mlp(sizes, split, specs, seed=seed,
                    input_box=(problem.region_lo, problem.region_hi))


def unpack(net: Network) -> list[dict]:
    """Per-layer views of theta as shaped arrays (copies)."""
    sizes = net.sizes
    out: list[dict] = [dict() for _ in range(len(sizes) - 1)]
    for name, l, sl in param_slices(sizes):
        v = net.theta[sl].copy()
        if name == "W":
            v = v.reshape(sizes[l], sizes[l - 1])
        out[l - 1][name] = v
    return out


def pack(layers: list[dict], sizes) -> np.ndarray:
    """Inverse of :func:`unpack`."""
    theta = np.zeros(n_params(sizes))
    for name, l, sl in param_slices(sizes):
        v = np.asarray(layers[l - 1][name], dtype=np.float64)
        if v.size != sl.stop - sl.start:
            raise ValueError(f"layer {l} field {name}: size {v.size}, "
                             f"expected {sl.stop - sl.start}")
        theta[sl] = v.ravel()
    return theta


def _layer_norm(graph: Graph, z: NodeRef, width: int) -> NodeRef:
    m = z.sum() / float(width)
    c = z - m
    v = (c * c).sum() / float(width)
    return c / graph.build("sqrt", [v + LAYER_NORM_EPS])


def forward(graph: Graph, net: Network, theta: NodeRef, p: NodeRef) -> NodeRef:
    """Emit the raw (pre-transform) MLP output for parameter batch p.

    ``theta`` is a (1, n_theta) leaf so the same graph serves training
    (gradients in theta) and plain prediction.
    """
    sizes = net.sizes
    L = len(sizes) - 1
    parts = {(name, l): theta[sl] for name, l, sl in param_slices(sizes)}
    nu = p
    for l in range(1, L + 1):
        z = graph.build("matvec", [parts["W", l], nu],
                        m=sizes[l], n=sizes[l - 1]) + parts["b", l]
        if l < L:
            norm = _layer_norm(graph, z, sizes[l])
            z = graph.build("relu", [norm * parts["ln_scale", l] + parts["ln_shift", l]])
        nu = z
    return nu


def _transform_runs(transforms) -> list[tuple[tuple, int, int]]:
    runs = []
    start = 0
    for j in range(1, len(transforms) + 1):
        if j == len(transforms) or transforms[j] != transforms[start]:
            runs.append((transforms[start], start, j))
            start = j
    return runs


def _emit_transform(graph: Graph, spec: tuple, piece: NodeRef) -> NodeRef:
    kind = spec[0]
    if kind == "identity":
        return piece
    if kind == "lower":
        return spec[1] + graph.build("softplus", [piece])
    if kind == "upper":
        return spec[1] - graph.build("softplus", [piece])
    if kind == "box":
        lo, hi = spec[1], spec[2]
        return lo + (hi - lo) * graph.build("sigmoid", [piece])
    if kind == "positive":
        return graph.build("softplus", [piece])
    raise ValueError(f"unknown transform {spec!r}")


def split_trivialize(graph: Graph, net: Network, raw: NodeRef):
    """Apply the output transforms and split into (x, lam, mu) nodes.

    Absent blocks (n_h or n_g zero) come back as None.
    """
    runs = _transform_runs(net.transforms)
    segs = [_emit_transform(graph, spec, raw[a:b]) for spec, a, b in runs]
    y = segs[0] if len(segs) == 1 else graph.build("concat", segs)
    n_x, n_h, n_g = net.split
    x = y[0:n_x]
    lam = y[n_x:n_x + n_h] if n_h else None
    mu = y[n_x + n_h:n_x + n_h + n_g] if n_g else None
    return x, lam, mu


def _softplus_np(v: np.ndarray) -> np.ndarray:
    """Overflow-safe softplus; indirection point for fault-injection tests."""
    return np.logaddexp(0.0, v)


def trivialize(net: Network, raw: np.ndarray):
    """Numeric twin of :func:`split_trivialize` for plain arrays.

    Accepts one raw output vector or a batch of them; returns
    (x, lam, mu) arrays with the same leading shape.
    """
    raw = np.asarray(raw, dtype=np.float64)
    single = raw.ndim == 1
    R = np.atleast_2d(raw)
    if R.shape[1] != net.sizes[-1]:
        raise ValueError(f"raw has {R.shape[1]} entries, expected {net.sizes[-1]}")
    out = np.empty_like(R)
    for spec, a, b in _transform_runs(net.transforms):
        kind = spec[0]
        v = R[:, a:b]
        if kind == "identity":
            out[:, a:b] = v
        elif kind == "lower":
            out[:, a:b] = spec[1] + _softplus_np(v)
        elif kind == "upper":
            out[:, a:b] = spec[1] - _softplus_np(v)
        elif kind == "box":
            out[:, a:b] = spec[1] + (spec[2] - spec[1]) * expit(v)
        elif kind == "positive":
            out[:, a:b] = _softplus_np(v)
    n_x, n_h, n_g = net.split
    x = out[:, 0:n_x]
    lam = out[:, n_x:n_x + n_h]
    mu = out[:, n_x + n_h:]
    if single:
        return x[0], lam[0], mu[0]
    return x, lam, mu


_fwd_cache: dict[tuple, tuple] = {}


def _forward_graph(net: Network, batch: int):
    key = (net.sizes, net.split, net.transforms, batch)
    hit = _fwd_cache.get(key)
    if hit is None:
        graph = Graph()
        theta = graph.leaf(1, n_params(net.sizes), name="theta")
        p = graph.leaf(batch, net.sizes[0], name="p")
        raw = forward(graph, net, theta, p)
        hit = (graph, theta, p, raw)
        _fwd_cache[key] = hit
    return hit


def predict(net: Network, P: np.ndarray, theta: np.ndarray | None = None):
    """Trivialized network output on a parameter batch.

    Returns (x, lam, mu) arrays of shape (B, n); lam and mu have zero
    columns when the head omits them.
    """
    P = np.atleast_2d(np.asarray(P, dtype=np.float64))
    th = net.theta if theta is None else np.asarray(theta, dtype=np.float64)
    graph, t_leaf, p_leaf, raw = _forward_graph(net, P.shape[0])
    vals = graph.evaluate({t_leaf: th.reshape(1, -1), p_leaf: P}, targets=[raw])
    return trivialize(net, vals[raw.id])


def save_checkpoint(net: Network, path) -> Path:
    """Write theta plus a JSON sidecar describing the architecture."""
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".json", ".npy") else path
    np.save(base.with_suffix(".npy"), net.theta)
    meta = {
        "sizes": list(net.sizes),
        "split": list(net.split),
        "transforms": [list(t) for t in net.transforms],
        "seed": net.seed,
        "theta_file": base.with_suffix(".npy").name,
        "n_params": int(net.theta.size),
    }
    base.with_suffix(".json").write_text(json.dumps(meta, indent=1))
    return base.with_suffix(".json")


def load_checkpoint(path) -> Network:
    path = Path(path)
    base = path.with_suffix("") if path.suffix in (".json", ".npy") else path
    meta = json.loads(base.with_suffix(".json").read_text())
    theta = np.load(base.parent / meta["theta_file"])
    return Network(sizes=tuple(meta["sizes"]), split=tuple(meta["split"]),
                   transforms=tuple(tuple(t) for t in meta["transforms"]),
                   theta=theta, seed=meta.get("seed"))
