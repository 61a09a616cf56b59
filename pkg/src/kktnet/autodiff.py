"""Graph based reverse-mode automatic differentiation.

Values flowing through the graph are dense float64 arrays of shape
``(b, n)`` where ``b`` is a batch dimension (independent lanes) and
``n`` is the feature length.  A scalar is ``(1, 1)``.  Binary
elementwise operations broadcast along either axis numpy-style, with
the usual restriction that mismatched extents are only allowed when
one of them is 1.

``Graph.gradient`` does not compute numbers.  It walks the recorded
operations in reverse and appends the adjoint computation as new nodes
to the same graph, so the result of a gradient is itself
differentiable.  That property is what makes second order terms (for
example the parameter gradient of a stationarity residual, which is
already a gradient) work with a single mechanism.

Matrices are represented as flattened row-major vectors carried by the
``matvec`` / ``matvec_t`` / ``outer`` opcodes together with their
``(m, n)`` shape, which keeps the value model two-dimensional while
staying closed under differentiation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Graph",
    "NodeRef",
    "GraphError",
    "check_gradient_fd",
]


class GraphError(ValueError):
    """Raised for malformed graph construction or evaluation requests."""


# Opcode table.  The integer codes are an implementation detail of the
# evaluator; the public interface uses the names.
_OPS = [
    "const", "leaf",
    "add", "sub", "mul", "div",
    "neg", "sin", "cos", "exp", "ln", "sqrt", "square",
    "abs", "relu", "softplus", "sigmoid", "sign", "step",
    "sum", "bsum", "dot",
    "matvec", "matvec_t", "outer",
    "slice", "pad", "concat",
]
_CODE = {name: i for i, name in enumerate(_OPS)}

_UNARY = {"neg", "sin", "cos", "exp", "ln", "sqrt", "square",
          "abs", "relu", "softplus", "sigmoid", "sign", "step"}
_BINARY = {"add", "sub", "mul", "div"}


@dataclass(frozen=True)
class NodeRef:
    """Handle to one node of a :class:`Graph`.

    Supports arithmetic operators (python numbers are lifted to const
    nodes) so expression building reads like plain numpy code.
    """

    graph: "Graph"
    id: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.graph._shapes[self.id]

    def _lift(self, other) -> "NodeRef":
        if isinstance(other, NodeRef):
            if other.graph is not self.graph:
                raise GraphError("operands belong to different graphs")
            return other
        return self.graph.const(other)

    def __add__(self, other):
        return self.graph.build("add", [self, self._lift(other)])

    def __radd__(self, other):
        return self._lift(other).__add__(self)

    def __sub__(self, other):
        return self.graph.build("sub", [self, self._lift(other)])

    def __rsub__(self, other):
        return self._lift(other).__sub__(self)

    def __mul__(self, other):
        return self.graph.build("mul", [self, self._lift(other)])

    def __rmul__(self, other):
        return self._lift(other).__mul__(self)

    def __truediv__(self, other):
        return self.graph.build("div", [self, self._lift(other)])

    def __rtruediv__(self, other):
        return self._lift(other).__truediv__(self)

    def __neg__(self):
        return self.graph.build("neg", [self])

    def __getitem__(self, key) -> "NodeRef":
        if not isinstance(key, slice):
            key = slice(key, key + 1)
        start, stop, step = key.indices(self.shape[1])
        return self.graph.build("slice", [self], start=start, stop=stop, step=step)

    def sum(self) -> "NodeRef":
        return self.graph.build("sum", [self])


def _slice_len(start: int, stop: int, step: int) -> int:
    return len(range(start, stop, step))


class Graph:
    """Append-only operation tape with shape-checked construction."""

    def __init__(self) -> None:
        self._ops: list[int] = []
        self._inputs: list[tuple[int, ...]] = []
        self._attrs: list[tuple] = []
        self._shapes: list[tuple[int, int]] = []
        self._consts: dict[int, np.ndarray] = {}
        self._leaf_names: dict[int, str] = {}
        # evaluation plans keyed by target ids, invalidated on append
        self._plan_cache: dict[tuple[int, ...], np.ndarray] = {}

    def __len__(self) -> int:
        return len(self._ops)

    # ----- construction -------------------------------------------------

    def _append(self, op: str, inputs: tuple[int, ...], shape: tuple[int, int],
                attrs: tuple = ()) -> NodeRef:
        self._ops.append(_CODE[op])
        self._inputs.append(inputs)
        self._attrs.append(attrs)
        self._shapes.append(shape)
        self._plan_cache.clear()
        return NodeRef(self, len(self._ops) - 1)

    def leaf(self, b: int = 1, n: int = 1, name: str = "") -> NodeRef:
        """Declare an input node of shape ``(b, n)``."""
        if b < 1 or n < 1:
            raise GraphError(f"leaf shape must be positive, got ({b}, {n})")
        ref = self._append("leaf", (), (int(b), int(n)))
        if name:
            self._leaf_names[ref.id] = name
        return ref

    def const(self, value) -> NodeRef:
        """Record a constant.  Scalars, 1-d and 2-d arrays are accepted."""
        arr = np.asarray(value, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise GraphError(f"const must be at most 2-d, got ndim={arr.ndim}")
        ref = self._append("const", (), arr.shape)
        self._consts[ref.id] = arr
        return ref

    def _bcast(self, a: tuple[int, int], b: tuple[int, int],
               op: str) -> tuple[int, int]:
        out = []
        for x, y in zip(a, b):
            if x == y or y == 1:
                out.append(x)
            elif x == 1:
                out.append(y)
            else:
                raise GraphError(f"{op}: shapes {a} and {b} do not broadcast")
        return tuple(out)

    def build(self, opcode: str, inputs: Sequence[NodeRef], **attrs) -> NodeRef:
        """Append one operation and return a handle to it.

        Shape errors (arity, dimension mismatch) are raised here, not at
        evaluation time.
        """
        if opcode not in _CODE or opcode in ("const", "leaf"):
            raise GraphError(f"unknown opcode {opcode!r}")
        ids = []
        for ref in inputs:
            if not isinstance(ref, NodeRef) or ref.graph is not self:
                raise GraphError("inputs must be NodeRefs of this graph")
            ids.append(ref.id)
        shapes = [self._shapes[i] for i in ids]

        def need(k: int):
            if len(ids) != k:
                raise GraphError(f"{opcode} takes {k} inputs, got {len(ids)}")

        if opcode in _UNARY:
            need(1)
            return self._append(opcode, tuple(ids), shapes[0])
        if opcode in _BINARY:
            need(2)
            return self._append(opcode, tuple(ids), self._bcast(shapes[0], shapes[1], opcode))
        if opcode == "sum":
            need(1)
            return self._append(opcode, tuple(ids), (shapes[0][0], 1))
        if opcode == "bsum":
            need(1)
            return self._append(opcode, tuple(ids), (1, shapes[0][1]))
        if opcode == "dot":
            need(2)
            b, _ = self._bcast(shapes[0], shapes[1], opcode)
            return self._append(opcode, tuple(ids), (b, 1))
        if opcode == "matvec":
            need(2)
            m, n = int(attrs["m"]), int(attrs["n"])
            (bw, lw), (bv, lv) = shapes
            if lw != m * n or lv != n:
                raise GraphError(f"matvec({m},{n}): got w len {lw}, v len {lv}")
            b = self._bcast((bw, 1), (bv, 1), opcode)[0]
            return self._append(opcode, tuple(ids), (b, m), (m, n))
        if opcode == "matvec_t":
            need(2)
            m, n = int(attrs["m"]), int(attrs["n"])
            (bw, lw), (by, ly) = shapes
            if lw != m * n or ly != m:
                raise GraphError(f"matvec_t({m},{n}): got w len {lw}, y len {ly}")
            b = self._bcast((bw, 1), (by, 1), opcode)[0]
            return self._append(opcode, tuple(ids), (b, n), (m, n))
        if opcode == "outer":
            need(2)
            (ba, m), (bb, n) = shapes
            b = self._bcast((ba, 1), (bb, 1), opcode)[0]
            return self._append(opcode, tuple(ids), (b, m * n), (m, n))
        if opcode == "slice":
            need(1)
            start, stop, step = int(attrs["start"]), int(attrs["stop"]), int(attrs.get("step", 1))
            if step < 1 or start < 0 or stop > shapes[0][1] or start > stop:
                raise GraphError(f"slice({start},{stop},{step}) out of range for n={shapes[0][1]}")
            ln = _slice_len(start, stop, step)
            if ln < 1:
                raise GraphError("empty slice")
            return self._append(opcode, tuple(ids), (shapes[0][0], ln), (start, stop, step))
        if opcode == "pad":
            need(1)
            start, stop, step = int(attrs["start"]), int(attrs["stop"]), int(attrs.get("step", 1))
            out_len = int(attrs["out_len"])
            if stop > out_len or _slice_len(start, stop, step) != shapes[0][1]:
                raise GraphError("pad: window does not match input length")
            return self._append(opcode, tuple(ids), (shapes[0][0], out_len),
                                (start, stop, step, out_len))
        if opcode == "concat":
            if not ids:
                raise GraphError("concat needs at least one input")
            b = shapes[0][0]
            for s in shapes[1:]:
                b = self._bcast((b, 1), (s[0], 1), opcode)[0]
            n = sum(s[1] for s in shapes)
            return self._append(opcode, tuple(ids), (b, n))
        raise GraphError(f"unhandled opcode {opcode!r}")  # pragma: no cover

    # ----- evaluation ---------------------------------------------------

    def _plan(self, targets: tuple[int, ...]) -> np.ndarray:
        """Ids to execute, in order, to cover the requested targets."""
        plan = self._plan_cache.get(targets)
        if plan is not None:
            return plan
        needed = np.zeros(len(self._ops), dtype=bool)
        stack = list(targets)
        while stack:
            i = stack.pop()
            if needed[i]:
                continue
            needed[i] = True
            stack.extend(self._inputs[i])
        plan = np.nonzero(needed)[0]
        self._plan_cache[targets] = plan
        return plan

    def evaluate(self, leaf_values: dict, targets: Iterable[NodeRef] | None = None) -> list:
        """Forward pass.  Returns the list of node values (None where skipped).

        ``leaf_values`` maps leaf NodeRefs (or ids) to arrays of the
        declared shape.  With ``targets`` given, only ancestors of the
        targets are computed.  Evaluation never mutates recorded state,
        so repeated calls with the same inputs give identical results.
        """
        vals: list = [None] * len(self._ops)
        supplied = {}
        for key, v in leaf_values.items():
            i = key.id if isinstance(key, NodeRef) else int(key)
            supplied[i] = v
        if targets is None:
            plan = range(len(self._ops))
        else:
            plan = self._plan(tuple(t.id for t in targets))

        ops, inputs, attrs, shapes = self._ops, self._inputs, self._attrs, self._shapes
        C = _CODE
        c_leaf, c_const = C["leaf"], C["const"]
        c_add, c_sub, c_mul, c_div, c_neg = C["add"], C["sub"], C["mul"], C["div"], C["neg"]
        c_sin, c_cos, c_exp, c_ln, c_sqrt = C["sin"], C["cos"], C["exp"], C["ln"], C["sqrt"]
        c_square, c_abs, c_relu = C["square"], C["abs"], C["relu"]
        c_softplus, c_sigmoid, c_sign, c_step = C["softplus"], C["sigmoid"], C["sign"], C["step"]
        c_sum, c_bsum, c_dot = C["sum"], C["bsum"], C["dot"]
        c_matvec, c_matvec_t, c_outer = C["matvec"], C["matvec_t"], C["outer"]
        c_slice, c_pad, c_concat = C["slice"], C["pad"], C["concat"]

        for i in plan:
            op = ops[i]
            if op == c_leaf:
                if i not in supplied:
                    name = self._leaf_names.get(i, "")
                    raise GraphError(f"missing value for leaf {i} {name!r}")
                v = np.asarray(supplied[i], dtype=np.float64)
                if v.ndim == 0:
                    v = v.reshape(1, 1)
                elif v.ndim == 1:
                    v = v.reshape(1, -1)
                if v.shape != shapes[i]:
                    raise GraphError(
                        f"leaf {i} expects shape {shapes[i]}, got {v.shape}")
                vals[i] = v
                continue
            if op == c_const:
                vals[i] = self._consts[i]
                continue
            ins = inputs[i]
            a = vals[ins[0]]
            if op == c_add:
                vals[i] = a + vals[ins[1]]
            elif op == c_sub:
                vals[i] = a - vals[ins[1]]
            elif op == c_mul:
                vals[i] = a * vals[ins[1]]
            elif op == c_div:
                vals[i] = a / vals[ins[1]]
            elif op == c_neg:
                vals[i] = -a
            elif op == c_matvec:
                m, n = attrs[i]
                v = vals[ins[1]]
                if a.shape[0] == 1:
                    vals[i] = v @ a.reshape(m, n).T
                else:
                    W = a.reshape(-1, m, n)
                    vb = np.broadcast_to(v, (W.shape[0], n))
                    vals[i] = np.einsum("bmn,bn->bm", W, vb)
            elif op == c_matvec_t:
                m, n = attrs[i]
                w, y = a, vals[ins[1]]
                if w.shape[0] == 1:
                    vals[i] = y @ w.reshape(m, n)
                else:
                    W = w.reshape(-1, m, n)
                    yb = np.broadcast_to(y, (W.shape[0], m))
                    vals[i] = np.einsum("bmn,bm->bn", W, yb)
            elif op == c_sum:
                vals[i] = a.sum(axis=1, keepdims=True)
            elif op == c_bsum:
                vals[i] = a.sum(axis=0, keepdims=True)
            elif op == c_dot:
                vals[i] = (a * vals[ins[1]]).sum(axis=1, keepdims=True)
            elif op == c_slice:
                s, e, st = attrs[i]
                vals[i] = a[:, s:e:st]
            elif op == c_pad:
                s, e, st, out_len = attrs[i]
                out = np.zeros((a.shape[0], out_len))
                out[:, s:e:st] = a
                vals[i] = out
            elif op == c_concat:
                parts = [vals[j] for j in ins]
                b = max(p.shape[0] for p in parts)
                if b > 1:
                    parts = [np.broadcast_to(p, (b, p.shape[1])) for p in parts]
                vals[i] = np.concatenate(parts, axis=1)
            elif op == c_relu:
                vals[i] = np.maximum(a, 0.0)
            elif op == c_square:
                vals[i] = a * a
            elif op == c_abs:
                vals[i] = np.abs(a)
            elif op == c_softplus:
                vals[i] = np.logaddexp(0.0, a)
            elif op == c_sigmoid:
                vals[i] = expit(a)
            elif op == c_sign:
                vals[i] = np.sign(a)
            elif op == c_step:
                vals[i] = (a > 0.0).astype(np.float64)
            elif op == c_outer:
                m, n = attrs[i]
                b2 = vals[ins[1]]
                vals[i] = (a[:, :, None] * b2[:, None, :]).reshape(-1, m * n)
            elif op == c_sin:
                vals[i] = np.sin(a)
            elif op == c_cos:
                vals[i] = np.cos(a)
            elif op == c_exp:
                vals[i] = np.exp(a)
            elif op == c_ln:
                if np.any(a <= 0.0):
                    raise GraphError(f"ln of non-positive value at node {i}")
                vals[i] = np.log(a)
            elif op == c_sqrt:
                if np.any(a < 0.0):
                    raise GraphError(f"sqrt of negative value at node {i}")
                vals[i] = np.sqrt(a)
            else:  # pragma: no cover
                raise GraphError(f"cannot evaluate opcode {_OPS[op]}")
        return vals

    def value(self, node: NodeRef, leaf_values: dict) -> np.ndarray:
        """Evaluate just one node."""
        return self.evaluate(leaf_values, targets=[node])[node.id]

    # ----- differentiation ----------------------------------------------

    def _unbroadcast(self, contrib: NodeRef, shape: tuple[int, int]) -> NodeRef:
        cb, cn = contrib.shape
        if cn > 1 and shape[1] == 1:
            contrib = self.build("sum", [contrib])
        if cb > 1 and shape[0] == 1:
            contrib = self.build("bsum", [contrib])
        return contrib

    def gradient(self, output: NodeRef, wrt: Sequence[NodeRef],
                 stop: Sequence[NodeRef] | None = None) -> list[NodeRef]:
        """Append the reverse pass for ``output`` and return adjoint nodes.

        ``output`` must have feature length 1.  A batched output (shape
        ``(b, 1)``) is treated as b independent scalars, each seeded
        with 1; the adjoint of a node then carries one lane per output
        lane, which is how Jacobians and Hessians are assembled here.
        The returned nodes line up with ``wrt``; entries with no path
        to the output are zero constants of the matching shape.

        Nodes listed in ``stop`` receive their adjoint but the pass does
        not descend into their inputs, which avoids emitting dead
        adjoint code when only the adjoint at those nodes is wanted.
        Adjoints of nodes upstream of a stop node are then incomplete,
        so ``wrt`` entries must not lie strictly below a stop node.
        """
        if output.graph is not self:
            raise GraphError("output is not a node of this graph")
        if output.shape[1] != 1:
            raise GraphError(f"gradient needs feature length 1, got {output.shape}")
        for r in wrt:
            if r.graph is not self:
                raise GraphError("wrt nodes must belong to this graph")
        stop_ids = {r.id for r in stop} if stop else set()

        order = self._plan((output.id,))
        in_scope = set(int(i) for i in order)
        adj: dict[int, NodeRef] = {output.id: self.const(1.0)}

        def accumulate(node_id: int, contrib: NodeRef) -> None:
            contrib = self._unbroadcast(contrib, self._shapes[node_id])
            if node_id in adj:
                adj[node_id] = self.build("add", [adj[node_id], contrib])
            else:
                adj[node_id] = contrib

        for i in reversed(order):
            i = int(i)
            if i not in adj or i in stop_ids:
                continue
            a_bar = adj[i]
            op = _OPS[self._ops[i]]
            ins = self._inputs[i]
            if op in ("leaf", "const", "sign", "step"):
                continue
            refs = [NodeRef(self, j) for j in ins]
            node = NodeRef(self, i)
            if op == "add":
                accumulate(ins[0], a_bar)
                accumulate(ins[1], a_bar)
            elif op == "sub":
                accumulate(ins[0], a_bar)
                accumulate(ins[1], self.build("neg", [a_bar]))
            elif op == "mul":
                accumulate(ins[0], self.build("mul", [a_bar, refs[1]]))
                accumulate(ins[1], self.build("mul", [a_bar, refs[0]]))
            elif op == "div":
                accumulate(ins[0], self.build("div", [a_bar, refs[1]]))
                # d(a/b)/db = -(a/b)/b
                accumulate(ins[1], self.build("neg", [
                    self.build("div", [self.build("mul", [a_bar, node]), refs[1]])]))
            elif op == "neg":
                accumulate(ins[0], self.build("neg", [a_bar]))
            elif op == "sin":
                accumulate(ins[0], self.build("mul", [a_bar, self.build("cos", refs)]))
            elif op == "cos":
                accumulate(ins[0], self.build("neg", [
                    self.build("mul", [a_bar, self.build("sin", refs)])]))
            elif op == "exp":
                accumulate(ins[0], self.build("mul", [a_bar, node]))
            elif op == "ln":
                accumulate(ins[0], self.build("div", [a_bar, refs[0]]))
            elif op == "sqrt":
                half = self.const(0.5)
                accumulate(ins[0], self.build("div", [
                    self.build("mul", [a_bar, half]), node]))
            elif op == "square":
                two = self.const(2.0)
                accumulate(ins[0], self.build("mul", [
                    a_bar, self.build("mul", [two, refs[0]])]))
            elif op == "abs":
                accumulate(ins[0], self.build("mul", [a_bar, self.build("sign", refs)]))
            elif op == "relu":
                accumulate(ins[0], self.build("mul", [a_bar, self.build("step", refs)]))
            elif op == "softplus":
                accumulate(ins[0], self.build("mul", [a_bar, self.build("sigmoid", refs)]))
            elif op == "sigmoid":
                one = self.const(1.0)
                accumulate(ins[0], self.build("mul", [a_bar, self.build("mul", [
                    node, self.build("sub", [one, node])])]))
            elif op == "sum":
                ones = self.const(np.ones((1, self._shapes[ins[0]][1])))
                accumulate(ins[0], self.build("mul", [a_bar, ones]))
            elif op == "bsum":
                ones = self.const(np.ones((self._shapes[ins[0]][0], 1)))
                accumulate(ins[0], self.build("mul", [a_bar, ones]))
            elif op == "dot":
                accumulate(ins[0], self.build("mul", [a_bar, refs[1]]))
                accumulate(ins[1], self.build("mul", [a_bar, refs[0]]))
            elif op == "matvec":
                m, n = self._attrs[i]
                accumulate(ins[0], self.build("outer", [a_bar, refs[1]]))
                accumulate(ins[1], self.build("matvec_t", [refs[0], a_bar], m=m, n=n))
            elif op == "matvec_t":
                m, n = self._attrs[i]
                accumulate(ins[0], self.build("outer", [refs[1], a_bar]))
                accumulate(ins[1], self.build("matvec", [refs[0], a_bar], m=m, n=n))
            elif op == "outer":
                m, n = self._attrs[i]
                accumulate(ins[0], self.build("matvec", [a_bar, refs[1]], m=m, n=n))
                accumulate(ins[1], self.build("matvec_t", [a_bar, refs[0]], m=m, n=n))
            elif op == "slice":
                s, e, st = self._attrs[i]
                accumulate(ins[0], self.build(
                    "pad", [a_bar], start=s, stop=e, step=st,
                    out_len=self._shapes[ins[0]][1]))
            elif op == "pad":
                s, e, st, _ = self._attrs[i]
                accumulate(ins[0], self.build("slice", [a_bar], start=s, stop=e, step=st))
            elif op == "concat":
                off = 0
                for j in ins:
                    nj = self._shapes[j][1]
                    accumulate(j, self.build("slice", [a_bar],
                                             start=off, stop=off + nj, step=1))
                    off += nj
            else:  # pragma: no cover
                raise GraphError(f"no derivative rule for {op}")

        out = []
        for r in wrt:
            if r.id in adj and r.id in in_scope:
                out.append(adj[r.id])
            else:
                out.append(self.const(np.zeros(self._shapes[r.id])))
        return out


def check_gradient_fd(graph: Graph, output: NodeRef, wrt: Sequence[NodeRef],
                      leaf_values: dict, h: float = 1e-6) -> float:
    """Compare AD gradients of ``output`` against central finite differences.

    ``output`` may be any feature-length-1 node of the graph (so the
    value being differenced can itself be an AD gradient, which is how
    second order emissions are checked).  ``wrt`` must be leaves, since
    those are what can be perturbed.  Returns the maximum relative
    error ``|ad - fd| / max(1, |fd|)`` over all coordinates.
    """
    if output.shape != (1, 1):
        raise GraphError("check_gradient_fd expects an unbatched scalar output")
    for r in wrt:
        if _OPS[graph._ops[r.id]] != "leaf":
            raise GraphError("finite differences can only perturb leaves")
    grads = graph.gradient(output, wrt)
    vals = graph.evaluate(leaf_values, targets=grads)
    base = {(k.id if isinstance(k, NodeRef) else int(k)): np.array(v, dtype=np.float64)
            for k, v in leaf_values.items()}

    worst = 0.0
    for r, gnode in zip(wrt, grads):
        ad = vals[gnode.id]
        v0 = base[r.id].reshape(graph._shapes[r.id])
        fd = np.zeros_like(v0)
        for idx in np.ndindex(v0.shape):
            vp = v0.copy()
            vp[idx] += h
            vm = v0.copy()
            vm[idx] -= h
            up = dict(base)
            up[r.id] = vp
            fp = graph.value(output, up)[0, 0]
            up[r.id] = vm
            fm = graph.value(output, up)[0, 0]
            fd[idx] = (fp - fm) / (2.0 * h)
        err = np.abs(ad - fd) / np.maximum(1.0, np.abs(fd))
        worst = max(worst, float(err.max()))
    return worst
