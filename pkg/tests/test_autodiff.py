"""Graph construction, evaluation and differentiation."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kktnet.autodiff import Graph, GraphError, check_gradient_fd
from scipy.special import expit


def test_elementwise_values_match_numpy():
    g = Graph()
    x = g.leaf(2, 3, "x")
    X = np.array([[0.3, -1.2, 2.0], [1.5, 0.0, -0.7]])
    cases = {
        g.build("neg", [x]): -X,
        g.build("sin", [x]): np.sin(X),
        g.build("cos", [x]): np.cos(X),
        g.build("exp", [x]): np.exp(X),
        g.build("square", [x]): X * X,
        g.build("abs", [x]): np.abs(X),
        g.build("relu", [x]): np.maximum(X, 0.0),
        g.build("softplus", [x]): np.logaddexp(0.0, X),
        g.build("sigmoid", [x]): expit(X),
        g.build("sign", [x]): np.sign(X),
        g.build("step", [x]): (X > 0).astype(float),
    }
    vals = g.evaluate({x: X}, targets=list(cases))
    for node, want in cases.items():
        np.testing.assert_allclose(vals[node.id], want, rtol=1e-15)


def test_ln_sqrt_on_positive_input():
    g = Graph()
    x = g.leaf(1, 4, "x")
    X = np.array([[0.5, 1.0, 2.0, 9.0]])
    ln = g.build("ln", [x])
    sq = g.build("sqrt", [x])
    vals = g.evaluate({x: X}, targets=[ln, sq])
    np.testing.assert_allclose(vals[ln.id], np.log(X))
    np.testing.assert_allclose(vals[sq.id], np.sqrt(X))


def test_arithmetic_operators_and_python_scalars():
    g = Graph()
    x = g.leaf(1, 3, "x")
    X = np.array([[1.0, -2.0, 0.5]])
    expr = 2.0 * x + 1.0 - x / 4.0
    rexpr = 1.0 - x
    rdiv = 6.0 / x
    vals = g.evaluate({x: X}, targets=[expr, rexpr, rdiv])
    np.testing.assert_allclose(vals[expr.id], 2 * X + 1 - X / 4)
    np.testing.assert_allclose(vals[rexpr.id], 1 - X)
    np.testing.assert_allclose(vals[rdiv.id], 6 / X)


def test_reductions_and_linear_ops():
    g = Graph()
    x = g.leaf(2, 3, "x")
    u = g.leaf(2, 3, "u")
    X = np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]])
    U = np.array([[0.5, -1.0, 2.0], [1.0, 1.0, 1.0]])
    A = np.array([[1.0, 0.0, 2.0], [0.0, -1.0, 1.0]])

    s = x.sum()
    b = g.build("bsum", [x])
    d = g.build("dot", [x, u])
    mv = g.build("matvec", [g.const(A.ravel()), x], m=2, n=3)
    vals = g.evaluate({x: X, u: U}, targets=[s, b, d, mv])
    np.testing.assert_allclose(vals[s.id], X.sum(axis=1, keepdims=True))
    np.testing.assert_allclose(vals[b.id], X.sum(axis=0, keepdims=True))
    np.testing.assert_allclose(vals[d.id], np.sum(X * U, axis=1, keepdims=True))
    np.testing.assert_allclose(vals[mv.id], X @ A.T)


def test_matvec_t_and_outer():
    g = Graph()
    y = g.leaf(2, 2, "y")
    z = g.leaf(2, 3, "z")
    Y = np.array([[1.0, -1.0], [0.5, 2.0]])
    Z = np.array([[1.0, 2.0, 3.0], [0.0, 1.0, 0.0]])
    A = np.array([[1.0, 0.0, 2.0], [0.0, -1.0, 1.0]])
    mvt = g.build("matvec_t", [g.const(A.ravel()), y], m=2, n=3)
    ot = g.build("outer", [y, z], m=2, n=3)
    vals = g.evaluate({y: Y, z: Z}, targets=[mvt, ot])
    np.testing.assert_allclose(vals[mvt.id], Y @ A)
    want = np.stack([np.outer(Y[i], Z[i]).ravel() for i in range(2)])
    np.testing.assert_allclose(vals[ot.id], want)


def test_slice_pad_concat():
    g = Graph()
    x = g.leaf(1, 6, "x")
    X = np.arange(6.0).reshape(1, 6)
    head = x[0:2]
    tail = x[4:6]
    strided = x[0:6:2]
    cat = g.build("concat", [head, tail])
    pad = g.build("pad", [head], start=1, stop=5, step=2, out_len=5)
    vals = g.evaluate({x: X}, targets=[head, tail, strided, cat, pad])
    np.testing.assert_allclose(vals[head.id], X[:, 0:2])
    np.testing.assert_allclose(vals[strided.id], X[:, 0:6:2])
    np.testing.assert_allclose(vals[cat.id], np.hstack([X[:, 0:2], X[:, 4:6]]))
    want = np.zeros((1, 5))
    want[:, 1:5:2] = X[:, 0:2]
    np.testing.assert_allclose(vals[pad.id], want)


def test_feature_broadcast_in_binary_ops():
    g = Graph()
    a = g.leaf(3, 1, "a")
    b = g.leaf(3, 4, "b")
    A = np.array([[2.0], [3.0], [-1.0]])
    B = np.arange(12.0).reshape(3, 4)
    prod = a * b
    vals = g.evaluate({a: A, b: B}, targets=[prod])
    np.testing.assert_allclose(vals[prod.id], A * B)


def test_batch_broadcast_against_constants():
    g = Graph()
    x = g.leaf(4, 2, "x")
    c = g.const(np.array([10.0, 20.0]))
    X = np.random.default_rng(0).normal(size=(4, 2))
    s = x + c
    vals = g.evaluate({x: X}, targets=[s])
    np.testing.assert_allclose(vals[s.id], X + np.array([10.0, 20.0]))


def _fd_scalar(fn, X, h=1e-6):
    """Central differences of a scalar function of one array."""
    G = np.zeros_like(X)
    it = np.nditer(X, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        Xp, Xm = X.copy(), X.copy()
        Xp[idx] += h
        Xm[idx] -= h
        G[idx] = (fn(Xp) - fn(Xm)) / (2 * h)
        it.iternext()
    return G


def test_gradient_of_composite_expression():
    g = Graph()
    x = g.leaf(1, 3, "x")
    y = (g.build("sin", [x]) * x).sum() + g.build("exp", [x[0:1]])
    X = np.array([[0.4, -0.8, 1.3]])
    (gx,) = g.gradient(y, [x])
    got = g.evaluate({x: X}, targets=[gx])[gx.id]

    def f(v):
        return float(np.sum(np.sin(v) * v) + np.exp(v[0, 0]))

    np.testing.assert_allclose(got, _fd_scalar(f, X), rtol=1e-6, atol=1e-9)


def test_gradient_through_linear_algebra():
    g = Graph()
    x = g.leaf(1, 3, "x")
    A = np.array([[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]])
    mv = g.build("matvec", [g.const(A.ravel()), x], m=2, n=3)
    y = g.build("dot", [mv, mv])
    X = np.array([[0.7, -0.2, 1.1]])
    (gx,) = g.gradient(y, [x])
    got = g.evaluate({x: X}, targets=[gx])[gx.id]
    want = 2 * (X @ A.T) @ A
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_gradient_nodes_are_differentiable_again():
    # second order: f = sum(x^3), df/dx = 3x^2, d2f/dx2 diag = 6x
    g = Graph()
    x = g.leaf(1, 2, "x")
    f = (g.build("square", [x]) * x).sum()
    (gx,) = g.gradient(f, [x])
    first_component = gx[0:1]
    (hx,) = g.gradient(first_component, [x])
    X = np.array([[1.5, -0.5]])
    vals = g.evaluate({x: X}, targets=[gx, hx])
    np.testing.assert_allclose(vals[gx.id], 3 * X ** 2, rtol=1e-12)
    np.testing.assert_allclose(vals[hx.id], [[6 * 1.5, 0.0]], rtol=1e-12)


def test_batched_output_gradient_is_per_lane():
    g = Graph()
    x = g.leaf(3, 2, "x")
    y = g.build("dot", [x, x])  # (3,1): per-row |x|^2
    X = np.array([[1.0, 2.0], [0.5, -1.0], [2.0, 0.0]])
    (gx,) = g.gradient(y, [x])
    got = g.evaluate({x: X}, targets=[gx])[gx.id]
    np.testing.assert_allclose(got, 2 * X, rtol=1e-14)


def test_kink_subgradient_is_zero():
    g = Graph()
    x = g.leaf(1, 2, "x")
    y = (g.build("relu", [x]) + g.build("abs", [x])).sum()
    (gx,) = g.gradient(y, [x])
    got = g.evaluate({x: np.zeros((1, 2))}, targets=[gx])[gx.id]
    np.testing.assert_allclose(got, np.zeros((1, 2)))


def test_stop_nodes_block_descent():
    g = Graph()
    x = g.leaf(1, 2, "x")
    held = g.build("square", [x])
    y = g.build("dot", [held, x])
    (gx_stop,) = g.gradient(y, [x], stop=[held])
    (gx_full,) = g.gradient(y, [x])
    X = np.array([[1.2, -0.4]])
    vals = g.evaluate({x: X}, targets=[gx_stop, gx_full])
    # stopped: treat x^2 as constant c, d(c.x)/dx = c
    np.testing.assert_allclose(vals[gx_stop.id], X ** 2, rtol=1e-14)
    np.testing.assert_allclose(vals[gx_full.id], 3 * X ** 2, rtol=1e-14)


def test_unbroadcast_sums_adjoints():
    # (b,1) leaf broadcast against (b,n): its adjoint must sum over features
    g = Graph()
    a = g.leaf(2, 1, "a")
    b = g.leaf(2, 3, "b")
    y = g.build("bsum", [g.build("dot", [a * b, b])])
    A = np.array([[0.5], [2.0]])
    B = np.array([[1.0, -1.0, 2.0], [0.0, 3.0, 1.0]])
    (ga,) = g.gradient(y, [a])
    got = g.evaluate({a: A, b: B}, targets=[ga])[ga.id]
    np.testing.assert_allclose(got, np.sum(B * B, axis=1, keepdims=True),
                               rtol=1e-14)


def test_check_gradient_fd_agrees_on_smooth_graph():
    g = Graph()
    x = g.leaf(1, 4, "x")
    y = (g.build("sigmoid", [x]) * g.build("softplus", [x])).sum()
    err = check_gradient_fd(g, y, [x],
                            {x: np.array([[0.3, -0.9, 1.7, 0.1]])})
    assert err < 1e-7


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 4), st.integers(0, 2 ** 31 - 1))
def test_batched_eval_equals_rowwise(b, n, seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(b, n))
    g = Graph()
    x = g.leaf(b, n, "x")
    y = g.build("sin", [x]) * x + g.build("softplus", [-x])
    batched = g.evaluate({x: X}, targets=[y])[y.id]
    for i in range(b):
        g1 = Graph()
        x1 = g1.leaf(1, n, "x")
        y1 = g1.build("sin", [x1]) * x1 + g1.build("softplus", [-x1])
        row = g1.evaluate({x1: X[i:i + 1]}, targets=[y1])[y1.id]
        np.testing.assert_allclose(batched[i:i + 1], row, rtol=1e-14)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_gradient_matches_fd_on_random_smooth_graphs(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 5))
    X = rng.normal(size=(1, n))
    g = Graph()
    x = g.leaf(1, n, "x")
    t1 = g.build("sin", [x]) + 0.5 * x
    t2 = g.build("sigmoid", [x]) * t1
    y = g.build("dot", [t2, t1]) + g.build("exp", [0.1 * x]).sum()
    err = check_gradient_fd(g, y, [x], {x: X})
    assert err < 1e-6


def test_evaluation_is_pure():
    g = Graph()
    x = g.leaf(1, 2, "x")
    y = g.build("square", [x]).sum()
    X1 = np.array([[1.0, 2.0]])
    X2 = np.array([[3.0, 4.0]])
    v1a = g.evaluate({x: X1}, targets=[y])[y.id].copy()
    g.evaluate({x: X2}, targets=[y])
    v1b = g.evaluate({x: X1}, targets=[y])[y.id]
    assert np.array_equal(v1a, v1b)


def test_gradient_emission_does_not_change_values():
    g = Graph()
    x = g.leaf(1, 2, "x")
    y = g.build("exp", [x]).sum()
    X = np.array([[0.2, -0.3]])
    before = g.evaluate({x: X}, targets=[y])[y.id].copy()
    g.gradient(y, [x])
    after = g.evaluate({x: X}, targets=[y])[y.id]
    assert np.array_equal(before, after)


def test_shape_and_arity_errors():
    g = Graph()
    x = g.leaf(2, 3, "x")
    y = g.leaf(2, 4, "y")
    with pytest.raises(GraphError):
        g.build("add", [x, y])  # incompatible feature dims
    with pytest.raises(GraphError):
        g.build("sin", [x, x])  # wrong arity
    with pytest.raises(GraphError):
        g.build("frobnicate", [x])
    with pytest.raises(GraphError):
        g.leaf(0, 1)
    other = Graph()
    z = other.leaf(2, 3, "z")
    with pytest.raises(GraphError):
        g.build("add", [x, z])  # node from a different graph


def test_missing_and_misshapen_leaf_values():
    g = Graph()
    x = g.leaf(1, 3, "x")
    y = x.sum()
    with pytest.raises(GraphError):
        g.evaluate({}, targets=[y])
    with pytest.raises(GraphError):
        g.evaluate({x: np.zeros((2, 3))}, targets=[y])


def test_gradient_requires_scalar_feature_dim():
    g = Graph()
    x = g.leaf(1, 3, "x")
    with pytest.raises(GraphError):
        g.gradient(x, [x])  # output feature length 3, not 1


def test_dot_batch_value_model():
    # b=1 against b=3 passes through numpy-style stretching
    g = Graph()
    a = g.leaf(1, 2, "a")
    b = g.leaf(3, 2, "b")
    y = g.build("dot", [a, b])
    A = np.array([[1.0, -1.0]])
    B = np.array([[2.0, 3.0], [0.0, 1.0], [5.0, 5.0]])
    got = g.evaluate({a: A, b: B}, targets=[y])[y.id]
    np.testing.assert_allclose(got, (A * B).sum(axis=1, keepdims=True))
