"""Engine checks: naive-oracle forwards, finite-difference gradients, invariants."""

import numpy as np
import pytest

from advr.autodiff import (
    INPUT,
    Graph,
    GraphBuilder,
    Node,
    forward,
    input_gradient,
    loss_and_backward,
    softmax_cross_entropy,
)
from advr.errors import GraphError

# ---------------------------------------------------------------------------
# oracles: straight-line scalar reimplementations, no shared code with the engine


def oracle_conv2d(x, w, b):
    c_out, c_in, kh, kw = w.shape
    _, h, width = x.shape
    xp = np.zeros((c_in, h + 2, width + 2), dtype=x.dtype)
    xp[:, 1:h + 1, 1:width + 1] = x
    y = np.zeros((c_out, h, width), dtype=x.dtype)
    for o in range(c_out):
        for i in range(h):
            for j in range(width):
                acc = 0.0
                for c in range(c_in):
                    for ki in range(kh):
                        for kj in range(kw):
                            acc += w[o, c, ki, kj] * xp[c, i + ki, j + kj]
                y[o, i, j] = acc + b[o]
    return y


def oracle_maxpool2d(x):
    c, h, w = x.shape
    h2, w2 = h // 2, w // 2
    y = np.zeros((c, h2, w2), dtype=x.dtype)
    for ch in range(c):
        for i in range(h2):
            for j in range(w2):
                y[ch, i, j] = max(x[ch, 2 * i, 2 * j], x[ch, 2 * i, 2 * j + 1],
                                  x[ch, 2 * i + 1, 2 * j], x[ch, 2 * i + 1, 2 * j + 1])
    return y


def oracle_adaptive_avgpool(x, grid):
    c, h, w = x.shape
    gh, gw = grid
    y = np.zeros((c, gh, gw), dtype=x.dtype)
    for ch in range(c):
        for i in range(gh):
            h0, h1 = (i * h) // gh, int(np.ceil((i + 1) * h / gh))
            for j in range(gw):
                w0, w1 = (j * w) // gw, int(np.ceil((j + 1) * w / gw))
                y[ch, i, j] = x[ch, h0:h1, w0:w1].mean()
    return y


def oracle_dense(x, w, b):
    xf = x.reshape(-1)
    y = np.zeros(w.shape[0], dtype=x.dtype)
    for o in range(w.shape[0]):
        y[o] = float(w[o] @ xf) + b[o]
    return y


def fd_gradient(f, arr, step=1e-3):
    """Central finite differences of scalar f with respect to every element."""
    g = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        ix = it.multi_index
        old = arr[ix]
        arr[ix] = old + step
        fp = f()
        arr[ix] = old - step
        fm = f()
        arr[ix] = old
        g[ix] = (fp - fm) / (2 * step)
    return g


def rel_err(a, b, floor=1e-6):
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return np.abs(a - b).max(initial=0.0) / denom


def check_gradients(graph, x, label, tol=1e-3):
    """Analytic gradients vs central differences, every component."""
    loss, gset = loss_and_backward(graph, x, label)

    def loss_only():
        v = forward(graph, x)
        return softmax_cross_entropy(v, label)[0]

    for name, p in graph.params.items():
        fd = fd_gradient(loss_only, p)
        assert rel_err(gset.by_parameter[name], fd) < tol, f"parameter {name}"
    fd_in = fd_gradient(loss_only, x)
    assert rel_err(gset.by_input, fd_in) < tol, "input gradient"
    return loss


def build_mixed_graph(seed, input_shape=(2, 6, 7)):
    """Small net touching every op: conv, pool, SE gate, residual add, dense."""
    b = GraphBuilder(input_shape, seed=seed, dtype=np.float64)
    t = b.conv2d("c1", INPUT, out_channels=3)
    t = b.relu("r1", t)
    skip = t
    t = b.conv2d("c2", t, out_channels=3)
    g = b.adaptive_avgpool("gap", t, grid=(1, 1))
    g = b.dense("fc_r", g, out_features=2)
    g = b.relu("gr", g)
    g = b.dense("fc_e", g, out_features=3)
    g = b.sigmoid("gs", g)
    t = b.scale("se", t, g)
    t = b.add("res", t, skip)
    t = b.relu("r2", t)
    t = b.maxpool2d("p1", t)
    t = b.adaptive_avgpool("ap", t, grid=(2, 2))
    t = b.dense("out", t, out_features=2)
    return b.build()


# ---------------------------------------------------------------------------
# forward correctness against the scalar oracles


def test_forward_matches_straight_line_oracle():
    rng = np.random.default_rng(7)
    b = GraphBuilder((2, 5, 6), seed=3, dtype=np.float64)
    t = b.conv2d("c1", INPUT, out_channels=4)
    t = b.relu("r1", t)
    t = b.maxpool2d("p1", t)
    t = b.dense("fc", t, out_features=3)
    g = b.build()
    x = rng.normal(size=(2, 5, 6))
    got = forward(g, x)
    p = g.params
    want = oracle_dense(
        oracle_maxpool2d(np.maximum(oracle_conv2d(x, p["c1.w"], p["c1.b"]), 0)),
        p["fc.w"], p["fc.b"])
    assert np.allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv_identity_kernel():
    # one-hot center kernel with zero bias reproduces the input channel
    b = GraphBuilder((1, 4, 5), seed=0, dtype=np.float64)
    b.conv2d("c", INPUT, out_channels=1)
    g = b.build()
    g.params["c.w"][:] = 0.0
    g.params["c.w"][0, 0, 1, 1] = 1.0
    g.params["c.b"][:] = 0.0
    x = np.random.default_rng(1).normal(size=(1, 4, 5))
    assert np.array_equal(forward(g, x), x)


def test_maxpool_floor_and_oracle():
    rng = np.random.default_rng(11)
    for h, w in [(5, 7), (4, 4), (9, 3), (2, 2)]:
        b = GraphBuilder((3, h, w), seed=0, dtype=np.float64)
        b.maxpool2d("p", INPUT)
        g = b.build()
        g.params = {"_": np.zeros(1)}  # dtype carrier; pool has no params
        x = rng.normal(size=(3, h, w))
        got = forward(g, x)
        assert got.shape == (3, h // 2, w // 2)
        assert np.array_equal(got, oracle_maxpool2d(x))


def test_adaptive_avgpool_oracle_and_upsample():
    rng = np.random.default_rng(13)
    for (h, w), grid in [((9, 11), (3, 4)), ((18, 8), (7, 7)), ((2, 2), (7, 7)),
                         ((5, 5), (5, 5)), ((1, 3), (4, 2))]:
        b = GraphBuilder((2, h, w), seed=0, dtype=np.float64)
        b.adaptive_avgpool("a", INPUT, grid=grid)
        g = b.build()
        g.params = {"_": np.zeros(1)}
        x = rng.normal(size=(2, h, w))
        got = forward(g, x)
        assert got.shape == (2,) + grid
        assert np.allclose(got, oracle_adaptive_avgpool(x, grid), rtol=1e-12, atol=1e-12)


def test_adaptive_avgpool_identity_when_grid_matches():
    rng = np.random.default_rng(5)
    b = GraphBuilder((1, 4, 6), seed=0, dtype=np.float64)
    b.adaptive_avgpool("a", INPUT, grid=(4, 6))
    g = b.build()
    g.params = {"_": np.zeros(1)}
    x = rng.normal(size=(1, 4, 6))
    assert np.array_equal(forward(g, x), x)


def test_softmax_cross_entropy_symmetric_scores():
    loss, ds = softmax_cross_entropy(np.array([1.3, 1.3]), 0)
    assert abs(loss - np.log(2.0)) < 1e-12
    assert np.allclose(ds, [-0.5, 0.5])


def test_softmax_cross_entropy_stability():
    loss, ds = softmax_cross_entropy(np.array([1000.0, -1000.0]), 1)
    assert np.isfinite(loss) and loss > 100
    assert np.all(np.isfinite(ds))


# ---------------------------------------------------------------------------
# gradients vs finite differences


def test_gradcheck_dense_relu_stack():
    rng = np.random.default_rng(21)
    b = GraphBuilder((6,), seed=2, dtype=np.float64)
    t = b.dense("d1", INPUT, out_features=5)
    t = b.relu("r1", t)
    t = b.dense("d2", t, out_features=3)
    g = b.build()
    x = rng.normal(size=(6,))
    check_gradients(g, x, label=1)


def test_gradcheck_mixed_graph_all_ops():
    rng = np.random.default_rng(22)
    g = build_mixed_graph(seed=4)
    x = rng.normal(size=(2, 6, 7))
    check_gradients(g, x, label=0)


def test_gradcheck_conv_pool():
    rng = np.random.default_rng(23)
    b = GraphBuilder((1, 6, 5), seed=9, dtype=np.float64)
    t = b.conv2d("c1", INPUT, out_channels=2)
    t = b.relu("r", t)
    t = b.maxpool2d("p", t)
    t = b.conv2d("c2", t, out_channels=2)
    t = b.dense("o", t, out_features=2)
    g = b.build()
    x = rng.normal(size=(1, 6, 5))
    check_gradients(g, x, label=1)


def test_relu_subgradient_zero_at_zero():
    b = GraphBuilder((3,), seed=0, dtype=np.float64)
    t = b.relu("r", INPUT)
    b.dense("o", t, out_features=2)
    g = b.build()
    x = np.array([0.0, 1.0, -1.0])
    _, gset = loss_and_backward(g, x, 0)
    w = g.params["o.w"]
    _, ds = softmax_cross_entropy(forward(g, x), 0)
    expect = (w.T @ ds) * (x > 0)
    # element sitting exactly at 0 must contribute exactly 0
    assert gset.by_input[0] == 0.0
    assert np.allclose(gset.by_input, expect)


# ---------------------------------------------------------------------------
# structural and numeric invariants


def test_shape_mismatch_rejected_at_build():
    b = GraphBuilder((2, 4, 4), seed=0)
    t = b.conv2d("c1", INPUT, out_channels=3)
    with pytest.raises(GraphError):
        b.add("bad", t, INPUT)  # (3,4,4) vs (2,4,4)


def test_pool_too_small_rejected():
    b = GraphBuilder((1, 1, 4), seed=0)
    with pytest.raises(GraphError):
        b.maxpool2d("p", INPUT)


def test_duplicate_node_name_rejected():
    b = GraphBuilder((4,), seed=0)
    b.dense("d", INPUT, out_features=2)
    with pytest.raises(GraphError):
        b.dense("d", INPUT, out_features=2)


def test_forward_reference_rejected():
    nodes = [Node("a", "relu", ("b",), out_shape=(4,)),
             Node("b", "relu", (INPUT,), out_shape=(4,))]
    with pytest.raises(GraphError):
        Graph((4,), nodes, {"_": np.zeros(1)})


def test_input_shape_mismatch_rejected():
    b = GraphBuilder((4,), seed=0)
    b.dense("d", INPUT, out_features=2)
    g = b.build()
    with pytest.raises(GraphError):
        forward(g, np.zeros(5))


def test_nonfinite_intermediate_names_node():
    b = GraphBuilder((2,), seed=0, dtype=np.float64)
    t = b.dense("d1", INPUT, out_features=2)
    b.dense("d2", t, out_features=2)
    g = b.build()
    g.params["d1.w"][0, 0] = np.inf
    with pytest.raises(GraphError, match="d1"):
        forward(g, np.ones(2))


def test_forward_deterministic_bitwise():
    rng = np.random.default_rng(31)
    g = build_mixed_graph(seed=6)
    x = rng.normal(size=(2, 6, 7))
    a = forward(g, x)
    b = forward(g, x)
    assert np.array_equal(a, b)
    g2 = build_mixed_graph(seed=6)
    assert all(np.array_equal(g.params[k], g2.params[k]) for k in g.params)
    assert np.array_equal(forward(g2, x), a)


def test_linear_graph_homogeneity():
    # conv/pool/dense with zero biases and no nonlinearity: f(a*x) == a*f(x)
    rng = np.random.default_rng(33)
    b = GraphBuilder((1, 8, 8), seed=12, dtype=np.float64)
    t = b.conv2d("c", INPUT, out_channels=2)
    t = b.adaptive_avgpool("a", t, grid=(3, 3))
    t = b.dense("d", t, out_features=2)
    g = b.build()
    g.params["c.b"][:] = 0.0
    g.params["d.b"][:] = 0.0
    x = rng.normal(size=(1, 8, 8))
    for a in [2.0, -0.7, 13.5]:
        assert rel_err(forward(g, a * x), a * forward(g, x)) < 1e-6


def test_gradientset_covers_all_parameters_and_input():
    g = build_mixed_graph(seed=8)
    x = np.random.default_rng(40).normal(size=(2, 6, 7))
    _, gset = loss_and_backward(g, x, 1)
    assert set(gset.by_parameter) == set(g.params)
    assert gset.by_input.shape == g.input_shape
    for k, p in g.params.items():
        assert gset.by_parameter[k].shape == p.shape


def test_input_gradient_matches_full_backward():
    g = build_mixed_graph(seed=10)
    x = np.random.default_rng(41).normal(size=(2, 6, 7))
    l1, gset = loss_and_backward(g, x, 0)
    l2, gin = input_gradient(g, x, 0)
    assert l1 == l2
    assert np.array_equal(gset.by_input, gin)
