"""Forward and backward kernels for the graph primitives.

All kernels operate on a single example (no batch axis): feature maps are
(channels, height, width) arrays, vectors are 1-D. Each forward returns the
output plus a context tuple that the matching backward consumes. Convolutions
are fixed at 3x3, stride 1, zero same-padding; max-pooling is fixed at 2x2,
stride 2, discarding trailing odd rows/columns.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import GraphError

KERNEL = 3
POOL = 2


# ---------------------------------------------------------------------------
# shape rules (used by the builder for static checking)


def conv2d_shape(in_shape: tuple[int, ...], out_channels: int) -> tuple[int, ...]:
    if len(in_shape) != 3:
        raise GraphError(f"conv2d expects (channels, height, width), got {in_shape}")
    return (out_channels, in_shape[1], in_shape[2])


def maxpool2d_shape(in_shape: tuple[int, ...]) -> tuple[int, ...]:
    if len(in_shape) != 3:
        raise GraphError(f"maxpool2d expects (channels, height, width), got {in_shape}")
    c, h, w = in_shape
    if h < POOL or w < POOL:
        raise GraphError(f"maxpool2d input {in_shape} too small for a {POOL}x{POOL} window")
    return (c, h // POOL, w // POOL)


def adaptive_avgpool_shape(in_shape: tuple[int, ...], grid: tuple[int, int]) -> tuple[int, ...]:
    if len(in_shape) != 3:
        raise GraphError(f"adaptive_avgpool expects (channels, height, width), got {in_shape}")
    gh, gw = grid
    if gh < 1 or gw < 1:
        raise GraphError(f"adaptive_avgpool grid must be positive, got {grid}")
    return (in_shape[0], gh, gw)


def dense_shape(in_shape: tuple[int, ...], out_features: int) -> tuple[int, ...]:
    return (out_features,)


# ---------------------------------------------------------------------------
# conv2d


def _im2col(x: np.ndarray) -> np.ndarray:
    """Stack every 3x3 neighbourhood of the zero-padded input as a row.

    Returns (H*W, C*9) with rows ordered row-major over output positions and
    columns ordered (channel, ki, kj), matching the weight layout.
    """
    c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (KERNEL, KERNEL), axis=(1, 2))
    cols = win.transpose(1, 2, 0, 3, 4).reshape(h * w, c * KERNEL * KERNEL)
    return np.ascontiguousarray(cols)


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    out_ch = w.shape[0]
    _, h, width = x.shape
    cols = _im2col(x)
    wmat = w.reshape(out_ch, -1)
    y = cols @ wmat.T
    y += b
    y = y.T.reshape(out_ch, h, width)
    return y, (cols, w, x.shape)


def conv2d_backward(dy: np.ndarray, ctx, need_param_grads: bool = True):
    cols, w, x_shape = ctx
    out_ch = w.shape[0]
    c, h, width = x_shape
    dy_mat = dy.reshape(out_ch, h * width).T
    if need_param_grads:
        dw = (dy_mat.T @ cols).reshape(w.shape)
        db = dy.sum(axis=(1, 2))
    else:
        dw = db = None
    dcols = dy_mat @ w.reshape(out_ch, -1)
    # scatter-add the column gradients back through the padding
    dck = dcols.reshape(h, width, c, KERNEL, KERNEL).transpose(2, 3, 4, 0, 1)
    dxp = np.zeros((c, h + 2, width + 2), dtype=dy.dtype)
    for ki in range(KERNEL):
        for kj in range(KERNEL):
            dxp[:, ki:ki + h, kj:kj + width] += dck[:, ki, kj]
    dx = dxp[:, 1:h + 1, 1:width + 1]
    return dx, dw, db


# ---------------------------------------------------------------------------
# max pooling


def maxpool2d_forward(x: np.ndarray):
    c, h, w = x.shape
    h2, w2 = h // POOL, w // POOL
    t = x[:, :h2 * POOL, :w2 * POOL]
    t = t.reshape(c, h2, POOL, w2, POOL).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, POOL * POOL)
    idx = t.argmax(axis=-1)  # first index wins ties
    y = np.take_along_axis(t, idx[..., None], axis=-1)[..., 0]
    return y, (idx, x.shape)


def maxpool2d_backward(dy: np.ndarray, ctx):
    idx, x_shape = ctx
    c, h, w = x_shape
    h2, w2 = h // POOL, w // POOL
    dt = np.zeros((c, h2, w2, POOL * POOL), dtype=dy.dtype)
    np.put_along_axis(dt, idx[..., None], dy[..., None], axis=-1)
    dt = dt.reshape(c, h2, w2, POOL, POOL).transpose(0, 1, 3, 2, 4).reshape(c, h2 * POOL, w2 * POOL)
    dx = np.zeros(x_shape, dtype=dy.dtype)
    dx[:, :h2 * POOL, :w2 * POOL] = dt
    return dx


# ---------------------------------------------------------------------------
# adaptive average pooling


def _pool_bounds(n_in: int, n_out: int) -> list[tuple[int, int]]:
    return [((i * n_in) // n_out, -((-(i + 1) * n_in) // n_out)) for i in range(n_out)]


def adaptive_avgpool_forward(x: np.ndarray, grid: tuple[int, int]):
    c, h, w = x.shape
    gh, gw = grid
    hb = _pool_bounds(h, gh)
    wb = _pool_bounds(w, gw)
    y = np.empty((c, gh, gw), dtype=x.dtype)
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            y[:, i, j] = x[:, h0:h1, w0:w1].mean(axis=(1, 2))
    return y, (hb, wb, x.shape)


def adaptive_avgpool_backward(dy: np.ndarray, ctx):
    hb, wb, x_shape = ctx
    dx = np.zeros(x_shape, dtype=dy.dtype)
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            area = (h1 - h0) * (w1 - w0)
            dx[:, h0:h1, w0:w1] += (dy[:, i, j] / area)[:, None, None]
    return dx


# ---------------------------------------------------------------------------
# dense


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    xf = x.reshape(-1)
    y = w @ xf + b
    return y, (xf, w, x.shape)


def dense_backward(dy: np.ndarray, ctx, need_param_grads: bool = True):
    xf, w, x_shape = ctx
    if need_param_grads:
        dw = np.outer(dy, xf)
        db = dy.copy()
    else:
        dw = db = None
    dx = (w.T @ dy).reshape(x_shape)
    return dx, dw, db


# ---------------------------------------------------------------------------
# elementwise and combining ops


def relu_forward(x: np.ndarray):
    return np.maximum(x, 0), (x > 0)  # subgradient 0 at exactly 0


def relu_backward(dy: np.ndarray, ctx):
    return dy * ctx


def sigmoid_forward(x: np.ndarray):
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)
    return y, y


def sigmoid_backward(dy: np.ndarray, y: np.ndarray):
    return dy * y * (1.0 - y)


def add_forward(a: np.ndarray, b: np.ndarray):
    return a + b, None


def add_backward(dy: np.ndarray, ctx):
    return dy, dy


def scale_forward(x: np.ndarray, gate: np.ndarray):
    return x * gate[:, None, None], (x, gate)


def scale_backward(dy: np.ndarray, ctx):
    x, gate = ctx
    dx = dy * gate[:, None, None]
    dgate = (dy * x).sum(axis=(1, 2))
    return dx, dgate


# ---------------------------------------------------------------------------
# loss


def softmax_cross_entropy(scores: np.ndarray, label: int):
    """Stable softmax cross-entropy on pre-softmax scores.

    Returns (loss, dscores) where dscores = softmax(scores) - onehot(label).
    """
    if scores.ndim != 1:
        raise GraphError(f"loss expects a 1-D score vector, got shape {scores.shape}")
    if not 0 <= label < scores.shape[0]:
        raise GraphError(f"label {label} out of range for {scores.shape[0]} classes")
    z = scores - scores.max()
    lse = np.log(np.exp(z).sum())
    loss = lse - z[label]
    dscores = np.exp(z - lse)
    dscores[label] -= 1.0
    return float(loss), dscores
