"""NHWC convolution primitives with hand-written backward passes.

Spatial convolutions use replicate ("edge") padding so the output keeps the
input size.  Weights follow the ``(out, in, k, k)`` layout.
"""
import numpy as np


def pad_edge(x, p):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)), mode="edge")


def unpad_edge_grad(g, p):
    """Adjoint of :func:`pad_edge`: fold border gradients back onto the edge."""
    if p == 0:
        return g
    g = g.copy()
    for _ in range(p):
        g[:, 1] += g[:, 0]
        g[:, -2] += g[:, -1]
        g = g[:, 1:-1]
    for _ in range(p):
        g[:, :, 1] += g[:, :, 0]
        g[:, :, -2] += g[:, :, -1]
        g = g[:, :, 1:-1]
    return g


def conv2d(x, w, b):
    """Dense same-size convolution.  Returns ``(out, cache)``."""
    n, h, wd, c = x.shape
    co, ci, k, _ = w.shape
    if ci != c:
        raise ValueError(f"conv expects {ci} input channels, got {c}")
    if k == 1:
        wm = w[:, :, 0, 0].T
        out = (x.reshape(-1, c) @ wm).reshape(n, h, wd, co) + b
        return out, (x, None, w)
    p = k // 2
    xp = pad_edge(x, p)
    cols = np.empty((n, h, wd, k, k, c), dtype=x.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, :, dy, dx, :] = xp[:, dy:dy + h, dx:dx + wd, :]
    cols = cols.reshape(n * h * wd, k * k * c)
    wm = w.transpose(2, 3, 1, 0).reshape(k * k * c, co)
    out = (cols @ wm).reshape(n, h, wd, co) + b
    return out, (x, cols, w)


def conv2d_backward(dout, cache):
    x, cols, w = cache
    n, h, wd, c = x.shape
    co, ci, k, _ = w.shape
    d2 = dout.reshape(-1, co)
    db = d2.sum(axis=0)
    if k == 1:
        xm = x.reshape(-1, c)
        dw = (xm.T @ d2).T[:, :, None, None]
        dx = (d2 @ w[:, :, 0, 0]).reshape(x.shape)
        return dx, dw, db
    p = k // 2
    wm = w.transpose(2, 3, 1, 0).reshape(k * k * c, co)
    dw = (cols.T @ d2).reshape(k, k, c, co).transpose(3, 2, 0, 1)
    dcols = (d2 @ wm.T).reshape(n, h, wd, k, k, c)
    dxp = np.zeros((n, h + 2 * p, wd + 2 * p, c), dtype=dout.dtype)
    for dy in range(k):
        for dx_ in range(k):
            dxp[:, dy:dy + h, dx_:dx_ + wd, :] += dcols[:, :, :, dy, dx_, :]
    return unpad_edge_grad(dxp, p), dw, db


# Per-chunk element budget; keeps the shifted multiply-adds cache resident.
_CHUNK_ELEMS = 1 << 17


def _chunks(n, per_sample):
    step = max(1, _CHUNK_ELEMS // max(per_sample, 1))
    return [(i, min(i + step, n)) for i in range(0, n, step)]


def depthwise_conv2d(x, w, b):
    """Per-channel spatial convolution, ``w`` shaped ``(C, 1, k, k)``."""
    n, h, wd, c = x.shape
    k = w.shape[-1]
    xp = pad_edge(x, k // 2)
    out = np.empty_like(x)
    for i, j in _chunks(n, h * wd * c):
        o = out[i:j]
        o[...] = b
        tmp = np.empty_like(o)
        for dy in range(k):
            for dx in range(k):
                np.multiply(xp[i:j, dy:dy + h, dx:dx + wd, :], w[:, 0, dy, dx], out=tmp)
                o += tmp
    return out, (xp, w, x.shape)


def depthwise_conv2d_backward(dout, cache):
    xp, w, shape = cache
    n, h, wd, c = shape
    k = w.shape[-1]
    db = dout.sum(axis=(0, 1, 2))
    dw = np.zeros_like(w)
    dxp = np.zeros_like(xp)
    for i, j in _chunks(n, h * wd * c):
        g = dout[i:j]
        tmp = np.empty_like(g)
        for dy in range(k):
            for dx in range(k):
                np.multiply(xp[i:j, dy:dy + h, dx:dx + wd, :], g, out=tmp)
                dw[:, 0, dy, dx] += tmp.reshape(-1, c).sum(axis=0)
                np.multiply(g, w[:, 0, dy, dx], out=tmp)
                dxp[i:j, dy:dy + h, dx:dx + wd, :] += tmp
    return unpad_edge_grad(dxp, k // 2), dw, db


def relu(x):
    return np.maximum(x, 0)


def relu_backward(dout, y):
    """Gradient through a rectifier given its output ``y``."""
    return dout * (y > 0)


def depth_to_space(x):
    """``(N, h, w, 4*C)`` -> ``(N, 2h, 2w, C)``; channel ``(dy*2+dx)*C + c``."""
    n, h, w, cc = x.shape
    c = cc // 4
    return x.reshape(n, h, w, 2, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, 2 * h, 2 * w, c)


def space_to_depth(x):
    n, hh, ww, c = x.shape
    h, w = hh // 2, ww // 2
    return x.reshape(n, h, 2, w, 2, c).transpose(0, 1, 3, 2, 4, 5).reshape(n, h, w, 4 * c)
