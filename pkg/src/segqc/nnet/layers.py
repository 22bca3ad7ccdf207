"""Forward/backward kernels for channels-last 3D tensors ``(B, X, Y, Z, C)``.

Every ``*_forward`` returns ``(out, cache)`` and the matching ``*_backward``
consumes that cache. All arithmetic is float64.
"""

from __future__ import annotations

import numpy as np

from ..errors import ShapeMismatchError

_OFFSETS = [(i, j, k) for i in range(3) for j in range(3) for k in range(3)]


def _pad1(x: np.ndarray) -> np.ndarray:
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (1, 1), (0, 0)))


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None):
    """Stride-1 'same' convolution. ``w`` has shape ``(k, k, k, Cin, Cout)`` with k in {1, 3}.

    The 3x3x3 case accumulates one small matmul per kernel tap over shifted
    views of the zero-padded input, which beats im2col for few channels.
    """
    k = w.shape[0]
    cout = w.shape[4]
    if k == 1:
        out = x @ w[0, 0, 0]
        cache = (x, k)
    elif k == 3:
        _, nx, ny, nz, _ = x.shape
        xp = _pad1(x)
        wt = w.reshape(27, w.shape[3], cout)
        out = np.zeros(x.shape[:4] + (cout,), dtype=x.dtype)
        for n, (i, j, kk) in enumerate(_OFFSETS):
            out += xp[:, i:i + nx, j:j + ny, kk:kk + nz, :] @ wt[n]
        cache = (xp, k)
    else:
        raise ValueError(f"unsupported kernel size {k}")
    if b is not None:
        out += b
    return out, cache


def conv_backward(dout: np.ndarray, w: np.ndarray, cache, with_bias: bool = False,
                  need_dx: bool = True):
    xin, k = cache
    cin, cout = w.shape[3], w.shape[4]
    d2 = dout.reshape(-1, cout)
    db = d2.sum(axis=0) if with_bias else None
    if k == 1:
        dw = (xin.reshape(-1, cin).T @ d2).reshape(w.shape)
        dx = dout @ w[0, 0, 0].T if need_dx else None
        return dx, dw, db
    _, nx, ny, nz, _ = dout.shape
    wt = w.reshape(27, cin, cout)
    dw = np.empty_like(wt)
    dxp = np.zeros_like(xin) if need_dx else None
    for n, (i, j, kk) in enumerate(_OFFSETS):
        sl = (slice(None), slice(i, i + nx), slice(j, j + ny), slice(kk, kk + nz))
        dw[n] = np.ascontiguousarray(xin[sl]).reshape(-1, cin).T @ d2
        if need_dx:
            dxp[sl] += dout @ wt[n].T
    dx = dxp[:, 1:-1, 1:-1, 1:-1, :] if need_dx else None
    return dx, dw.reshape(w.shape), db


def instnorm_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5):
    """Per-sample, per-channel normalization over the spatial axes."""
    mean = x.mean(axis=(1, 2, 3), keepdims=True)
    xc = x - mean
    var = (xc * xc).mean(axis=(1, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv)


def instnorm_backward(dy: np.ndarray, gamma: np.ndarray, cache):
    xhat, inv = cache
    n = xhat.shape[1] * xhat.shape[2] * xhat.shape[3]
    dgamma = (dy * xhat).sum(axis=(0, 1, 2, 3))
    dbeta = dy.sum(axis=(0, 1, 2, 3))
    dxhat = dy * gamma
    s1 = dxhat.sum(axis=(1, 2, 3), keepdims=True)
    s2 = (dxhat * xhat).sum(axis=(1, 2, 3), keepdims=True)
    dx = (inv / n) * (n * dxhat - s1 - xhat * s2)
    return dx, dgamma, dbeta


def relu_forward(x: np.ndarray):
    mask = x > 0
    return x * mask, mask


def relu_backward(dy: np.ndarray, mask: np.ndarray) -> np.ndarray:
    return dy * mask


def avgpool_forward(x: np.ndarray):
    """2x2x2 average pooling; spatial dims must be even."""
    b, nx, ny, nz, c = x.shape
    out = x.reshape(b, nx // 2, 2, ny // 2, 2, nz // 2, 2, c).mean(axis=(2, 4, 6))
    return out, x.shape


def avgpool_backward(dy: np.ndarray, xshape) -> np.ndarray:
    d = dy / 8.0
    d = np.repeat(np.repeat(np.repeat(d, 2, axis=1), 2, axis=2), 2, axis=3)
    return d.reshape(xshape)


def gap_forward(x: np.ndarray):
    return x.mean(axis=(1, 2, 3)), x.shape


def gap_backward(dy: np.ndarray, xshape) -> np.ndarray:
    n = xshape[1] * xshape[2] * xshape[3]
    return np.broadcast_to((dy / n)[:, None, None, None, :], xshape).copy()


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray):
    return x @ w + b, x


def dense_backward(dy: np.ndarray, w: np.ndarray, x: np.ndarray):
    return dy @ w.T, x.T @ dy, dy.sum(axis=0)


def sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid_backward(dy: np.ndarray, y: np.ndarray) -> np.ndarray:
    return dy * y * (1.0 - y)


def mse_loss(pred: np.ndarray, target: np.ndarray, denom: int | None = None):
    """Mean of squared errors over every entry, and its gradient w.r.t. ``pred``.

    ``denom`` overrides the entry count when a batch is processed in chunks.
    """
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatchError(f"shape mismatch: {pred.shape} vs {target.shape}")
    n = pred.size if denom is None else denom
    diff = pred - target
    return float((diff * diff).sum() / n), 2.0 * diff / n
