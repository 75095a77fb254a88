"""
Numpy layers with explicit backward passes.

Every ``*_forward`` returns its output and a cache; the matching
``*_backward`` takes the upstream gradient and that cache.
"""

import math
from typing import Callable, Dict, Tuple

import numpy as np

Cache = tuple


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 2) -> Tuple[np.ndarray, Cache]:
    """
    3x3 convolution, zero padding 1.

    Args:
        x: (H, W, Cin)
        w: (3, 3, Cin, Cout)
        b: (Cout,)

    Returns:
        (ceil(H/stride), ceil(W/stride), Cout) output and the cache
    """
    height, width, _ = x.shape
    ho, wo = -(-height // stride), -(-width // stride)
    k = w.shape[0]
    pad_h = max(0, (ho - 1) * stride + k - height - 1)
    pad_w = max(0, (wo - 1) * stride + k - width - 1)
    xp = np.pad(x, ((1, pad_h), (1, pad_w), (0, 0)))
    out = np.broadcast_to(b, (ho, wo, w.shape[3])).copy()
    for ki in range(k):
        for kj in range(k):
            patch = xp[ki:ki + stride * ho:stride, kj:kj + stride * wo:stride]
            out += np.tensordot(patch, w[ki, kj], axes=([2], [0]))
    return out, (x.shape, xp, w, stride, ho, wo)


def conv2d_backward(dout: np.ndarray, cache: Cache) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    x_shape, xp, w, stride, ho, wo = cache
    k = w.shape[0]
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    for ki in range(k):
        for kj in range(k):
            rows = slice(ki, ki + stride * ho, stride)
            cols = slice(kj, kj + stride * wo, stride)
            dw[ki, kj] = np.tensordot(xp[rows, cols], dout, axes=([0, 1], [0, 1]))
            dxp[rows, cols] += np.tensordot(dout, w[ki, kj], axes=([2], [1]))
    db = dout.sum(axis=(0, 1))
    dx = dxp[1:1 + x_shape[0], 1:1 + x_shape[1]]
    return dx, dw, db


def relu_forward(x: np.ndarray) -> Tuple[np.ndarray, Cache]:
    mask = x > 0
    return x * mask, (mask,)


def relu_backward(dout: np.ndarray, cache: Cache) -> np.ndarray:
    (mask,) = cache
    return dout * mask


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    e = np.exp(shifted)
    return e / e.sum()


def softmax_xent(logits: np.ndarray, target: int) -> Tuple[float, np.ndarray, np.ndarray]:
    """Cross-entropy of ``softmax(logits)`` against ``target``: (loss, probs, dloss/dlogits)."""
    shifted = logits - logits.max()
    log_z = math.log(np.exp(shifted).sum())
    probs = np.exp(shifted - log_z)
    dlogits = probs.copy()
    dlogits[target] -= 1.0
    return float(log_z - shifted[target]), probs, dlogits


def lstm_forward(
    x: np.ndarray, h: np.ndarray, m: np.ndarray, wx: np.ndarray, wh: np.ndarray, b: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, Cache]:
    """One LSTM step; gate order input, forget, candidate, output."""
    n = h.shape[0]
    z = wx @ x + wh @ h + b
    i = sigmoid(z[:n])
    f = sigmoid(z[n:2 * n])
    g = np.tanh(z[2 * n:3 * n])
    o = sigmoid(z[3 * n:])
    m_new = f * m + i * g
    tm = np.tanh(m_new)
    h_new = o * tm
    return h_new, m_new, (x, h, m, wx, wh, i, f, g, o, tm)


def lstm_backward(dh: np.ndarray, dm: np.ndarray, cache: Cache):
    """Returns (dx, dh_prev, dm_prev, dwx, dwh, db)."""
    x, h, m, wx, wh, i, f, g, o, tm = cache
    do = dh * tm
    dm_total = dm + dh * o * (1.0 - tm * tm)
    di = dm_total * g
    df = dm_total * m
    dg = dm_total * i
    dz = np.concatenate([
        di * i * (1.0 - i),
        df * f * (1.0 - f),
        dg * (1.0 - g * g),
        do * o * (1.0 - o),
    ])
    return wx.T @ dz, wh.T @ dz, dm_total * f, np.outer(dz, x), np.outer(dz, h), dz


def attention_forward(
    h: np.ndarray, feats: np.ndarray, keys: np.ndarray, wa: np.ndarray, ba: np.ndarray, v: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, Cache]:
    """
    Additive attention over N flattened cells.

    Args:
        h: (Hd,) decoder state
        feats: (N, D) feature cells
        keys: (N, A) precomputed ``feats @ U``

    Returns:
        context (D,), weights (N,), cache
    """
    t = np.tanh(keys + h @ wa + ba)
    alpha = softmax(t @ v)
    return alpha @ feats, alpha, (h, feats, wa, v, t, alpha)


def attention_backward(dc: np.ndarray, cache: Cache):
    """Returns (dh, dfeats, dkeys, dwa, dba, dv)."""
    h, feats, wa, v, t, alpha = cache
    dalpha = feats @ dc
    dfeats = np.outer(alpha, dc)
    de = alpha * (dalpha - alpha @ dalpha)
    dv = t.T @ de
    ds = np.outer(de, v) * (1.0 - t * t)
    dq = ds.sum(axis=0)
    return wa @ dq, dfeats, ds, np.outer(h, dq), dq, dv


def positional_encoding(rows: int, cols: int, dims: int) -> np.ndarray:
    """Fixed sin/cos features of row and column index, shape (rows, cols, dims)."""
    out = np.zeros((rows, cols, dims))
    if dims == 0:
        return out
    quarter = dims // 4
    r = np.arange(rows)[:, None]
    c = np.arange(cols)[None, :]
    for k in range(quarter):
        freq = 1.0 / (16.0 ** (k / quarter))
        out[:, :, 4 * k] = np.sin(r * freq)
        out[:, :, 4 * k + 1] = np.cos(r * freq)
        out[:, :, 4 * k + 2] = np.sin(c * freq)
        out[:, :, 4 * k + 3] = np.cos(c * freq)
    return out


def finite_difference_check(
    loss_fn: Callable[[], float],
    params: Dict[str, np.ndarray],
    analytic: Dict[str, np.ndarray],
    step: float = 1e-5,
) -> Dict[str, float]:
    """
    Central-difference check of ``analytic`` against ``loss_fn``.

    ``loss_fn`` reads ``params`` in place; every entry is perturbed by
    ``+-step`` and restored.

    Returns:
        per-tensor max of |a - n| / max(|a|, |n|, 1e-8)
    """
    errors = {}
    for name, value in params.items():
        flat = value.reshape(-1)
        grad = analytic[name].reshape(-1)
        worst = 0.0
        for idx in range(flat.size):
            original = flat[idx]
            flat[idx] = original + step
            plus = loss_fn()
            flat[idx] = original - step
            minus = loss_fn()
            flat[idx] = original
            numeric = (plus - minus) / (2.0 * step)
            denom = max(abs(grad[idx]), abs(numeric), 1e-8)
            worst = max(worst, abs(grad[idx] - numeric) / denom)
        errors[name] = worst
    return errors
