"""Dense tensor primitives with matching analytic gradients.

All operations are pure functions over numpy arrays (row-major float32 by
default, float64 for oracle comparisons). Each forward has a hand-written
backward (vector-Jacobian product); `pcnlab.gradcheck` verifies every pair
against central finite differences.

Conventions:
  - batches lead: images are (N, C, H, W), vectors are (N, D)
  - linear weights are (out, in); conv kernels are (out, in, 3, 3)
  - backward functions return grads in the order (input, weight, bias)
"""

from __future__ import annotations

import numpy as np
from scipy.special import ndtr  # standard normal CDF, exact GELU

BN_EPS = 1e-5
BN_MOMENTUM = 0.1
_INV_SQRT_2PI = 0.3989422804014327


class ShapeError(ValueError):
    """Raised when operand shapes violate an operation's contract."""


# ---------------------------------------------------------------------------
# convolution (3x3 kernel, padding 1, stride 1 -- the only variant used)
# ---------------------------------------------------------------------------

# Convolutions run as nine flat-shifted GEMMs over a channel-major padded
# buffer: for valid output positions, kernel tap (di, dj) reads the padded
# plane at a constant flat offset, so no per-tap copy is needed. Positions
# outside the valid window accumulate cross-boundary garbage and are
# cropped. Images are chunked so the accumulator stays cache-resident.

_CONV_CHUNK = 64


def _tap_mats(w):
    # matmul silently leaves the BLAS path on non-contiguous operands
    return [np.ascontiguousarray(w[:, :, di, dj])
            for di in range(3) for dj in range(3)]


def _to_padded_cm(xb):
    """(N, C, H, W) -> zero-padded channel-major (C, N*(H+2)*(W+2))."""
    n, c, h, wd = xb.shape
    buf = np.zeros((c, n, h + 2, wd + 2), dtype=xb.dtype)
    buf[:, :, 1:-1, 1:-1] = xb.transpose(1, 0, 2, 3)
    return buf.reshape(c, -1)


def _shift_gemm_acc(acc, mat, f, s):
    """acc += mat @ (f shifted right by s flat positions)."""
    m = f.shape[1]
    if s >= 0:
        acc[:, :m - s] += mat @ f[:, s:]
    else:
        acc[:, -s:] += mat @ f[:, :m + s]


def conv2d_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross-correlation with a 3x3 kernel, zero padding 1, stride 1.

    x: (N, C_in, H, W); w: (C_out, C_in, 3, 3); b: (C_out,).
    Output spatial size equals input spatial size.
    """
    n, c_in, h, wd = x.shape
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ShapeError(f"kernel must be (C_out, C_in, 3, 3), got {w.shape}")
    if w.shape[1] != c_in:
        raise ShapeError(f"input has {c_in} channels, kernel expects {w.shape[1]}")
    c_out = w.shape[0]
    wp = wd + 2
    taps = _tap_mats(w)
    out = np.empty((n, c_out, h, wd), dtype=x.dtype)
    for st in range(0, n, _CONV_CHUNK):
        xb = x[st:st + _CONV_CHUNK]
        nb = xb.shape[0]
        f = _to_padded_cm(xb)
        acc = np.zeros((c_out, f.shape[1]), dtype=x.dtype)
        for di in range(3):
            for dj in range(3):
                _shift_gemm_acc(acc, taps[di * 3 + dj], f, (di - 1) * wp + (dj - 1))
        yb = acc.reshape(c_out, nb, h + 2, wp)[:, :, 1:-1, 1:-1]
        out[st:st + nb] = yb.transpose(1, 0, 2, 3)
    return out + b.reshape(1, c_out, 1, 1)


def conv2d_input_backward(w, gy):
    """Gradient w.r.t. the input only (settle loop hot path)."""
    n, c_out, h, wd = gy.shape
    c_in = w.shape[1]
    wp = wd + 2
    taps_t = [np.ascontiguousarray(w[:, :, di, dj].T)
              for di in range(3) for dj in range(3)]
    gx = np.empty((n, c_in, h, wd), dtype=gy.dtype)
    for st in range(0, n, _CONV_CHUNK):
        gyb = gy[st:st + _CONV_CHUNK]
        nb = gyb.shape[0]
        g = _to_padded_cm(gyb)
        acc = np.zeros((c_in, g.shape[1]), dtype=gy.dtype)
        for di in range(3):
            for dj in range(3):
                # reverse shift: output position t received from input t + s
                _shift_gemm_acc(acc, taps_t[di * 3 + dj], g,
                                -((di - 1) * wp + (dj - 1)))
        gxb = acc.reshape(c_in, nb, h + 2, wp)[:, :, 1:-1, 1:-1]
        gx[st:st + nb] = gxb.transpose(1, 0, 2, 3)
    return gx


def conv2d_weight_backward(x, w, gy):
    """Gradients w.r.t. (w, b) only (training path where x is a constant)."""
    n, c_in, h, wd = x.shape
    c_out = w.shape[0]
    wp = wd + 2
    gw = np.zeros((c_out, c_in, 3, 3), dtype=np.float64)
    for st in range(0, n, _CONV_CHUNK):
        xb = x[st:st + _CONV_CHUNK]
        gyb = gy[st:st + _CONV_CHUNK]
        f = _to_padded_cm(xb)
        g = _to_padded_cm(gyb)
        m = f.shape[1]
        for di in range(3):
            for dj in range(3):
                s = (di - 1) * wp + (dj - 1)
                if s >= 0:
                    gw[:, :, di, dj] += g[:, :m - s] @ f[:, s:].T
                else:
                    gw[:, :, di, dj] += g[:, -s:] @ f[:, :m + s].T
    return gw.astype(w.dtype), gy.sum(axis=(0, 2, 3))


def conv2d_backward(x, w, gy):
    """Gradients of conv2d_forward w.r.t. (x, w, b)."""
    gw, gb = conv2d_weight_backward(x, w, gy)
    return conv2d_input_backward(w, gy), gw, gb


# ---------------------------------------------------------------------------
# batch normalisation (per channel over N, H, W)
# ---------------------------------------------------------------------------

def batchnorm_forward(x, gamma, beta, running_mean, running_var, train: bool):
    """Per-channel batchnorm with a train/eval switch.

    Training normalises with (biased) batch statistics and updates the
    running buffers in place with momentum 0.1; eval uses the frozen
    running statistics so probe passes are deterministic per image.
    Returns (y, cache) where cache feeds batchnorm_backward.
    """
    axes = (0, 2, 3)
    gshape = (1, -1, 1, 1)
    if train:
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= 1.0 - BN_MOMENTUM
        running_mean += BN_MOMENTUM * mean
        running_var *= 1.0 - BN_MOMENTUM
        running_var += BN_MOMENTUM * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean.reshape(gshape)) * inv_std.reshape(gshape)
    y = gamma.reshape(gshape) * xhat + beta.reshape(gshape)
    return y.astype(x.dtype), (xhat, inv_std, gamma, train)


def batchnorm_backward(cache, gy):
    """Gradients w.r.t. (x, gamma, beta)."""
    xhat, inv_std, gamma, train = cache
    gshape = (1, -1, 1, 1)
    axes = (0, 2, 3)
    ggamma = (gy * xhat).sum(axis=axes)
    gbeta = gy.sum(axis=axes)
    scale = (gamma * inv_std).reshape(gshape)
    if not train:
        return gy * scale, ggamma, gbeta
    m = gy.shape[0] * gy.shape[2] * gy.shape[3]
    gx = scale * (
        gy
        - gbeta.reshape(gshape) / m
        - xhat * ggamma.reshape(gshape) / m
    )
    return gx.astype(gy.dtype), ggamma, gbeta


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def gelu_forward(x):
    """Exact GELU: x * Phi(x) with Phi the standard normal CDF."""
    return (x * ndtr(x)).astype(x.dtype)


def gelu_forward_cached(x):
    """(y, Phi(x)) so the backward can skip re-evaluating the CDF."""
    cdf = ndtr(x).astype(x.dtype)
    return x * cdf, cdf


def gelu_backward(x, gy, cdf=None):
    if cdf is None:
        cdf = ndtr(x)
    phi = np.exp(-0.5 * x * x) * _INV_SQRT_2PI
    return (gy * (cdf + x * phi)).astype(x.dtype)


# ---------------------------------------------------------------------------
# pooling / upsampling
# ---------------------------------------------------------------------------

def maxpool2_forward(x):
    """2x2 max pooling, stride 2. Returns (y, argmax) with argmax in 0..3.

    Ties pick the lowest window index (row-major), so the gradient routes
    exactly one unit per pooling window.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    cand = np.stack(
        [x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2],
         x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]]
    )
    idx = cand.argmax(axis=0)
    y = np.take_along_axis(cand, idx[None], axis=0)[0]
    return np.ascontiguousarray(y), idx


def maxpool2_backward(idx, gy, in_shape):
    gx = np.zeros(in_shape, dtype=gy.dtype)
    views = (gx[:, :, 0::2, 0::2], gx[:, :, 0::2, 1::2],
             gx[:, :, 1::2, 0::2], gx[:, :, 1::2, 1::2])
    for p, view in enumerate(views):
        view += np.where(idx == p, gy, 0)
    return gx


def upsample2_forward(x):
    """Nearest-neighbour 2x upsampling."""
    n, c, h, w = x.shape
    out = np.empty((n, c, h, 2, w, 2), dtype=x.dtype)
    out[...] = x[:, :, :, None, :, None]
    return out.reshape(n, c, 2 * h, 2 * w)


def upsample2_backward(gy):
    n, c, h2, w2 = gy.shape
    return gy.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))


# ---------------------------------------------------------------------------
# linear
# ---------------------------------------------------------------------------

def linear_forward(x, w, b):
    """Affine map: x (N, in) @ w (out, in)^T + b."""
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input dim {x.shape[1]} != weight in-dim {w.shape[1]}")
    return x @ w.T + b


def linear_backward(x, w, gy):
    return gy @ w, gy.T @ x, gy.sum(axis=0)


# ---------------------------------------------------------------------------
# softmax family (numerically stable: max subtraction, no -inf on finite input)
# ---------------------------------------------------------------------------

def log_softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(x):
    return np.exp(log_softmax(x))


def cross_entropy_forward(logits, onehot):
    """Per-row cross-entropy of softmax(logits) against a one-hot target."""
    if logits.shape != onehot.shape:
        raise ShapeError(f"cross_entropy: {logits.shape} vs {onehot.shape}")
    return -(onehot * log_softmax(logits)).sum(axis=-1)


def cross_entropy_backward(logits, onehot, gy):
    """gy is the per-row upstream gradient (shape (N,))."""
    return (softmax(logits) - onehot) * np.asarray(gy).reshape(-1, 1)


def softmax_backward(logits, gy):
    p = softmax(logits)
    return p * (gy - (gy * p).sum(axis=-1, keepdims=True))


def log_softmax_backward(logits, gy):
    p = softmax(logits)
    return gy - p * gy.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def mean_sq_forward(x):
    """Mean of squares over all elements (accumulated in float64)."""
    return np.mean(np.square(x), dtype=np.float64).astype(x.dtype)


def mean_sq_backward(x, gy):
    return (2.0 / x.size) * x * gy
