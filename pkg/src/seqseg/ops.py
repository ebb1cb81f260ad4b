"""Differentiable array primitives with hand-written backward passes.

Every forward here has a matching backward that satisfies the chain rule;
backwards recompute cheap intermediates from the saved inputs instead of
carrying opaque cache objects. All functions are pure apart from
batchnorm's running-statistics update in the train phase.
"""

from __future__ import annotations

import functools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, ContractViolation, NumericError
from .tensor import BatchNormParams, KernelBank, check_tensor4

SUPPORTED_STRIDES = (1, 2)
UPSAMPLE_FACTORS = (2, 4, 8)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

def _conv_geometry(h, w, kh, kw, stride, padding):
    if padding == "same":
        ph, pw = kh // 2, kw // 2
    elif padding == "valid":
        ph, pw = 0, 0
    else:
        raise ConfigurationError(f"unknown padding mode {padding!r}")
    h_out = (h + 2 * ph - kh) // stride + 1
    w_out = (w + 2 * pw - kw) // stride + 1
    if h_out < 1 or w_out < 1:
        raise ContractViolation(f"kernel {kh}x{kw} too large for {h}x{w} input ({padding})")
    return ph, pw, h_out, w_out


def _im2col(x, kh, kw, stride, ph, pw, h_out, w_out):
    n, c = x.shape[:2]
    if ph or pw:
        x = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (n, c, h_out, w_out, kh, kw) -> (c*kh*kw, n*h_out*w_out)
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * h_out * w_out)
    return np.ascontiguousarray(cols)


def conv2d(x, k: KernelBank, stride=1, padding="same"):
    """2-D cross-correlation with bias; layout (n, c, h, w)."""
    x = check_tensor4(x, channels=k.in_channels)
    if stride not in SUPPORTED_STRIDES:
        raise ContractViolation(f"stride must be one of {SUPPORTED_STRIDES}, got {stride}")
    n, c, h, w = x.shape
    out_c, _, kh, kw = k.weights.shape
    ph, pw, h_out, w_out = _conv_geometry(h, w, kh, kw, stride, padding)
    cols = _im2col(x, kh, kw, stride, ph, pw, h_out, w_out)
    w_mat = k.weights.reshape(out_c, c * kh * kw)
    y = w_mat @ cols + k.bias[:, None]
    return y.reshape(out_c, n, h_out, w_out).transpose(1, 0, 2, 3)


def conv2d_backward(gy, x, k: KernelBank, stride=1, padding="same"):
    """Gradients (dx, dw, db) of sum(gy * conv2d(x, k))."""
    n, c, h, w = x.shape
    out_c, _, kh, kw = k.weights.shape
    ph, pw, h_out, w_out = _conv_geometry(h, w, kh, kw, stride, padding)
    if gy.shape != (n, out_c, h_out, w_out):
        raise ContractViolation(f"gy shape {gy.shape} != {(n, out_c, h_out, w_out)}")

    gy_mat = np.ascontiguousarray(gy.transpose(1, 0, 2, 3)).reshape(out_c, -1)
    db = gy_mat.sum(axis=1)

    cols = _im2col(x, kh, kw, stride, ph, pw, h_out, w_out)
    dw = (gy_mat @ cols.T).reshape(out_c, c, kh, kw)

    w_mat = k.weights.reshape(out_c, c * kh * kw)
    # scatter columns back: one shifted slice-add per kernel offset
    p = (w_mat.T @ gy_mat).reshape(c, kh, kw, n, h_out, w_out)
    dxp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=p.dtype)
    for ki in range(kh):
        for kj in range(kw):
            dxp[:, :, ki:ki + stride * h_out:stride, kj:kj + stride * w_out:stride] += (
                p[:, ki, kj].transpose(1, 0, 2, 3)
            )
    dx = dxp[:, :, ph:ph + h, pw:pw + w] if (ph or pw) else dxp
    return dx, dw, db


# ---------------------------------------------------------------------------
# 2x2 max pooling
# ---------------------------------------------------------------------------

def maxpool2(x):
    """Halve spatial dims with a 2x2/stride-2 max; also return the argmax map.

    Odd inputs are padded bottom/right with -inf before pooling.
    """
    x = check_tensor4(x)
    n, c, h, w = x.shape
    hp, wp = h + h % 2, w + w % 2
    if hp != h or wp != w:
        x = np.pad(x, ((0, 0), (0, 0), (0, hp - h), (0, wp - w)), constant_values=-np.inf)
    win = x.reshape(n, c, hp // 2, 2, wp // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, hp // 2, wp // 2, 4)
    arg = win.argmax(axis=-1).astype(np.uint8)
    y = np.take_along_axis(win, arg[..., None].astype(np.intp), axis=-1)[..., 0]
    return y, arg


def maxpool2_backward(gy, arg, input_shape):
    """Route gy to argmax positions; gradient mass is conserved."""
    n, c, h, w = input_shape
    hp, wp = h + h % 2, w + w % 2
    flat = np.zeros((n, c, hp // 2, wp // 2, 4), dtype=gy.dtype)
    np.put_along_axis(flat, arg[..., None].astype(np.intp), gy[..., None], axis=-1)
    dxp = flat.reshape(n, c, hp // 2, wp // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    dxp = dxp.reshape(n, c, hp, wp)
    return dxp[:, :, :h, :w] if (hp != h or wp != w) else dxp


# ---------------------------------------------------------------------------
# fixed bilinear upsampling
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def _interp_matrix(n_in, factor):
    """Row-interpolation matrix, sample centers at pixel centers, edges clamped."""
    m = np.zeros((n_in * factor, n_in))
    for i_out in range(n_in * factor):
        src = (i_out + 0.5) / factor - 0.5
        i0 = int(np.floor(src))
        if i0 < 0:
            m[i_out, 0] = 1.0
        elif i0 >= n_in - 1:
            m[i_out, n_in - 1] = 1.0
        else:
            t = src - i0
            m[i_out, i0] = 1.0 - t
            m[i_out, i0 + 1] = t
    m.setflags(write=False)
    return m


def bilinear_upsample(x, factor):
    """Fixed (never trained) bilinear upsampling by 2, 4 or 8."""
    if factor not in UPSAMPLE_FACTORS:
        raise ConfigurationError(f"upsample factor must be one of {UPSAMPLE_FACTORS}")
    x = check_tensor4(x)
    mh = _interp_matrix(x.shape[2], factor).astype(x.dtype, copy=False)
    mw = _interp_matrix(x.shape[3], factor).astype(x.dtype, copy=False)
    return np.matmul(np.matmul(mh, x), mw.T)


def bilinear_upsample_backward(gy, factor, input_hw):
    """Transpose of the fixed linear upsampling map."""
    h, w = input_hw
    mh = _interp_matrix(h, factor).astype(gy.dtype, copy=False)
    mw = _interp_matrix(w, factor).astype(gy.dtype, copy=False)
    return np.matmul(np.matmul(mh.T, gy), mw)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def batchnorm(x, p: BatchNormParams, phase):
    """Normalize per channel. Train phase also updates running stats in place."""
    x = check_tensor4(x, channels=p.channels)
    if phase == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        p.running_mean *= 1.0 - p.momentum
        p.running_mean += p.momentum * mean
        p.running_var *= 1.0 - p.momentum
        p.running_var += p.momentum * var
    elif phase == "infer":
        mean, var = p.running_mean, p.running_var
    else:
        raise ConfigurationError(f"phase must be 'train' or 'infer', got {phase!r}")
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
    return p.gamma[:, None, None] * xhat + p.beta[:, None, None]


def batchnorm_backward(gy, x, p: BatchNormParams, phase):
    """Gradients (dx, dgamma, dbeta); batch statistics recomputed from x."""
    if phase == "train":
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
    else:
        mean, var = p.running_mean, p.running_var
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = (x - mean[:, None, None]) * inv_std[:, None, None]
    dbeta = gy.sum(axis=(0, 2, 3))
    dgamma = (gy * xhat).sum(axis=(0, 2, 3))
    if phase == "train":
        m = x.shape[0] * x.shape[2] * x.shape[3]
        dx = (p.gamma * inv_std / m)[:, None, None] * (
            m * gy - dbeta[:, None, None] - xhat * dgamma[:, None, None]
        )
    else:
        dx = gy * (p.gamma * inv_std)[:, None, None]
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# pointwise nonlinearities
# ---------------------------------------------------------------------------

def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_POINTWISE = {
    "relu": lambda x: np.maximum(x, 0.0),
    "sigmoid": sigmoid,
    "tanh": np.tanh,
}


def pointwise(x, f):
    """Elementwise relu / sigmoid / tanh."""
    try:
        fn = _POINTWISE[f]
    except KeyError:
        raise ConfigurationError(f"unknown pointwise function {f!r}") from None
    return fn(np.asarray(x))


def pointwise_backward(gy, x, f):
    if f == "relu":
        return gy * (x > 0)
    if f == "sigmoid":
        s = sigmoid(x)
        return gy * s * (1.0 - s)
    if f == "tanh":
        t = np.tanh(x)
        return gy * (1.0 - t * t)
    raise ConfigurationError(f"unknown pointwise function {f!r}")


# ---------------------------------------------------------------------------
# softmax over channels
# ---------------------------------------------------------------------------

def softmax_channels(logits):
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    logits = check_tensor4(logits)
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_channels_backward(gy, y):
    """Backward given the forward output y."""
    return y * (gy - (gy * y).sum(axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# finite-difference harness
# ---------------------------------------------------------------------------

def finite_diff_check(f, wrt, analytic, eps=1e-5, rng=None, max_coords=200):
    """Max relative error between `analytic` and central differences of f.

    f is a zero-argument callable returning a scalar; it must read `wrt`,
    which is perturbed in place one coordinate at a time. For arrays larger
    than max_coords a random subsample of coordinates is checked.
    """
    if not 1e-6 <= eps <= 1e-4:
        raise ConfigurationError(f"eps must be in [1e-6, 1e-4], got {eps}")
    wrt = np.asarray(wrt)
    analytic = np.asarray(analytic)
    if wrt.shape != analytic.shape:
        raise ContractViolation(
            f"analytic gradient shape {analytic.shape} != parameter shape {wrt.shape}"
        )
    size = wrt.size
    if size <= max_coords:
        coords = np.arange(size)
    else:
        if rng is None:
            rng = np.random.default_rng(0)
        coords = rng.choice(size, size=max_coords, replace=False)

    flat = wrt.reshape(-1)
    worst = 0.0
    for idx in coords:
        orig = flat[idx]
        flat[idx] = orig + eps
        f_plus = f()
        flat[idx] = orig - eps
        f_minus = f()
        flat[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        if not np.isfinite(numeric):
            raise NumericError("non-finite numeric gradient in finite-difference check")
        a = analytic.reshape(-1)[idx]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst
