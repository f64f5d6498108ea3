"""NCHW numeric kernels and their vector-Jacobian products.

Feature maps are plain 4-D numpy arrays laid out as (batch, channels, height,
width).  Kernels accumulate in float64 and return float32 unless one of the
operands is already float64, in which case the result stays float64 (the
gradient checker relies on this).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import ConfigError, ShapeError

__all__ = [
    "as_tensor4",
    "out_size",
    "conv2d",
    "conv2d_backward",
    "batchnorm_infer",
    "batchnorm_backward",
    "silu",
    "silu_backward",
    "upsample_nearest",
    "upsample_backward",
    "concat_channels",
    "add",
    "maxpool2d",
    "maxpool2d_backward",
    "channel_slice",
]

_AXES = ("n", "c", "h", "w")


def as_tensor4(x, name="input"):
    """Validate that `x` is a non-empty NCHW array and return it as ndarray."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name}: expected 4 dimensions (n, c, h, w), got {x.ndim}")
    for axis, size in zip(_AXES, x.shape):
        if size < 1:
            raise ShapeError(f"{name}: axis {axis} has size {size}, must be >= 1")
    return x


def _result_dtype(*arrays):
    if any(np.asarray(a).dtype == np.float64 for a in arrays if a is not None):
        return np.float64
    return np.float32


def out_size(size, k, s, p):
    """Spatial output length of a k-window with stride s and padding p."""
    return (size + 2 * p - k) // s + 1


def _check_conv(x, weight, bias, stride, padding, groups):
    x = as_tensor4(x)
    weight = np.asarray(weight)
    if weight.ndim != 4:
        raise ShapeError(f"weight: expected 4 dimensions, got {weight.ndim}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ConfigError(f"padding must be >= 0, got {padding}")
    if groups < 1:
        raise ConfigError(f"groups must be >= 1, got {groups}")
    c_out, c_per_group, kh, kw = weight.shape
    c_in = x.shape[1]
    if c_in % groups:
        raise ConfigError(f"groups={groups} does not divide input channels {c_in}")
    if c_out % groups:
        raise ConfigError(f"groups={groups} does not divide output channels {c_out}")
    if c_per_group * groups != c_in:
        raise ShapeError(
            f"axis c: input has {c_in} channels but weight expects "
            f"{c_per_group * groups} ({c_per_group} per group x {groups} groups)"
        )
    if kh != kw:
        raise ShapeError(f"weight: only square kernels are supported, got {kh}x{kw}")
    if bias is not None and np.shape(bias) != (c_out,):
        raise ShapeError(f"bias: expected shape ({c_out},), got {np.shape(bias)}")
    ho = out_size(x.shape[2], kh, stride, padding)
    wo = out_size(x.shape[3], kw, stride, padding)
    if ho < 1:
        raise ShapeError(f"axis h: size {x.shape[2]} too small for kernel {kh} with padding {padding}")
    if wo < 1:
        raise ShapeError(f"axis w: size {x.shape[3]} too small for kernel {kw} with padding {padding}")
    return x, weight, ho, wo


def _padded(x, p, value=0.0):
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=value)


def _windows(xp, k, s, ho, wo):
    # (n, c, ho, wo, k, k) strided view, no copy
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, : s * ho : s, : s * wo : s]


def _is_depthwise(c_in, c_out, groups):
    return groups == c_in == c_out and groups > 1


def conv2d(x, weight, bias=None, stride=1, padding=0, groups=1):
    """2-D cross-correlation.

    `weight` has shape (c_out, c_in // groups, k, k). Output spatial size is
    ``(h + 2*padding - k) // stride + 1``.
    """
    x, weight, ho, wo = _check_conv(x, weight, bias, stride, padding, groups)
    dtype = _result_dtype(x, weight, bias)
    n, c_in = x.shape[:2]
    c_out, cg, k, _ = weight.shape
    xp = _padded(x.astype(np.float64, copy=False), padding)
    w = weight.astype(np.float64, copy=False)

    if _is_depthwise(c_in, c_out, groups):
        out = np.zeros((n, c_out, ho, wo))
        for ky in range(k):
            for kx in range(k):
                patch = xp[:, :, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride]
                out += w[:, 0, ky, kx][None, :, None, None] * patch
    else:
        cols = _windows(xp, k, stride, ho, wo)
        og = c_out // groups
        out = np.empty((n, c_out, ho, wo))
        for g in range(groups):
            cols_g = cols[:, g * cg : (g + 1) * cg]
            w_g = w[g * og : (g + 1) * og]
            # (og, n, ho, wo)
            res = np.tensordot(w_g, cols_g, axes=([1, 2, 3], [1, 4, 5]))
            out[:, g * og : (g + 1) * og] = res.transpose(1, 0, 2, 3)
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)[None, :, None, None]
    return out.astype(dtype, copy=False)


def conv2d_backward(x, weight, grad_out, stride=1, padding=0, groups=1, has_bias=False):
    """Return (grad_input, grad_weight, grad_bias) for :func:`conv2d`.

    grad_bias is None when `has_bias` is false.
    """
    x, weight, ho, wo = _check_conv(x, weight, None, stride, padding, groups)
    grad_out = np.asarray(grad_out)
    expected = (x.shape[0], weight.shape[0], ho, wo)
    if grad_out.shape != expected:
        raise ShapeError(f"upstream gradient: expected shape {expected}, got {grad_out.shape}")
    dtype = _result_dtype(x, weight, grad_out)
    n, c_in, h, w_ = x.shape
    c_out, cg, k, _ = weight.shape
    xp = _padded(x.astype(np.float64, copy=False), padding)
    w = weight.astype(np.float64, copy=False)
    g_out = grad_out.astype(np.float64, copy=False)
    gxp = np.zeros_like(xp)
    gw = np.zeros(weight.shape)

    if _is_depthwise(c_in, c_out, groups):
        for ky in range(k):
            for kx in range(k):
                sl = (slice(None), slice(None),
                      slice(ky, ky + stride * ho, stride), slice(kx, kx + stride * wo, stride))
                gw[:, 0, ky, kx] = np.einsum("nchw,nchw->c", g_out, xp[sl])
                gxp[sl] += w[:, 0, ky, kx][None, :, None, None] * g_out
    else:
        cols = _windows(xp, k, stride, ho, wo)
        og = c_out // groups
        for g in range(groups):
            cin_sl = slice(g * cg, (g + 1) * cg)
            cout_sl = slice(g * og, (g + 1) * og)
            g_g = g_out[:, cout_sl]
            gw[cout_sl] = np.tensordot(g_g, cols[:, cin_sl], axes=([0, 2, 3], [0, 2, 3]))
            # (cg, k, k, n, ho, wo)
            gcols = np.tensordot(w[cout_sl], g_g, axes=([0], [1]))
            for ky in range(k):
                for kx in range(k):
                    gxp[:, cin_sl, ky : ky + stride * ho : stride, kx : kx + stride * wo : stride] += (
                        gcols[:, ky, kx].transpose(1, 0, 2, 3)
                    )
    gx = gxp[:, :, padding : padding + h, padding : padding + w_]
    gb = g_out.sum(axis=(0, 2, 3)).astype(dtype) if has_bias else None
    return gx.astype(dtype), gw.astype(dtype), gb


def _check_bn(x, gamma, beta, mean, var):
    x = as_tensor4(x)
    c = x.shape[1]
    for name, arr in (("gamma", gamma), ("beta", beta), ("running_mean", mean), ("running_var", var)):
        if np.shape(arr) != (c,):
            raise ShapeError(f"{name}: expected length {c} to match axis c, got shape {np.shape(arr)}")
    return x


def _bcast(a):
    return np.asarray(a, dtype=np.float64)[None, :, None, None]


def batchnorm_infer(x, gamma, beta, mean, var, eps=1e-3):
    """Inference-mode batch norm: ``gamma * (x - mean) / sqrt(var + eps) + beta``."""
    x = _check_bn(x, gamma, beta, mean, var)
    dtype = _result_dtype(x, gamma, beta, mean, var)
    inv = 1.0 / np.sqrt(_bcast(var) + eps)
    y = _bcast(gamma) * (x.astype(np.float64) - _bcast(mean)) * inv + _bcast(beta)
    return y.astype(dtype, copy=False)


def batchnorm_backward(x, gamma, mean, var, grad_out, eps=1e-3):
    """Return (grad_input, grad_gamma, grad_beta); running statistics are constants."""
    x = _check_bn(x, gamma, gamma, mean, var)
    dtype = _result_dtype(x, gamma, grad_out)
    g = np.asarray(grad_out, dtype=np.float64)
    inv = 1.0 / np.sqrt(_bcast(var) + eps)
    xhat = (x.astype(np.float64) - _bcast(mean)) * inv
    gx = g * _bcast(gamma) * inv
    return gx.astype(dtype), (g * xhat).sum(axis=(0, 2, 3)).astype(dtype), g.sum(axis=(0, 2, 3)).astype(dtype)


def silu(x):
    x = np.asarray(x)
    dtype = _result_dtype(x)
    x64 = x.astype(np.float64, copy=False)
    return (x64 * expit(x64)).astype(dtype, copy=False)


def silu_backward(x, grad_out):
    x = np.asarray(x)
    x64 = x.astype(np.float64, copy=False)
    sig = expit(x64)
    return (np.asarray(grad_out, dtype=np.float64) * sig * (1.0 + x64 * (1.0 - sig))).astype(
        _result_dtype(x, grad_out), copy=False
    )


def upsample_nearest(x, scale=2):
    """Nearest-neighbour upsampling: out[c, y, x] = in[c, y // scale, x // scale]."""
    x = as_tensor4(x)
    if int(scale) != scale or scale < 2:
        raise ConfigError(f"upsample scale must be an integer >= 2, got {scale}")
    scale = int(scale)
    return np.repeat(np.repeat(x, scale, axis=2), scale, axis=3)


def upsample_backward(grad_out, scale=2):
    n, c, h, w = grad_out.shape
    return grad_out.reshape(n, c, h // scale, scale, w // scale, scale).sum(axis=(3, 5))


def concat_channels(*tensors):
    """Concatenate along the channel axis, first argument first."""
    if len(tensors) < 2:
        raise ConfigError(f"concat needs at least 2 inputs, got {len(tensors)}")
    arrs = []
    for i, t in enumerate(tensors):
        t = np.asarray(t)
        if t.ndim == 4 and t.shape[1] == 0:
            raise ConfigError(f"concat input {i} has zero channels")
        arrs.append(as_tensor4(t, name=f"concat input {i}"))
    ref = arrs[0].shape
    for i, t in enumerate(arrs[1:], start=1):
        for axis in (0, 2, 3):
            if t.shape[axis] != ref[axis]:
                raise ShapeError(
                    f"concat input {i}: axis {_AXES[axis]} is {t.shape[axis]}, input 0 has {ref[axis]}"
                )
    dtype = _result_dtype(*arrs)
    return np.concatenate([a.astype(dtype, copy=False) for a in arrs], axis=1)


def add(a, b):
    a = as_tensor4(a, "a")
    b = as_tensor4(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ, {a.shape} vs {b.shape}")
    return (a.astype(np.float64) + b.astype(np.float64)).astype(_result_dtype(a, b), copy=False)


def maxpool2d(x, k, s=1, p=0):
    x = as_tensor4(x)
    if k < 1 or s < 1 or p < 0:
        raise ConfigError(f"invalid pooling window k={k}, s={s}, p={p}")
    if p > k // 2:
        raise ConfigError(f"padding {p} exceeds half the window size {k}")
    ho, wo = out_size(x.shape[2], k, s, p), out_size(x.shape[3], k, s, p)
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {x.shape[2]}x{x.shape[3]} too small for pooling window {k}")
    xp = _padded(x, p, value=-np.inf)
    return _windows(xp, k, s, ho, wo).max(axis=(4, 5))


def maxpool2d_backward(x, k, s, p, grad_out):
    """Route each upstream gradient to the first maximum of its window."""
    x = as_tensor4(x)
    n, c, h, w = x.shape
    ho, wo = grad_out.shape[2:]
    xp = _padded(x.astype(np.float64), p, value=-np.inf)
    win = _windows(xp, k, s, ho, wo).reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    ky, kx = np.divmod(arg, k)
    rows = ky + (np.arange(ho) * s)[None, None, :, None]
    cols = kx + (np.arange(wo) * s)[None, None, None, :]
    gxp = np.zeros(xp.shape)
    nn_, cc = np.meshgrid(np.arange(n), np.arange(c), indexing="ij")
    np.add.at(gxp, (nn_[..., None, None], cc[..., None, None], rows, cols), np.asarray(grad_out, np.float64))
    return gxp[:, :, p : p + h, p : p + w].astype(_result_dtype(x, grad_out))


def channel_slice(x, start, stop):
    x = as_tensor4(x)
    if not 0 <= start < stop <= x.shape[1]:
        raise ShapeError(f"channel slice [{start}, {stop}) out of range for {x.shape[1]} channels")
    return x[:, start:stop]
