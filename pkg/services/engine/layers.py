"""
Forward/backward kernels for the supported layer kinds.

Every forward returns (out, cache); every backward takes (dout, cache) and
returns dx plus a dict of parameter gradients keyed by the short parameter
name ('weight', 'bias', 'gamma', 'beta').
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from shared.errors import ShapeError


def dense_forward(x, w, b):
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense layer expects (N, {w.shape[0]}), got {x.shape}")
    out = x @ w + b
    return out, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    dx = dout @ w.T
    dw = x.T @ dout
    db = dout.sum(axis=0)
    return dx, {'weight': dw, 'bias': db}


def conv_forward(x, w, b, stride=1, padding=1):
    if x.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d expects (N, {w.shape[1]}, H, W), got {x.shape}")
    k = w.shape[2]
    p = padding
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    # (N, C, Ho, Wo, k, k)
    windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3]))
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + b[None, :, None, None]
    return out, (x.shape, windows, w, stride, padding)


def conv_backward(dout, cache):
    x_shape, windows, w, stride, p = cache
    n, c, h, wd = x_shape
    k = w.shape[2]
    ho, wo = dout.shape[2], dout.shape[3]

    db = dout.sum(axis=(0, 2, 3))
    dw = np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3]))
    # (N, Ho, Wo, C, k, k)
    dcols = np.tensordot(dout, w, axes=([1], [0]))
    dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    dx = dxp[:, :, p:p + h, p:p + wd]
    return np.ascontiguousarray(dx), {'weight': dw, 'bias': db}


def relu_forward(x):
    active = x > 0
    return x * active, active


def relu_backward(dout, active):
    return dout * active, {}


def maxpool_forward(x, size=2):
    n, c, h, w = x.shape
    if h % size or w % size:
        raise ShapeError(f"maxpool of size {size} needs divisible extents, got {x.shape}")
    ho, wo = h // size, w // size
    xr = x.reshape(n, c, ho, size, wo, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, size * size)
    # first maximum wins on ties
    switch = xr.argmax(axis=-1)
    out = np.take_along_axis(xr, switch[..., None], axis=-1)[..., 0]
    return out, (x.shape, switch, size)


def maxpool_backward(dout, cache):
    shape, switch, size = cache
    n, c, h, w = shape
    ho, wo = h // size, w // size
    dxr = np.zeros((n, c, ho, wo, size * size))
    np.put_along_axis(dxr, switch[..., None], dout[..., None], axis=-1)
    dx = dxr.reshape(n, c, ho, wo, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
    return dx, {}


def _bn_axes(x):
    if x.ndim == 2:
        return (0,), (1, -1)
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    raise ShapeError(f"batchnorm expects 2-D or 4-D input, got {x.ndim}-D")


def batch_moments(x):
    """Per-channel mean and biased variance."""
    axes, _ = _bn_axes(x)
    return x.mean(axis=axes), x.var(axis=axes)


def batchnorm_forward(x, gamma, beta, mean, var, epsilon, batch_stats):
    """Normalize with (mean, var). `batch_stats` marks that they came from x itself."""
    axes, bshape = _bn_axes(x)
    if mean.shape[0] != x.shape[1]:
        raise ShapeError(f"batchnorm statistics have {mean.shape[0]} channels, input has {x.shape[1]}")
    inv_std = 1.0 / np.sqrt(var + epsilon)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.reshape(bshape) * xhat + beta.reshape(bshape)
    return out, (xhat, inv_std, gamma, axes, bshape, batch_stats)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, axes, bshape, batch_stats = cache
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma.reshape(bshape)
    if batch_stats:
        m = xhat.size // xhat.shape[1]
        sum_dxhat = dxhat.sum(axis=axes).reshape(bshape)
        sum_dxhat_xhat = (dxhat * xhat).sum(axis=axes).reshape(bshape)
        dx = inv_std.reshape(bshape) / m * (m * dxhat - sum_dxhat - xhat * sum_dxhat_xhat)
    else:
        # injected or running statistics are constants
        dx = dxhat * inv_std.reshape(bshape)
    return dx, {'gamma': dgamma, 'beta': dbeta}
