"""Forward/backward kernels for the fixed adapter architecture (NHWC layout).

Every ``*_forward`` returns ``(out, cache)``; the matching ``*_backward`` takes
the cache and the upstream gradient. Only what the adapter needs is here.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import erf

_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def conv2d_forward(x, weight, bias, stride, pad):
    """Dense convolution. x: (N, H, W, I); weight: (O, I, kh, kw)."""
    kh, kw = weight.shape[2:]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    out = np.tensordot(cols, weight, axes=([3, 4, 5], [1, 2, 3])) + bias
    return out, (cols, xp.shape, weight, stride, pad)


def conv2d_backward(cache, gout):
    cols, xp_shape, weight, stride, pad = cache
    kh, kw = weight.shape[2:]
    ho, wo = gout.shape[1:3]
    gw = np.tensordot(gout, cols, axes=([0, 1, 2], [0, 1, 2]))
    gb = gout.sum(axis=(0, 1, 2))
    gcols = np.tensordot(gout, weight, axes=([3], [0]))  # (N, ho, wo, I, kh, kw)
    gxp = np.zeros(xp_shape)
    for a in range(kh):
        for b in range(kw):
            gxp[:, a : a + stride * ho : stride, b : b + stride * wo : stride, :] += gcols[..., a, b]
    gx = gxp[:, pad : xp_shape[1] - pad, pad : xp_shape[2] - pad, :]
    return gx, gw, gb


def _depthwise_apply(xp, weight, h, w):
    win = sliding_window_view(xp, weight.shape[1:], axis=(1, 2))[:, :h, :w]
    return np.einsum("nyxcab,cab->nyxc", win, weight)


def depthwise_forward(x, weight, bias):
    """Per-channel 'same' correlation. x: (N, h, w, C); weight: (C, k, k), odd k."""
    pad = weight.shape[1] // 2
    h, w = x.shape[1:3]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    return _depthwise_apply(xp, weight, h, w) + bias, (xp, weight)


def depthwise_backward(cache, gout):
    xp, weight = cache
    pad = weight.shape[1] // 2
    h, w = gout.shape[1:3]
    win = sliding_window_view(xp, weight.shape[1:], axis=(1, 2))[:, :h, :w]
    gw = np.einsum("nyxcab,nyxc->cab", win, gout)
    gb = gout.sum(axis=(0, 1, 2))
    # the input gradient is a correlation of the padded upstream with the flipped kernel
    gp = np.pad(gout, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    gx = _depthwise_apply(gp, weight[:, ::-1, ::-1], h, w)
    return gx, gw, gb


def layernorm_forward(x, scale, shift, eps):
    """Normalize over the channel (last) axis at every position."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * scale + shift, (xhat, rstd, scale)


def layernorm_backward(cache, gout):
    xhat, rstd, scale = cache
    gscale = (gout * xhat).sum(axis=(0, 1, 2))
    gshift = gout.sum(axis=(0, 1, 2))
    gxhat = gout * scale
    gx = rstd * (
        gxhat
        - gxhat.mean(axis=-1, keepdims=True)
        - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return gx, gscale, gshift


def linear_forward(x, weight, bias):
    """Pointwise (1x1) projection over the last axis. weight: (O, I)."""
    return x @ weight.T + bias, (x, weight)


def linear_backward(cache, gout):
    x, weight = cache
    gw = gout.reshape(-1, gout.shape[-1]).T @ x.reshape(-1, x.shape[-1])
    gb = gout.sum(axis=tuple(range(gout.ndim - 1)))
    return gout @ weight, gw, gb


def gelu_forward(x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    return x * cdf, (x, cdf)


def gelu_backward(cache, gout):
    x, cdf = cache
    return gout * (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x))


def spatial_softmax_forward(logits):
    """Softmax over all spatial positions of each map. logits: (N, h, w, K) -> (N, K, h, w)."""
    n, h, w, k = logits.shape
    z = logits.transpose(0, 3, 1, 2).reshape(n, k, h * w)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    return p.reshape(n, k, h, w)


def spatial_softmax_backward(probs, gout):
    n, k, h, w = probs.shape
    dot = (gout * probs).sum(axis=(2, 3), keepdims=True)
    gz = probs * (gout - dot)
    return gz.transpose(0, 2, 3, 1)
