"""Layer kernels operating on plain numpy arrays.

Every ``*_forward`` returns ``(output, cache)``; the matching ``*_backward``
consumes that cache. Images and activations are NCHW.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when tensor shapes are inconsistent with a layer."""


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def pool_output_size(size: int, kernel: int, stride: int, ceil_mode: bool) -> int:
    if ceil_mode:
        out = -(-(size - kernel) // stride) + 1
        out = max(out, 1)
        # last window must start inside the input
        if (out - 1) * stride >= size:
            out -= 1
        return out
    return (size - kernel) // stride + 1


# --------------------------------------------------------------------- conv

@dataclass
class ConvCache:
    input_shape: tuple
    cols: np.ndarray
    weights: np.ndarray
    stride: int
    padding: int
    out_hw: tuple


def conv2d_forward(x, weights, bias=None, stride=1, padding=0):
    """2-D cross-correlation via im2col.

    ``weights`` has shape (F, C, kh, kw); ``bias`` is (F,) or None.
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    f, wc, kh, kw = weights.shape
    if wc != c:
        raise ShapeError(
            f"conv2d channel mismatch: input {x.shape} has {c} channels, "
            f"weights {weights.shape} expect {wc}")
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(
            f"padded input {h + 2 * padding}x{w + 2 * padding} smaller than kernel {kh}x{kw}")
    oh = conv_output_size(h, kh, stride, padding)
    ow = conv_output_size(w, kw, stride, padding)
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    # (N, OH, OW, C, kh, kw) -> rows of the patch matrix
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * oh * ow, c * kh * kw)
    out = cols @ weights.reshape(f, -1).T
    if bias is not None:
        out += bias
    out = out.reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    cache = ConvCache((n, c, h, w), cols, weights, stride, padding, (oh, ow))
    return np.ascontiguousarray(out), cache


def conv2d_backward(grad_out, cache: ConvCache | None):
    """Returns ``(grad_input, grad_weights, grad_bias)``."""
    if cache is None:
        raise ValueError("conv2d_backward called without a forward cache")
    n, c, h, w = cache.input_shape
    f, _, kh, kw = cache.weights.shape
    oh, ow = cache.out_hw
    if grad_out.shape != (n, f, oh, ow):
        raise ShapeError(f"grad_out shape {grad_out.shape} != forward output {(n, f, oh, ow)}")
    s, p = cache.stride, cache.padding
    go = grad_out.transpose(0, 2, 3, 1).reshape(-1, f)
    grad_w = (go.T @ cache.cols).reshape(cache.weights.shape)
    grad_b = go.sum(axis=0)
    dcols = (go @ cache.weights.reshape(f, -1)).reshape(n, oh, ow, c, kh, kw)
    dx = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad_out.dtype)
    for i in range(kh):
        for j in range(kw):
            dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if p:
        dx = dx[:, :, p:-p, p:-p]
    return np.ascontiguousarray(dx), grad_w, grad_b


# ------------------------------------------------------------------ maxpool

@dataclass
class PoolCache:
    input_shape: tuple
    argmax: np.ndarray
    kernel: int
    stride: int
    out_hw: tuple


def maxpool_forward(x, kernel=2, stride=2, ceil_mode=False):
    if x.ndim != 4:
        raise ShapeError(f"maxpool expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.shape
    oh = pool_output_size(h, kernel, stride, ceil_mode)
    ow = pool_output_size(w, kernel, stride, ceil_mode)
    if oh < 1 or ow < 1:
        raise ShapeError(f"pool kernel {kernel} does not fit input {h}x{w} without ceil_mode")
    need_h = (oh - 1) * stride + kernel
    need_w = (ow - 1) * stride + kernel
    if need_h > h or need_w > w:
        # clipped windows: padding with -inf never wins the max
        xp = np.full((n, c, max(need_h, h), max(need_w, w)), -np.inf, dtype=x.dtype)
        xp[:, :, :h, :w] = x
    else:
        xp = x
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    flat = win.reshape(n, c, oh, ow, kernel * kernel)
    argmax = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, argmax[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), PoolCache((n, c, h, w), argmax, kernel, stride, (oh, ow))


def maxpool_backward(grad_out, cache: PoolCache | None):
    if cache is None:
        raise ValueError("maxpool_backward called without a forward cache")
    n, c, h, w = cache.input_shape
    k, s = cache.kernel, cache.stride
    oh, ow = cache.out_hw
    dx = np.zeros((n, c, max(h, (oh - 1) * s + k), max(w, (ow - 1) * s + k)), dtype=grad_out.dtype)
    for i in range(k):
        for j in range(k):
            hit = cache.argmax == i * k + j
            dx[:, :, i:i + s * oh:s, j:j + s * ow:s] += np.where(hit, grad_out, 0)
    return np.ascontiguousarray(dx[:, :, :h, :w])


# ---------------------------------------------------------------- batchnorm

@dataclass
class BNCache:
    xhat: np.ndarray
    inv_std: np.ndarray
    gamma: np.ndarray
    axes: tuple
    batch_stats: bool


def _bn_axes(x):
    if x.ndim == 4:
        return (0, 2, 3), (1, -1, 1, 1)
    if x.ndim == 2:
        return (0,), (1, -1)
    raise ShapeError(f"batchnorm expects 2-D or 4-D input, got shape {x.shape}")


def batchnorm_forward(x, gamma, beta, running_mean, running_var, mode="train",
                      momentum=0.9, eps=1e-5, update_running=True):
    """Per-channel batch normalisation.

    In ``train`` mode statistics come from the batch (over N, H, W) and the
    running estimates are blended in place as
    ``running = momentum * running + (1 - momentum) * batch``.
    ``infer`` mode normalises with the running estimates.
    """
    axes, bshape = _bn_axes(x)
    if mode == "train":
        if x.shape[0] < 2:
            raise ValueError("batchnorm in train mode needs a batch of at least 2 samples")
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        if update_running:
            m = x.size // x.shape[1]
            running_mean *= momentum
            running_mean += (1 - momentum) * mean
            running_var *= momentum
            running_var += (1 - momentum) * var * (m / max(m - 1, 1))
    elif mode == "infer":
        mean, var = running_mean, running_var
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
    out = gamma.reshape(bshape) * xhat + beta.reshape(bshape)
    return out.astype(x.dtype, copy=False), BNCache(xhat, inv_std, gamma, axes, mode == "train")


def batchnorm_backward(grad_out, cache: BNCache | None):
    """Returns ``(grad_input, grad_gamma, grad_beta)``."""
    if cache is None:
        raise ValueError("batchnorm_backward called without a forward cache")
    axes = cache.axes
    bshape = (1, -1, 1, 1) if len(axes) == 3 else (1, -1)
    grad_gamma = (grad_out * cache.xhat).sum(axis=axes)
    grad_beta = grad_out.sum(axis=axes)
    dxhat = grad_out * cache.gamma.reshape(bshape)
    inv_std = cache.inv_std.reshape(bshape)
    if not cache.batch_stats:
        return dxhat * inv_std, grad_gamma, grad_beta
    m = grad_out.size // grad_out.shape[1]
    dx = (inv_std / m) * (
        m * dxhat
        - dxhat.sum(axis=axes).reshape(bshape)
        - cache.xhat * (dxhat * cache.xhat).sum(axis=axes).reshape(bshape)
    )
    return dx, grad_gamma, grad_beta


# --------------------------------------------------------------- pointwise

def relu_forward(x):
    mask = x > 0
    return x * mask, mask


def relu_backward(grad_out, mask):
    return grad_out * mask


def dropout(x, rate, mode="train", rng=None):
    """Inverted dropout. Returns ``(output, mask)``; ``mask`` is None when inactive."""
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode != "train" or rate == 0:
        return x, None
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / (1 - rate)
    return x * mask, mask


def dropout_backward(grad_out, mask):
    return grad_out if mask is None else grad_out * mask


def fc_forward(x, weights, bias=None):
    """Affine layer; ``weights`` is (in, out). Inputs with >2 dims are flattened."""
    flat = x.reshape(x.shape[0], -1)
    if flat.shape[1] != weights.shape[0]:
        raise ShapeError(f"fc expects {weights.shape[0]} input features, got {flat.shape[1]}")
    out = flat @ weights
    if bias is not None:
        out += bias
    return out, (x.shape, flat)


def fc_backward(grad_out, cache, weights):
    if cache is None:
        raise ValueError("fc_backward called without a forward cache")
    in_shape, flat = cache
    return (grad_out @ weights.T).reshape(in_shape), flat.T @ grad_out, grad_out.sum(axis=0)


# ----------------------------------------------------------------- softmax

def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean negative log-likelihood of the true class and its logit gradient."""
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    n, c = logits.shape
    if c < 2:
        raise ValueError("softmax cross-entropy needs at least 2 classes")
    if labels.shape != (n,):
        raise ShapeError(f"expected {n} labels, got shape {labels.shape}")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"labels must lie in [0, {c}), got range [{labels.min()}, {labels.max()}]")
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = float(np.mean(log_norm - z[rows, labels]))
    grad = np.exp(z - log_norm[:, None])
    grad[rows, labels] -= 1
    return loss, grad / n
