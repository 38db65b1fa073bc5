"""Forward kernels and their adjoints.

All image tensors are NCHW.  Convolution weights are ``[C_out, C_in, k, k]``;
``deconv2d`` takes the weight of the convolution it transposes, i.e.
``[C_in, C_out, k, k]`` from the deconvolution's point of view.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, _record

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check(cond, msg):
    if not cond:
        raise ValueError(msg)


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def deconv_out_size(size, k, stride, pad):
    return (size - 1) * stride - 2 * pad + k


def im2col(x, k, stride, pad):
    """``[N,C,H,W] -> [N*Ho*Wo, C*k*k]`` patch matrix."""
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    win = sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)


def col2im(cols, shape, k, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patches back into ``shape``."""
    n, c, h, w = shape
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w, k, stride, pad)
    cols = cols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 4, 5, 1, 2)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    hs, ws = (ho - 1) * stride + 1, (wo - 1) * stride + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + hs : stride, j : j + ws : stride] += cols[:, :, i, j]
    return out[:, :, pad : pad + h, pad : pad + w]


def _conv_geometry(x, w, b, stride, pad):
    _check(x.ndim == 4, f"input must be NCHW, got rank {x.ndim}")
    _check(w.ndim == 4 and w.shape[2] == w.shape[3], f"weight must be [C_out,C_in,k,k], got {w.shape}")
    _check(stride >= 1, f"stride must be positive, got {stride}")
    _check(pad >= 0, f"pad must be nonnegative, got {pad}")
    k = w.shape[2]
    _check(x.shape[2] + 2 * pad >= k, f"input height {x.shape[2]} + 2*pad < kernel {k}")
    _check(x.shape[3] + 2 * pad >= k, f"input width {x.shape[3]} + 2*pad < kernel {k}")
    if b is not None:
        _check(b.ndim == 1, f"bias must be rank 1, got {b.shape}")
    return k


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, pad=0) -> Tensor:
    xd, wd = x.data, weight.data
    k = _conv_geometry(xd, wd, None if bias is None else bias.data, stride, pad)
    n, c, h, w_ = xd.shape
    cout = wd.shape[0]
    _check(wd.shape[1] == c, f"channel mismatch: input C_in={c}, weight C_in={wd.shape[1]}")
    if bias is not None:
        _check(bias.shape[0] == cout, f"bias length {bias.shape[0]} != C_out {cout}")
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(w_, k, stride, pad)

    cols = im2col(xd, k, stride, pad)
    wm = wd.reshape(cout, -1)
    out = cols @ wm.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(n, ho, wo, cout).transpose(0, 3, 1, 2))

    def back(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gx = col2im(gm @ wm, xd.shape, k, stride, pad) if x.requires_grad or x._backward else None
        gw = (gm.T @ cols).reshape(wd.shape)
        gb = gm.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, back)


def deconv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, pad=0) -> Tensor:
    """Transposed convolution: the adjoint of ``conv2d`` with the same weight."""
    xd, wd = x.data, weight.data
    _check(xd.ndim == 4, f"input must be NCHW, got rank {xd.ndim}")
    _check(wd.ndim == 4 and wd.shape[2] == wd.shape[3], f"weight must be [C_in,C_out,k,k], got {wd.shape}")
    _check(stride >= 1 and pad >= 0, f"bad geometry stride={stride} pad={pad}")
    n, cin, h, w_ = xd.shape
    k = wd.shape[2]
    _check(wd.shape[0] == cin, f"channel mismatch: input C_in={cin}, weight C_in={wd.shape[0]}")
    cout = wd.shape[1]
    if bias is not None:
        _check(bias.shape == (cout,), f"bias shape {bias.shape} != ({cout},)")
    ho, wo = deconv_out_size(h, k, stride, pad), deconv_out_size(w_, k, stride, pad)
    _check(ho >= 1 and wo >= 1, f"output extent {ho}x{wo} is empty")
    _check(conv_out_size(ho, k, stride, pad) == h, f"height {h} not reachable with k={k}, stride={stride}, pad={pad}")

    wm = wd.reshape(cin, -1)
    xm = xd.transpose(0, 2, 3, 1).reshape(-1, cin)
    out = col2im(xm @ wm, (n, cout, ho, wo), k, stride, pad)
    if bias is not None:
        out += bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def back(g):
        gcols = im2col(g, k, stride, pad)
        gx = (gcols @ wm.T).reshape(n, h, w_, cin).transpose(0, 3, 1, 2)
        gw = (xm.T @ gcols).reshape(wd.shape)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, back)


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, running_mean, running_var,
                mode="train", momentum=BN_MOMENTUM, eps=BN_EPS, update_stats=True) -> Tensor:
    """Per-channel normalization over batch and spatial axes.

    ``running_mean`` / ``running_var`` are numpy arrays updated in place in
    train mode (unless ``update_stats`` is false).  Inputs of rank 2 ([N,C])
    are normalized over the batch axis only.
    """
    xd = x.data
    _check(xd.ndim in (2, 4), f"batchnorm input must be [N,C] or NCHW, got rank {xd.ndim}")
    c = xd.shape[1]
    _check(gamma.shape == (c,) and beta.shape == (c,), f"gamma/beta must have shape ({c},)")
    axes = (0,) if xd.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if xd.ndim == 2 else (1, c, 1, 1)
    m = xd.size // c

    if mode == "train":
        _check(xd.shape[0] >= 2, "batchnorm in train mode needs batch size >= 2")
        mu = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        if update_stats:
            running_mean *= 1 - momentum
            running_mean += momentum * mu
            running_var *= 1 - momentum
            running_var += momentum * var * (m / max(m - 1, 1))
    elif mode == "eval":
        mu, var = running_mean, running_var
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")

    inv_std = (1.0 / np.sqrt(var + eps)).astype(xd.dtype)
    xhat = (xd - mu.reshape(bshape).astype(xd.dtype)) * inv_std.reshape(bshape)
    g_ = gamma.data.reshape(bshape)
    out = xhat * g_ + beta.data.reshape(bshape)

    def back(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * g_
        if mode == "train":
            dx = (inv_std.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            dx = dxhat * inv_std.reshape(bshape)
        return dx, dgamma, dbeta

    return _record(out, (x, gamma, beta), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _record(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor, slope=0.2) -> Tensor:
    scale = np.where(x.data > 0, 1.0, slope).astype(x.dtype)
    return _record(x.data * scale, (x,), lambda g: (g * scale,))


def activation(x: Tensor, kind="relu", slope=0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "tanh":
        return tanh(x)
    raise ValueError(f"unknown activation {kind!r}")


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _record(y, (x,), lambda g: (g * (1 - y * y),))


def maxpool2d(x: Tensor, window=2) -> Tensor:
    """Non-overlapping max pooling; ties go to the first row-major index."""
    xd = x.data
    _check(xd.ndim == 4, f"input must be NCHW, got rank {xd.ndim}")
    n, c, h, w = xd.shape
    _check(window >= 1, f"window must be positive, got {window}")
    _check(h % window == 0, f"height {h} not divisible by window {window}")
    _check(w % window == 0, f"width {w} not divisible by window {window}")
    ho, wo = h // window, w // window
    blocks = xd.reshape(n, c, ho, window, wo, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, -1)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gb = np.zeros_like(blocks)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, ho, wo, window, window).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return _record(out, (x,), back)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    xd, wd = x.data, weight.data
    _check(xd.ndim == 2, f"linear input must be [N,D], got shape {xd.shape}")
    _check(wd.ndim == 2 and wd.shape[1] == xd.shape[1],
           f"inner dimension mismatch: input D={xd.shape[1]}, weight {wd.shape}")
    if bias is not None:
        _check(bias.shape == (wd.shape[0],), f"bias shape {bias.shape} != ({wd.shape[0]},)")
    out = xd @ wd.T
    if bias is not None:
        out = out + bias.data

    def back(g):
        return g @ wd, g.T @ xd, (g.sum(axis=0) if bias is not None else None)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, parents, back)


def dropout(x: Tensor, rate, mode="train", rng=None) -> Tensor:
    """Inverted dropout; identity in eval mode or at rate 0."""
    _check(0 <= rate < 1, f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0:
        return x
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    keep = rng.random(x.shape) >= rate
    scale = (keep / (1 - rate)).astype(x.dtype)
    return _record(x.data * scale, (x,), lambda g: (g * scale,))


def concat(tensors, axis=1) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    bounds = np.cumsum([0] + [d.shape[axis] for d in datas])

    def back(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(datas)))

    return _record(out, tuple(tensors), back)


def flatten(x: Tensor) -> Tensor:
    """Row-major, channel-major flattening to ``[N, -1]``."""
    return x.reshape(x.shape[0], -1)


def mse_loss(pred: Tensor, target) -> Tensor:
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    _check(pred.shape == t.shape, f"shape mismatch: pred {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    n = diff.size
    loss = np.asarray((diff * diff).sum() / n, dtype=pred.dtype)

    def back(g):
        gp = (2.0 / n) * g * diff
        return (gp.astype(pred.dtype), -gp if isinstance(target, Tensor) else None)

    parents = (pred, target) if isinstance(target, Tensor) else (pred,)
    return _record(loss, parents, back)


def softmax(logits):
    """Row-wise softmax of a numpy array or tensor (no graph)."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_nll(logits: Tensor, labels, weights=None, return_probs=False, weighted_mean=False):
    """Mean over samples of ``weight * -log softmax(logits)[label]``.

    With ``weighted_mean`` the sum is divided by the total weight instead of
    the sample count.
    """
    z = logits.data
    _check(z.ndim == 2, f"logits must be [N,K], got shape {z.shape}")
    n, k = z.shape
    labels = np.asarray(labels)
    _check(labels.shape == (n,), f"labels must have shape ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"label {bad} out of range [0, {k})")
    labels = labels.astype(np.int64)
    w = np.ones(n, dtype=z.dtype) if weights is None else np.asarray(weights, dtype=z.dtype)
    _check(w.shape == (n,), f"weights must have shape ({n},), got {w.shape}")
    _check(bool(np.all(w >= 0)), "weights must be nonnegative")

    logp = log_softmax(z)
    probs = np.exp(logp)
    picked = logp[np.arange(n), labels]
    denom = float(w.sum()) if weighted_mean else n
    _check(denom > 0, "weights must not all be zero")
    loss = np.asarray(-(w * picked).sum() / denom, dtype=z.dtype)

    def back(g):
        onehot = np.zeros_like(z)
        onehot[np.arange(n), labels] = 1
        return ((g / denom) * w[:, None] * (probs - onehot),)

    out = _record(loss, (logits,), back)
    return (out, probs) if return_probs else out


def soft_cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean over samples of ``-sum_k target_k log softmax(logits)_k``.

    ``target`` is a distribution over the K classes, shared by all rows
    (shape ``[K]``) or given per row (``[N,K]``).
    """
    z = logits.data
    _check(z.ndim == 2, f"logits must be [N,K], got shape {z.shape}")
    n, k = z.shape
    t = np.broadcast_to(np.asarray(target, dtype=z.dtype), (n, k))
    logp = log_softmax(z)
    probs = np.exp(logp)
    loss = np.asarray(-(t * logp).sum() / n, dtype=z.dtype)

    def back(g):
        return ((g / n) * (probs * t.sum(axis=1, keepdims=True) - t),)

    return _record(loss, (logits,), back)
