"""Differentiable layer primitives for NCHW image tensors."""

from typing import Optional

import numpy as np

from .tensor import Function, Tensor


class ShapeError(ValueError):
    pass


def _pad(x: np.ndarray, pad: int) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


class Conv2d(Function):
    def forward(self, x, w, b, stride=1, pad=0):
        if x.ndim != 4 or w.ndim != 4:
            raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {w.shape}")
        n, c, h, wd = x.shape
        o, cw, kh, kw = w.shape
        if c != cw:
            raise ShapeError(f"conv2d input has {c} channels but weight expects {cw}")
        if b is not None and b.shape != (o,):
            raise ShapeError(f"conv2d bias shape {b.shape} != ({o},)")
        hp, wp = h + 2 * pad, wd + 2 * pad
        if hp < kh or wp < kw:
            raise ShapeError(f"padded input {hp}x{wp} smaller than kernel {kh}x{kw}")
        xp = _pad(x, pad)
        oh, ow = (hp - kh) // stride + 1, (wp - kw) // stride + 1
        # im2col with the reduction axis ordered (kh, kw, c) so that each
        # kernel offset owns a contiguous (c, oh, ow) slab
        cols = np.empty((n, kh, kw, c, oh, ow), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, i, j] = xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
        cols = cols.reshape(n, kh * kw * c, oh * ow)
        w2 = w.transpose(0, 2, 3, 1).reshape(o, -1)
        out = (w2 @ cols).reshape(n, o, oh, ow)
        if b is not None:
            out += b[None, :, None, None]
        self.cols, self.w2, self.w_shape, self.xp_shape = cols, w2, w.shape, xp.shape
        self.stride, self.pad, self.has_bias = stride, pad, b is not None
        return out

    def backward(self, g):
        s, pad = self.stride, self.pad
        o, c, kh, kw = self.w_shape
        n, _, oh, ow = g.shape
        g3 = g.reshape(n, o, oh * ow)
        gw = gb = gx = None
        if self.inputs[1].requires_grad:
            gw = (g3 @ self.cols.transpose(0, 2, 1)).sum(axis=0).reshape(o, kh, kw, c).transpose(0, 3, 1, 2)
        if self.has_bias:
            gb = g.sum(axis=(0, 2, 3))
        if self.inputs[0].requires_grad:
            dcols = (self.w2.T @ g3).reshape(n, kh, kw, c, oh, ow)
            gxp = np.zeros(self.xp_shape, dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + s * oh:s, j:j + s * ow:s] += dcols[:, i, j]
            gx = gxp[:, :, pad:self.xp_shape[2] - pad, pad:self.xp_shape[3] - pad] if pad else gxp
        return gx, gw, gb


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, pad: int = 0) -> Tensor:
    if bias is None:
        return _Conv2dNoBias.apply(x, weight, stride=stride, pad=pad)
    return Conv2d.apply(x, weight, bias, stride=stride, pad=pad)


class _Conv2dNoBias(Conv2d):
    def forward(self, x, w, stride=1, pad=0):
        return super().forward(x, w, None, stride=stride, pad=pad)

    def backward(self, g):
        gx, gw, _ = super().backward(g)
        return gx, gw


class ReLU(Function):
    def forward(self, x):
        self.mask = x > 0
        return np.where(self.mask, x, 0.0).astype(x.dtype, copy=False)

    def backward(self, g):
        return (g * self.mask,)


def relu(x: Tensor) -> Tensor:
    return ReLU.apply(x)


class MaxPool2d(Function):
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""

    def forward(self, x, k=2):
        n, c, h, w = x.shape
        oh, ow = h // k, w // k
        if oh == 0 or ow == 0:
            raise ShapeError(f"maxpool window {k} larger than input {h}x{w}")
        xc = x[:, :, :oh * k, :ow * k]
        win = xc.reshape(n, c, oh, k, ow, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, k * k)
        # first maximal element wins ties, so each window routes to exactly one input
        self.arg = win.argmax(axis=-1)
        self.k, self.in_shape = k, x.shape
        return np.take_along_axis(win, self.arg[..., None], axis=-1)[..., 0]

    def backward(self, g):
        n, c, h, w = self.in_shape
        k = self.k
        oh, ow = g.shape[2], g.shape[3]
        win = np.zeros((n, c, oh, ow, k * k), dtype=g.dtype)
        np.put_along_axis(win, self.arg[..., None], g[..., None], axis=-1)
        gx = np.zeros(self.in_shape, dtype=g.dtype)
        gx[:, :, :oh * k, :ow * k] = win.reshape(n, c, oh, ow, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(
            n, c, oh * k, ow * k)
        return (gx,)


def maxpool2d(x: Tensor, k: int = 2) -> Tensor:
    return MaxPool2d.apply(x, k=k)


class BatchNormState:
    """Running statistics of a batchnorm layer (not differentiable)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


class BatchNorm2d(Function):
    def forward(self, x, gamma, beta, state=None, training=False):
        c = x.shape[1]
        if gamma.shape != (c,) or beta.shape != (c,):
            raise ShapeError(f"batchnorm parameters must have shape ({c},)")
        shp = (1, c, 1, 1)
        if training:
            m = x.shape[0] * x.shape[2] * x.shape[3]
            if m < 2:
                raise ShapeError("batchnorm in training mode needs more than one value per channel")
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            mom = state.momentum
            state.running_mean[...] = (1 - mom) * state.running_mean + mom * mean
            state.running_var[...] = (1 - mom) * state.running_var + mom * var * (m / (m - 1))
        else:
            mean, var = state.running_mean, state.running_var
        inv = 1.0 / np.sqrt(var + state.eps)
        xhat = (x - mean.reshape(shp)) * inv.reshape(shp)
        self.xhat, self.inv, self.gamma, self.training = xhat, inv.astype(x.dtype), gamma, training
        return (xhat * gamma.reshape(shp) + beta.reshape(shp)).astype(x.dtype, copy=False)

    def backward(self, g):
        shp = (1, -1, 1, 1)
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * self.xhat).sum(axis=(0, 2, 3))
        gxhat = g * self.gamma.reshape(shp)
        if self.training:
            gx = self.inv.reshape(shp) * (
                gxhat
                - gxhat.mean(axis=(0, 2, 3), keepdims=True)
                - self.xhat * (gxhat * self.xhat).mean(axis=(0, 2, 3), keepdims=True)
            )
        else:
            gx = gxhat * self.inv.reshape(shp)
        return gx, ggamma, gbeta


def batchnorm2d(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool = False) -> Tensor:
    """Per-channel normalization; training mode uses batch statistics and updates ``state``."""
    return BatchNorm2d.apply(x, gamma, beta, state=state, training=training)


class Linear(Function):
    def forward(self, x, w, b):
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeError(f"linear expects (batch, {w.shape[1]}) input, got {x.shape}")
        self.x, self.w = x, w
        return x @ w.T + b

    def backward(self, g):
        return g @ self.w, g.T @ self.x, g.sum(axis=0)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return Linear.apply(x, weight, bias)


def flatten(x: Tensor) -> Tensor:
    return x.reshape(x.shape[0], -1)


def global_avg_pool(x: Tensor) -> Tensor:
    return x.mean(axis=(2, 3))


class Concat(Function):
    def forward(self, *arrays, axis=1):
        self.axis = axis
        self.splits = np.cumsum([a.shape[axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=axis)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.axis))


def concat(tensors, axis: int = 1) -> Tensor:
    return Concat.apply(*tensors, axis=axis)


def log_softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class SoftmaxCrossEntropy(Function):
    def forward(self, logits, labels=None, reduction="mean"):
        labels = np.asarray(labels, dtype=np.int64).reshape(-1)
        b, k = logits.shape
        if labels.shape[0] != b:
            raise ShapeError(f"{labels.shape[0]} labels for {b} logit rows")
        if np.any(labels < 0) or np.any(labels >= k):
            raise ValueError(f"label outside class range [0, {k})")
        logp = log_softmax_np(logits)
        self.p = np.exp(logp)
        self.labels, self.reduction = labels, reduction
        nll = -logp[np.arange(b), labels]
        if reduction == "none":
            return nll
        return np.asarray(nll.mean() if reduction == "mean" else nll.sum(), dtype=logits.dtype)

    def backward(self, g):
        b = self.p.shape[0]
        d = self.p.copy()
        d[np.arange(b), self.labels] -= 1.0
        if self.reduction == "mean":
            d /= b
        if self.reduction == "none":
            return (d * g[:, None],)
        return (d * g,)


def softmax_cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Cross-entropy of integer ``labels`` under softmax(logits).

    ``reduction`` is "mean", "sum" or "none" (one value per row).
    """
    if reduction not in ("mean", "sum", "none"):
        raise ValueError(f"unknown reduction {reduction!r}")
    return SoftmaxCrossEntropy.apply(logits, labels=labels, reduction=reduction)


__all__ = [
    "BatchNormState",
    "ShapeError",
    "batchnorm2d",
    "concat",
    "conv2d",
    "flatten",
    "global_avg_pool",
    "linear",
    "log_softmax_np",
    "maxpool2d",
    "relu",
    "softmax_cross_entropy",
]
