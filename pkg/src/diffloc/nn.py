"""Minimal trainable neural kernel: layers, losses, SGD with momentum.

Every layer implements an analytic backward pass; the test suite checks all
of them against central finite differences at 64-bit precision. Arithmetic
runs in whatever dtype the layer was built with (float32 for training,
float64 for gradcheck oracles).

Layout conventions:
    dense-style activations   (N, F) or (N, P, F)   feature axis last
    image-style activations   (N, C, H, W)          channel axis 1

A layer instance is single-writer: forward/backward/sgd_step on the same
parameters must be externally serialized. Inference-mode forward on frozen
parameters is safe for concurrent readers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import ConfigError, InputError, NumericError, ShapeError, StateError

TRAIN = "train"
INFER = "infer"


@dataclass
class ParamTensor:
    """A trainable array with its gradient and momentum buffers."""

    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    momentum: np.ndarray = field(init=False)
    group: str = "backbone"
    trainable: bool = True

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)
        self.momentum = np.zeros_like(self.value)


def he_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32):
    """Uniform init scaled by fan-in, limit √(6 / fan_in)."""
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def _check_mode(mode: str) -> None:
    if mode not in (TRAIN, INFER):
        raise ConfigError(f"mode must be '{TRAIN}' or '{INFER}', got {mode!r}")


class Layer:
    """Base layer: forward returns (output, cache); backward consumes the
    cache, accumulates parameter gradients, and returns the input gradient."""

    kind = "layer"

    def params(self) -> list[ParamTensor]:
        return []

    def forward(self, x, mode=INFER, rng=None):
        raise NotImplementedError

    def backward(self, cache, gy):
        raise NotImplementedError


class Dense(Layer):
    """Affine map on the last axis: y = x @ W.T + b."""

    kind = "dense"

    def __init__(self, in_features, out_features, rng, group="backbone",
                 dtype=np.float32):
        self.in_features = in_features
        self.out_features = out_features
        self.w = ParamTensor("w", he_uniform((out_features, in_features),
                                             in_features, rng, dtype), group=group)
        self.b = ParamTensor("b", np.zeros(out_features, dtype=dtype), group=group)

    def params(self):
        return [self.w, self.b]

    def forward(self, x, mode=INFER, rng=None):
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"dense expects last dim {self.in_features}, "
                             f"got {x.shape}")
        y = x @ self.w.value.T + self.b.value
        return y, x

    def backward(self, cache, gy):
        x = cache
        x2 = x.reshape(-1, self.in_features)
        g2 = gy.reshape(-1, self.out_features)
        self.w.grad += g2.T @ x2
        self.b.grad += g2.sum(axis=0)
        return gy @ self.w.value


def _im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i:i + stride * oh:stride,
                                  j:j + stride * ow:stride]
    return cols.reshape(n, c * kh * kw, oh * ow), (oh, ow)


def _col2im(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                cols[:, :, i, j]
    return xp[:, :, pad:pad + h, pad:pad + w]


class Conv2d(Layer):
    """2-D convolution via im2col; weight (out, in, kh, kw)."""

    kind = "conv2d"

    def __init__(self, in_ch, out_ch, kernel, stride=1, pad=0, rng=None,
                 group="backbone", dtype=np.float32):
        if kernel < 1 or stride < 1 or pad < 0:
            raise ConfigError("conv2d needs kernel >= 1, stride >= 1, pad >= 0")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.pad = kernel, stride, pad
        fan_in = in_ch * kernel * kernel
        self.w = ParamTensor("w", he_uniform((out_ch, in_ch, kernel, kernel),
                                             fan_in, rng, dtype), group=group)
        self.b = ParamTensor("b", np.zeros(out_ch, dtype=dtype), group=group)

    def params(self):
        return [self.w, self.b]

    def forward(self, x, mode=INFER, rng=None):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"conv2d expects (N, {self.in_ch}, H, W), got {x.shape}")
        cols, (oh, ow) = _im2col(x, self.kernel, self.kernel, self.stride, self.pad)
        wm = self.w.value.reshape(self.out_ch, -1)
        y = np.matmul(wm, cols).reshape(x.shape[0], self.out_ch, oh, ow)
        y += self.b.value[None, :, None, None]
        return y, (x.shape, cols)

    def backward(self, cache, gy):
        x_shape, cols = cache
        n = x_shape[0]
        gym = gy.reshape(n, self.out_ch, -1)
        wm = self.w.value.reshape(self.out_ch, -1)
        self.w.grad += np.matmul(gym, cols.transpose(0, 2, 1)).sum(axis=0) \
                         .reshape(self.w.value.shape)
        self.b.grad += gy.sum(axis=(0, 2, 3))
        gcols = np.matmul(wm.T, gym)
        return _col2im(gcols, x_shape, self.kernel, self.kernel,
                       self.stride, self.pad)


class Deconv2d(Layer):
    """Transposed convolution; weight (in, out, kh, kw).

    Output size (H-1)*stride - 2*pad + kernel; kernel 4 / stride 2 / pad 1
    doubles the spatial size, kernel 3 / stride 1 / pad 1 preserves it.
    """

    kind = "deconv2d"

    def __init__(self, in_ch, out_ch, kernel=4, stride=2, pad=1, rng=None,
                 group="backbone", dtype=np.float32):
        if kernel < 1 or stride < 1 or pad < 0:
            raise ConfigError("deconv2d needs kernel >= 1, stride >= 1, pad >= 0")
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.pad = kernel, stride, pad
        fan_in = in_ch * kernel * kernel
        self.w = ParamTensor("w", he_uniform((in_ch, out_ch, kernel, kernel),
                                             fan_in, rng, dtype), group=group)
        self.b = ParamTensor("b", np.zeros(out_ch, dtype=dtype), group=group)

    def params(self):
        return [self.w, self.b]

    def out_size(self, h):
        return (h - 1) * self.stride - 2 * self.pad + self.kernel

    def forward(self, x, mode=INFER, rng=None):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"deconv2d expects (N, {self.in_ch}, H, W), got {x.shape}")
        n, _, h, w = x.shape
        oh, ow = self.out_size(h), self.out_size(w)
        if oh < 1 or ow < 1:
            raise ShapeError(f"deconv2d output degenerate for input {x.shape}")
        xm = x.reshape(n, self.in_ch, h * w)
        wm = self.w.value.reshape(self.in_ch, -1)
        cols = np.matmul(wm.T, xm)
        y = _col2im(cols, (n, self.out_ch, oh, ow), self.kernel, self.kernel,
                    self.stride, self.pad)
        y += self.b.value[None, :, None, None]
        return y, (x, (n, self.out_ch, oh, ow))

    def backward(self, cache, gy):
        x, y_shape = cache
        if gy.shape != y_shape:
            raise StateError(f"deconv2d cache mismatch: grad {gy.shape}, "
                             f"output was {y_shape}")
        n, _, h, w = x.shape
        gcols, _ = _im2col(gy, self.kernel, self.kernel, self.stride, self.pad)
        xm = x.reshape(n, self.in_ch, h * w)
        self.w.grad += np.matmul(xm, gcols.transpose(0, 2, 1)).sum(axis=0) \
                         .reshape(self.w.value.shape)
        self.b.grad += gy.sum(axis=(0, 2, 3))
        wm = self.w.value.reshape(self.in_ch, -1)
        return np.matmul(wm, gcols).reshape(x.shape)


class BatchNorm(Layer):
    """Batch normalization over all axes except the feature/channel axis.

    Training mode normalizes with biased batch statistics and updates the
    running buffers; inference mode uses the running statistics only.
    """

    kind = "batchnorm"

    def __init__(self, num_features, eps=1e-5, momentum=0.1, group="backbone",
                 dtype=np.float32):
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = ParamTensor("gamma", np.ones(num_features, dtype=dtype),
                                 group=group)
        self.beta = ParamTensor("beta", np.zeros(num_features, dtype=dtype),
                                group=group)
        self.running_mean = ParamTensor("running_mean",
                                        np.zeros(num_features, dtype=dtype),
                                        group=group, trainable=False)
        self.running_var = ParamTensor("running_var",
                                       np.ones(num_features, dtype=dtype),
                                       group=group, trainable=False)

    def params(self):
        return [self.gamma, self.beta, self.running_mean, self.running_var]

    def _flat(self, x):
        if x.ndim == 2:
            return x, None
        if x.ndim == 4:
            n, c, h, w = x.shape
            return x.transpose(0, 2, 3, 1).reshape(-1, c), (n, h, w)
        raise ShapeError(f"batchnorm expects 2-D or 4-D input, got {x.shape}")

    def _unflat(self, x2, meta):
        if meta is None:
            return x2
        n, h, w = meta
        return x2.reshape(n, h, w, -1).transpose(0, 3, 1, 2)

    def forward(self, x, mode=INFER, rng=None):
        _check_mode(mode)
        if x.shape[1 if x.ndim == 4 else -1] != self.num_features:
            raise ShapeError(f"batchnorm expects {self.num_features} features, "
                             f"got {x.shape}")
        x2, meta = self._flat(x)
        if mode == TRAIN:
            mu = x2.mean(axis=0)
            var = x2.var(axis=0)
            inv = 1.0 / np.sqrt(var + self.eps)
            xhat = (x2 - mu) * inv
            m = self.momentum
            self.running_mean.value[:] = (1 - m) * self.running_mean.value + m * mu
            self.running_var.value[:] = (1 - m) * self.running_var.value + m * var
            cache = (xhat, inv, meta, TRAIN)
        else:
            inv = 1.0 / np.sqrt(self.running_var.value + self.eps)
            xhat = (x2 - self.running_mean.value) * inv
            cache = (xhat, inv, meta, INFER)
        y2 = self.gamma.value * xhat + self.beta.value
        return self._unflat(y2, meta).astype(x.dtype, copy=False), cache

    def backward(self, cache, gy):
        xhat, inv, meta, mode = cache
        g2, _ = self._flat(gy)
        self.gamma.grad += (g2 * xhat).sum(axis=0)
        self.beta.grad += g2.sum(axis=0)
        gxhat = g2 * self.gamma.value
        if mode == INFER:
            gx2 = gxhat * inv
        else:
            m = xhat.shape[0]
            # d/dx of (x - mean)/sqrt(var + eps) with batch statistics
            gx2 = (inv / m) * (m * gxhat - gxhat.sum(axis=0)
                               - xhat * (gxhat * xhat).sum(axis=0))
        return self._unflat(gx2, meta)


class Dropout(Layer):
    """Inverted dropout; identity in inference mode."""

    kind = "dropout"

    def __init__(self, rate=0.5):
        if not 0.0 <= rate < 1.0:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, mode=INFER, rng=None):
        _check_mode(mode)
        if mode == INFER or self.rate == 0.0:
            return x, None
        if rng is None:
            raise StateError("dropout in training mode requires an rng")
        keep = (rng.random(x.shape) >= self.rate).astype(x.dtype)
        scale = x.dtype.type(1.0 / (1.0 - self.rate))
        return x * keep * scale, keep * scale

    def backward(self, cache, gy):
        if cache is None:
            return gy
        return gy * cache


class Tanh(Layer):
    kind = "tanh"

    def forward(self, x, mode=INFER, rng=None):
        y = np.tanh(x)
        return y, y

    def backward(self, cache, gy):
        return gy * (1.0 - cache * cache)


class Relu(Layer):
    kind = "relu"

    def forward(self, x, mode=INFER, rng=None):
        return np.maximum(x, 0), x > 0

    def backward(self, cache, gy):
        return gy * cache


class Softmax(Layer):
    """Stable softmax over the last axis."""

    kind = "softmax"

    def forward(self, x, mode=INFER, rng=None):
        shifted = x - x.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=-1, keepdims=True)
        return y, y

    def backward(self, cache, gy):
        y = cache
        return y * (gy - (gy * y).sum(axis=-1, keepdims=True))


class UpsampleNearest(Layer):
    """Nearest-neighbor upsampling by an integer factor."""

    kind = "upsample_nearest"

    def __init__(self, factor=2):
        if factor < 1:
            raise ConfigError(f"upsample factor must be >= 1, got {factor}")
        self.factor = factor

    def forward(self, x, mode=INFER, rng=None):
        if x.ndim != 4:
            raise ShapeError(f"upsample expects (N, C, H, W), got {x.shape}")
        y = x.repeat(self.factor, axis=2).repeat(self.factor, axis=3)
        return y, x.shape

    def backward(self, cache, gy):
        n, c, h, w = cache
        f = self.factor
        return gy.reshape(n, c, h, f, w, f).sum(axis=(3, 5))


class PatchEmbed(Layer):
    """Split an image into p x p patches and project each to an embedding.

    (N, C, H, W) -> (N, (H/p)*(W/p), dim). H and W must be divisible by p.
    """

    kind = "patch_embed"

    def __init__(self, patch, in_ch, dim, rng, group="backbone", dtype=np.float32):
        if patch < 1:
            raise ConfigError(f"patch size must be >= 1, got {patch}")
        self.patch = patch
        self.in_ch = in_ch
        self.dim = dim
        flat = in_ch * patch * patch
        self.w = ParamTensor("w", he_uniform((dim, flat), flat, rng, dtype),
                             group=group)
        self.b = ParamTensor("b", np.zeros(dim, dtype=dtype), group=group)

    def params(self):
        return [self.w, self.b]

    def _to_patches(self, x):
        n, c, h, w = x.shape
        p = self.patch
        gh, gw = h // p, w // p
        px = x.reshape(n, c, gh, p, gw, p).transpose(0, 2, 4, 1, 3, 5)
        return px.reshape(n, gh * gw, c * p * p)

    def forward(self, x, mode=INFER, rng=None):
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(f"patch_embed expects (N, {self.in_ch}, H, W), "
                             f"got {x.shape}")
        if x.shape[2] % self.patch or x.shape[3] % self.patch:
            raise ShapeError(f"patch_embed: {x.shape[2]}x{x.shape[3]} not "
                             f"divisible by patch {self.patch}")
        flat = self._to_patches(x)
        y = flat @ self.w.value.T + self.b.value
        return y, (flat, x.shape)

    def backward(self, cache, gy):
        flat, x_shape = cache
        n, c, h, w = x_shape
        p = self.patch
        gh, gw = h // p, w // p
        g2 = gy.reshape(-1, self.dim)
        self.w.grad += g2.T @ flat.reshape(-1, flat.shape[-1])
        self.b.grad += g2.sum(axis=0)
        gflat = gy @ self.w.value
        gx = gflat.reshape(n, gh, gw, c, p, p).transpose(0, 3, 1, 4, 2, 5)
        return gx.reshape(x_shape)


class MeanPool(Layer):
    """Mean over the token axis: (N, P, D) -> (N, D)."""

    kind = "mean_pool"

    def forward(self, x, mode=INFER, rng=None):
        if x.ndim != 3:
            raise ShapeError(f"mean_pool expects (N, P, D), got {x.shape}")
        return x.mean(axis=1), x.shape

    def backward(self, cache, gy):
        n, p, d = cache
        return np.broadcast_to(gy[:, None, :] / p, cache).astype(gy.dtype)


class TokensToGrid(Layer):
    """Reshape a token sequence to a channel-first grid:
    (N, gh*gw, D) -> (N, D, gh, gw)."""

    kind = "tokens_to_grid"

    def __init__(self, gh, gw):
        self.gh, self.gw = gh, gw

    def forward(self, x, mode=INFER, rng=None):
        if x.ndim != 3 or x.shape[1] != self.gh * self.gw:
            raise ShapeError(f"tokens_to_grid expects (N, {self.gh * self.gw}, D), "
                             f"got {x.shape}")
        n, _, d = x.shape
        y = x.transpose(0, 2, 1).reshape(n, d, self.gh, self.gw)
        return y, None

    def backward(self, cache, gy):
        n, d = gy.shape[0], gy.shape[1]
        return gy.reshape(n, d, self.gh * self.gw).transpose(0, 2, 1)


class Sequential:
    """Ordered layer stack with stable per-layer ids for checkpointing."""

    def __init__(self, layers: Iterable[Layer], name=""):
        self.name = name
        self.layers = list(layers)
        self.ids = [f"{name}{i:02d}_{layer.kind}" for i, layer in
                    enumerate(self.layers)]

    def params(self) -> list[tuple[str, ParamTensor]]:
        out = []
        for lid, layer in zip(self.ids, self.layers):
            out.extend((lid, p) for p in layer.params())
        return out

    def forward(self, x, mode=INFER, rng=None):
        caches = []
        for lid, layer in zip(self.ids, self.layers):
            try:
                x, cache = layer.forward(x, mode=mode, rng=rng)
            except ShapeError as e:
                raise ShapeError(f"{lid}: {e}") from None
            caches.append(cache)
        return x, caches

    def backward(self, caches, gy):
        if len(caches) != len(self.layers):
            raise StateError("cache does not match this layer stack")
        for layer, cache in zip(reversed(self.layers), reversed(caches)):
            gy = layer.backward(cache, gy)
        return gy


def sgd_step(
    params: Iterable[ParamTensor],
    lr: float | Mapping[str, float],
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> None:
    """SGD with momentum and decoupled-from-nothing weight decay:

        v <- momentum * v + grad + weight_decay * w
        w <- w - lr * v

    ``lr`` may be a single float or a per-group map; every trainable
    parameter's group must then be present. Gradients are cleared.
    """
    for p in params:
        if not p.trainable:
            continue
        if isinstance(lr, Mapping):
            if p.group not in lr:
                raise ConfigError(f"no learning rate for parameter group "
                                  f"{p.group!r}")
            step_lr = lr[p.group]
        else:
            step_lr = lr
        v = p.momentum
        v *= momentum
        v += p.grad
        if weight_decay:
            v += weight_decay * p.value
        p.value -= np.asarray(step_lr * v, dtype=p.value.dtype)
        p.grad[:] = 0.0


def zero_grads(params: Iterable[ParamTensor]) -> None:
    for p in params:
        p.grad[:] = 0.0


def cross_entropy(logits: np.ndarray, label: int) -> tuple[float, np.ndarray]:
    """-log softmax(logits)[label] with max-subtraction; grad = softmax - onehot."""
    if logits.ndim != 1:
        raise ShapeError(f"cross_entropy expects a logit vector, got {logits.shape}")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    if not 0 <= label < logits.shape[0]:
        raise InputError(f"label {label} out of range for {logits.shape[0]} classes")
    shifted = logits.astype(np.float64) - logits.max()
    logz = math.log(np.exp(shifted).sum())
    loss = logz - shifted[label]
    grad = np.exp(shifted - logz)
    grad[label] -= 1.0
    return float(loss), grad.astype(logits.dtype)


def cross_entropy_batch(logits: np.ndarray,
                        labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over a batch of logit rows; grad already scaled by 1/N."""
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"got logits {logits.shape}, labels {labels.shape}")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    n, k = logits.shape
    if labels.min() < 0 or labels.max() >= k:
        raise InputError(f"label out of range for {k} classes")
    shifted = logits.astype(np.float64) - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float((logz.ravel() - shifted[np.arange(n), labels]).mean())
    grad = np.exp(shifted - logz)
    grad[np.arange(n), labels] -= 1.0
    return loss, (grad / n).astype(logits.dtype)


def mse(a: np.ndarray, b: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean squared error over all elements; gradient w.r.t. ``a``."""
    if a.shape != b.shape:
        raise ShapeError(f"mse shapes differ: {a.shape} vs {b.shape}")
    diff = a - b
    n = a.size
    loss = float(np.sum(diff.astype(np.float64) ** 2) / n)
    return loss, (2.0 / n) * diff
