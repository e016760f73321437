"""Differentiable layer primitives: forward passes and hand-written backward passes.

All activations are dense numpy arrays laid out channels-last,
``(batch, *spatial, channels)``, with 2 or 3 spatial axes.  The same code
serves float32 (training / inference) and float64 (gradient checking).

Every operation exists in two forms: a pure function (``conv``,
``batch_norm``, ...) and a ``Layer`` class that owns parameters and caches
what its backward pass needs.  Layers cache only in ``Mode.TRAIN``; an
inference forward is read-only and safe to run concurrently.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

# Variance stabilizer for batch/layer normalization.
NORM_EPS = 1e-5


class Mode(enum.Enum):
    TRAIN = "train"
    INFER = "infer"


def make_rng(seed):
    """Counter-based deterministic generator (Philox), one stream per run."""
    return np.random.Generator(np.random.Philox(seed))


@dataclass
class LayerGrads:
    """Gradients of one layer: w.r.t. its input and each named parameter."""

    input_grad: np.ndarray
    param_grads: dict = field(default_factory=dict)


# ---------------------------------------------------------------------------
# convolution geometry helpers


def _norm_stride(stride, rank):
    if np.isscalar(stride):
        s = (int(stride),) * rank
    else:
        s = tuple(int(v) for v in stride)
        if len(s) != rank:
            raise ValueError(f"stride has {len(s)} entries for {rank} spatial axes")
    if any(v < 1 for v in s):
        raise ValueError(f"stride must be >= 1, got {s}")
    return s


def _conv_geometry(in_sp, ksp, stride, padding):
    """Output extents and (lo, hi) zero padding per spatial axis.

    'same' keeps out = ceil(in / stride); an odd total padding puts the
    extra element on the high-index side.
    """
    outs, pads = [], []
    for n, k, s in zip(in_sp, ksp, stride):
        if padding == "same":
            o = -(-n // s)
            total = max((o - 1) * s + k - n, 0)
            lo = total // 2
            pads.append((lo, total - lo))
        elif padding == "valid":
            o = (n - k) // s + 1
            if o < 1:
                raise ValueError(
                    f"valid padding leaves an empty extent: input {n}, kernel {k}, stride {s}"
                )
            pads.append((0, 0))
        else:
            raise ValueError(f"unknown padding {padding!r}")
        outs.append(o)
    return tuple(outs), pads


def _pad(x, pads):
    if all(p == (0, 0) for p in pads):
        return x
    return np.pad(x, [(0, 0)] + list(pads) + [(0, 0)])


def _unpad(xp, pads, spatial):
    sl = tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, spatial))
    return xp[(slice(None), *sl, slice(None))]


def _offset_slices(off, stride, out_sp):
    # Strided view of the padded input that aligns kernel offset `off`
    # with every output position.
    return tuple(
        slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(off, stride, out_sp)
    )


def _check_input_rank(x, rank, what):
    if x.ndim != rank + 2:
        raise ValueError(
            f"{what}: input must be (batch, {rank} spatial axes, channels), got shape {x.shape}"
        )


# ---------------------------------------------------------------------------
# convolution, transposed convolution


def conv(x, weights, bias, stride=1, padding="same", separable=False):
    """N-d cross-correlation with zero padding.

    Dense weights are ``(*kernel, c_in, c_out)``.  Separable weights are the
    pair ``(depthwise, pointwise)`` with shapes ``(*kernel, c)`` and
    ``(c, c_out)``; the bias belongs to the pointwise stage.
    """
    if separable:
        return _sep_conv(x, weights, bias, stride, padding)
    w = np.asarray(weights)
    rank = w.ndim - 2
    _check_input_rank(x, rank, "conv")
    ksp, ci, co = w.shape[:rank], w.shape[rank], w.shape[rank + 1]
    if x.shape[-1] != ci:
        raise ValueError(f"conv: input has {x.shape[-1]} channels, weights expect {ci}")
    s = _norm_stride(stride, rank)
    out_sp, pads = _conv_geometry(x.shape[1:-1], ksp, s, padding)
    xp = _pad(x, pads)
    y = np.zeros((x.shape[0], *out_sp, co), dtype=x.dtype)
    for off in np.ndindex(*ksp):
        y += xp[(slice(None), *_offset_slices(off, s, out_sp), slice(None))] @ w[off]
    if bias is not None:
        y += np.asarray(bias)
    return y


def conv_backward(x, weights, dy, stride=1, padding="same", separable=False):
    """Gradients of ``conv`` w.r.t. input, weights, and bias."""
    if separable:
        return _sep_conv_backward(x, weights, dy, stride, padding)
    w = np.asarray(weights)
    rank = w.ndim - 2
    ksp, ci, co = w.shape[:rank], w.shape[rank], w.shape[rank + 1]
    s = _norm_stride(stride, rank)
    out_sp, pads = _conv_geometry(x.shape[1:-1], ksp, s, padding)
    if dy.shape != (x.shape[0], *out_sp, co):
        raise ValueError(
            f"conv_backward: dy shape {dy.shape} does not match forward output "
            f"{(x.shape[0], *out_sp, co)}"
        )
    xp = _pad(x, pads)
    lead = tuple(range(dy.ndim - 1))
    dw = np.zeros_like(w)
    gxp = np.zeros_like(xp)
    for off in np.ndindex(*ksp):
        sl = (slice(None), *_offset_slices(off, s, out_sp), slice(None))
        dw[off] = np.tensordot(xp[sl], dy, axes=(lead, lead))
        gxp[sl] += dy @ w[off].T
    db = dy.sum(axis=lead)
    return LayerGrads(_unpad(gxp, pads, x.shape[1:-1]), {"w": dw, "b": db})


def _sep_conv(x, weights, bias, stride, padding):
    dw, pw = (np.asarray(w) for w in weights)
    rank = dw.ndim - 1
    _check_input_rank(x, rank, "separable conv")
    ksp, c = dw.shape[:rank], dw.shape[-1]
    if x.shape[-1] != c:
        raise ValueError(f"separable conv: input has {x.shape[-1]} channels, depthwise expects {c}")
    if pw.shape[0] != c:
        raise ValueError("separable conv: pointwise in-channels must match depthwise channels")
    s = _norm_stride(stride, rank)
    out_sp, pads = _conv_geometry(x.shape[1:-1], ksp, s, padding)
    xp = _pad(x, pads)
    y1 = np.zeros((x.shape[0], *out_sp, c), dtype=x.dtype)
    for off in np.ndindex(*ksp):
        y1 += xp[(slice(None), *_offset_slices(off, s, out_sp), slice(None))] * dw[off]
    y = y1 @ pw
    if bias is not None:
        y += np.asarray(bias)
    return y


def _sep_conv_backward(x, weights, dy, stride, padding):
    dwk, pw = (np.asarray(w) for w in weights)
    rank = dwk.ndim - 1
    ksp, c = dwk.shape[:rank], dwk.shape[-1]
    s = _norm_stride(stride, rank)
    out_sp, pads = _conv_geometry(x.shape[1:-1], ksp, s, padding)
    if dy.shape != (x.shape[0], *out_sp, pw.shape[1]):
        raise ValueError("separable conv_backward: dy shape mismatch")
    xp = _pad(x, pads)
    lead = tuple(range(dy.ndim - 1))
    # Recompute the depthwise output for the pointwise weight gradient.
    y1 = np.zeros((x.shape[0], *out_sp, c), dtype=x.dtype)
    for off in np.ndindex(*ksp):
        y1 += xp[(slice(None), *_offset_slices(off, s, out_sp), slice(None))] * dwk[off]
    dpw = np.tensordot(y1, dy, axes=(lead, lead))
    db = dy.sum(axis=lead)
    dy1 = dy @ pw.T
    ddw = np.zeros_like(dwk)
    gxp = np.zeros_like(xp)
    for off in np.ndindex(*ksp):
        sl = (slice(None), *_offset_slices(off, s, out_sp), slice(None))
        ddw[off] = (xp[sl] * dy1).sum(axis=lead)
        gxp[sl] += dy1 * dwk[off]
    return LayerGrads(_unpad(gxp, pads, x.shape[1:-1]), {"dw": ddw, "pw": dpw, "b": db})


def transposed_conv(x, weights, bias, stride=2):
    """Adjoint of the same-padded strided convolution; out extent = in * stride.

    Weights are ``(*kernel, c_out, c_in)`` with ``c_in`` matching the input:
    feeding ``conv`` weights unchanged makes ``<conv(a), b> == <a, transposed_conv(b)>``
    hold exactly for matched kernels.
    """
    w = np.asarray(weights)
    rank = w.ndim - 2
    _check_input_rank(x, rank, "transposed_conv")
    ksp, co, ci = w.shape[:rank], w.shape[rank], w.shape[rank + 1]
    if x.shape[-1] != ci:
        raise ValueError(
            f"transposed_conv: input has {x.shape[-1]} channels, weights expect {ci}"
        )
    s = _norm_stride(stride, rank)
    out_sp = tuple(n * v for n, v in zip(x.shape[1:-1], s))
    # Geometry of the strided conv this op is the adjoint of.
    back_sp, pads = _conv_geometry(out_sp, ksp, s, "same")
    if back_sp != x.shape[1:-1]:
        raise ValueError("transposed_conv: kernel smaller than stride is unsupported")
    gxp = np.zeros(
        (x.shape[0], *(n + lo + hi for n, (lo, hi) in zip(out_sp, pads)), co),
        dtype=x.dtype,
    )
    for off in np.ndindex(*ksp):
        gxp[(slice(None), *_offset_slices(off, s, x.shape[1:-1]), slice(None))] += x @ np.swapaxes(w[off], 0, 1)
    y = _unpad(gxp, pads, out_sp)
    if bias is not None:
        y = y + np.asarray(bias)
    return y


def transposed_conv_backward(x, weights, dy, stride=2):
    w = np.asarray(weights)
    rank = w.ndim - 2
    ksp, co, ci = w.shape[:rank], w.shape[rank], w.shape[rank + 1]
    s = _norm_stride(stride, rank)
    out_sp = tuple(n * v for n, v in zip(x.shape[1:-1], s))
    if dy.shape != (x.shape[0], *out_sp, co):
        raise ValueError("transposed_conv_backward: dy shape mismatch")
    _, pads = _conv_geometry(out_sp, ksp, s, "same")
    dyp = _pad(dy, pads)
    lead = tuple(range(x.ndim - 1))
    dw = np.zeros_like(w)
    gx = np.zeros_like(x)
    for off in np.ndindex(*ksp):
        sl = (slice(None), *_offset_slices(off, s, x.shape[1:-1]), slice(None))
        gx += dyp[sl] @ w[off]
        dw[off] = np.tensordot(dyp[sl], x, axes=(lead, lead))
    db = dy.sum(axis=tuple(range(dy.ndim - 1)))
    return LayerGrads(gx, {"w": dw, "b": db})


# ---------------------------------------------------------------------------
# normalization


def batch_norm(x, gamma, beta, running_mean, running_var, momentum=0.5, mode=Mode.INFER):
    """Per-channel normalization.

    TRAIN normalizes by batch statistics and updates the running buffers
    in place as ``running <- momentum * running + (1 - momentum) * batch``
    (momentum weights the old value).  INFER uses the running statistics
    and mutates nothing.
    """
    axes = tuple(range(x.ndim - 1))
    if mode is Mode.TRAIN:
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var
    xhat = (x - mu) / np.sqrt(var + NORM_EPS)
    return gamma * xhat + beta


def batch_norm_backward(x, gamma, dy, running_mean, running_var, mode=Mode.TRAIN):
    axes = tuple(range(x.ndim - 1))
    if mode is Mode.TRAIN:
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
    else:
        mu, var = running_mean, running_var
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (x - mu) * inv
    dgamma = (dy * xhat).sum(axis=axes)
    dbeta = dy.sum(axis=axes)
    g = dy * gamma
    if mode is Mode.TRAIN:
        dx = inv * (
            g - g.mean(axis=axes) - xhat * (g * xhat).mean(axis=axes)
        )
    else:
        dx = g * inv
    return LayerGrads(dx, {"gamma": dgamma, "beta": dbeta})


def layer_norm(x, gamma, beta):
    """Normalize each sample over all non-batch axes; mode-independent."""
    axes = tuple(range(1, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    xhat = (x - mu) / np.sqrt(var + NORM_EPS)
    return gamma * xhat + beta


def layer_norm_backward(x, gamma, dy):
    axes = tuple(range(1, x.ndim))
    mu = x.mean(axis=axes, keepdims=True)
    var = x.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + NORM_EPS)
    xhat = (x - mu) * inv
    red = tuple(range(x.ndim - 1))
    dgamma = (dy * xhat).sum(axis=red)
    dbeta = dy.sum(axis=red)
    g = dy * gamma
    dx = inv * (
        g - g.mean(axis=axes, keepdims=True) - xhat * (g * xhat).mean(axis=axes, keepdims=True)
    )
    return LayerGrads(dx, {"gamma": dgamma, "beta": dbeta})


# ---------------------------------------------------------------------------
# activations, regularizers, resampling


def relu(x):
    return np.maximum(x, 0)


def relu_backward(x, dy):
    return dy * (x > 0)


def softmax_channels(x):
    """Stable softmax along the channel axis; rows are positive and sum to 1."""
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_channels_backward(y, dy):
    # y is the forward output.
    return y * (dy - (dy * y).sum(axis=-1, keepdims=True))


def dropout(x, rate, mode=Mode.INFER, rng=None):
    """Inverted dropout; identity in INFER mode and for rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode is Mode.INFER or rate == 0.0:
        return x
    mask = dropout_mask(rng, x.shape, rate, x.dtype)
    return x * mask


def dropout_mask(rng, shape, rate, dtype):
    # Survivors pre-scaled by 1/(1-rate) so the backward pass reuses the mask.
    return (rng.random(shape) >= rate).astype(dtype) / (1.0 - rate)


def gaussian_noise(x, std, mode=Mode.INFER, rng=None):
    """Additive zero-mean Gaussian noise in TRAIN mode; identity gradient."""
    if std < 0:
        raise ValueError(f"noise std must be >= 0, got {std}")
    if mode is Mode.INFER or std == 0.0:
        return x
    return x + rng.normal(0.0, std, x.shape).astype(x.dtype)


def _pool_views(x, window):
    """Reshape (B, *spatial, C) into (B, *out, C, prod(window)) block rows."""
    sp = x.shape[1:-1]
    if len(window) != len(sp):
        raise ValueError("window rank must match spatial rank")
    for n, w in zip(sp, window):
        if n % w:
            raise ValueError(f"extent {n} not divisible by window {w}")
    d = len(sp)
    shape = (x.shape[0],)
    for n, w in zip(sp, window):
        shape += (n // w, w)
    shape += (x.shape[-1],)
    xr = x.reshape(shape)
    perm = [0] + [1 + 2 * i for i in range(d)] + [2 * d + 1] + [2 + 2 * i for i in range(d)]
    xt = xr.transpose(perm)
    out_sp = tuple(n // w for n, w in zip(sp, window))
    flat = xt.reshape((x.shape[0], *out_sp, x.shape[-1], -1))
    return flat, out_sp


def _pool_unview(blocks, x_shape, window):
    # Inverse of _pool_views.
    sp = x_shape[1:-1]
    d = len(sp)
    out_sp = tuple(n // w for n, w in zip(sp, window))
    xt = blocks.reshape((x_shape[0], *out_sp, x_shape[-1], *window))
    perm = [0]
    for i in range(d):
        perm += [1 + i, 2 + d + i]
    perm += [1 + d]
    return xt.transpose(perm).reshape(x_shape)


def max_pool(x, window):
    blocks, _ = _pool_views(x, window)
    return blocks.max(axis=-1)


def max_pool_backward(x, window, dy):
    """Routes dy to the first (lowest linear index) maximum of each block."""
    blocks, out_sp = _pool_views(x, window)
    if dy.shape != blocks.shape[:-1]:
        raise ValueError("max_pool_backward: dy shape mismatch")
    idx = blocks.argmax(axis=-1)
    g = np.zeros_like(blocks)
    np.put_along_axis(g, idx[..., None], dy[..., None], axis=-1)
    return _pool_unview(g, x.shape, window)


def nearest_upsample(x, factor):
    sp_rank = x.ndim - 2
    f = _norm_stride(factor, sp_rank)
    y = x
    for ax, v in enumerate(f, start=1):
        y = np.repeat(y, v, axis=ax)
    return y


def nearest_upsample_backward(x_shape, factor, dy):
    # Adjoint of replication: sum over each replicated block.
    sp_rank = len(x_shape) - 2
    f = _norm_stride(factor, sp_rank)
    shape = (x_shape[0],)
    for n, v in zip(x_shape[1:-1], f):
        shape += (n, v)
    shape += (x_shape[-1],)
    g = dy.reshape(shape)
    return g.sum(axis=tuple(2 + 2 * i for i in range(sp_rank)))


def concat_channels(a, b):
    if a.shape[:-1] != b.shape[:-1]:
        raise ValueError(
            f"concat_channels: batch/spatial extents differ, {a.shape} vs {b.shape}"
        )
    return np.concatenate([a, b], axis=-1)


def concat_channels_backward(dy, a_channels):
    return dy[..., :a_channels], dy[..., a_channels:]


# ---------------------------------------------------------------------------
# layer classes


class Layer:
    """Base class: parameter dict, gradient dict, train-mode caching."""

    def __init__(self):
        self.params = {}
        self.grads = {}
        self.children = []  # (name, Layer) pairs for composites

    def forward(self, x, mode=Mode.INFER, rng=None):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def _need_cache(self, name="layer"):
        if getattr(self, "_cache", None) is None:
            raise RuntimeError(f"{name}.backward requires a preceding TRAIN-mode forward")
        return self._cache


def he_uniform(rng, shape, fan_in, dtype):
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv(Layer):
    def __init__(self, rng, kernel, c_in, c_out, stride=1, padding="same",
                 separable=False, bias=True, dtype=np.float32):
        super().__init__()
        kernel = tuple(kernel) if not np.isscalar(kernel) else (int(kernel),)
        self.stride, self.padding, self.separable = stride, padding, separable
        self.c_in, self.c_out = c_in, c_out
        self.use_bias = bias
        if separable:
            self.params = {
                "dw": he_uniform(rng, kernel + (c_in,), int(np.prod(kernel)), dtype),
                "pw": he_uniform(rng, (c_in, c_out), c_in, dtype),
            }
        else:
            self.params = {
                "w": he_uniform(rng, kernel + (c_in, c_out), int(np.prod(kernel)) * c_in, dtype),
            }
        if bias:
            self.params["b"] = np.zeros(c_out, dtype=dtype)
        self._cache = None

    def _weights(self):
        return (self.params["dw"], self.params["pw"]) if self.separable else self.params["w"]

    def forward(self, x, mode=Mode.INFER, rng=None):
        if mode is Mode.TRAIN:
            self._cache = x
        return conv(x, self._weights(), self.params.get("b"), self.stride, self.padding,
                    self.separable)

    def backward(self, dy):
        x = self._need_cache("Conv")
        g = conv_backward(x, self._weights(), dy, self.stride, self.padding, self.separable)
        self.grads = g.param_grads
        if not self.use_bias:
            self.grads.pop("b", None)
        return g.input_grad


class TransposedConv(Layer):
    def __init__(self, rng, kernel, c_in, c_out, stride=2, dtype=np.float32):
        super().__init__()
        kernel = tuple(kernel) if not np.isscalar(kernel) else (int(kernel),)
        self.stride = stride
        self.params = {
            "w": he_uniform(rng, kernel + (c_out, c_in), int(np.prod(kernel)) * c_in, dtype),
            "b": np.zeros(c_out, dtype=dtype),
        }
        self._cache = None

    def forward(self, x, mode=Mode.INFER, rng=None):
        if mode is Mode.TRAIN:
            self._cache = x
        return transposed_conv(x, self.params["w"], self.params["b"], self.stride)

    def backward(self, dy):
        x = self._need_cache("TransposedConv")
        g = transposed_conv_backward(x, self.params["w"], dy, self.stride)
        self.grads = g.param_grads
        return g.input_grad


class BatchNorm(Layer):
    def __init__(self, channels, momentum=0.5, dtype=np.float32):
        super().__init__()
        if not 0.0 <= momentum <= 1.0:
            raise ValueError("batchnorm momentum must be in [0, 1]")
        self.momentum = momentum
        self.params = {"gamma": np.ones(channels, dtype=dtype),
                       "beta": np.zeros(channels, dtype=dtype)}
        self.state = {"running_mean": np.zeros(channels, dtype=dtype),
                      "running_var": np.ones(channels, dtype=dtype)}
        self._cache = None

    def forward(self, x, mode=Mode.INFER, rng=None):
        if mode is Mode.TRAIN:
            self._cache = (x, mode)
        return batch_norm(x, self.params["gamma"], self.params["beta"],
                          self.state["running_mean"], self.state["running_var"],
                          self.momentum, mode)

    def backward(self, dy):
        x, mode = self._need_cache("BatchNorm")
        g = batch_norm_backward(x, self.params["gamma"], dy,
                                self.state["running_mean"], self.state["running_var"], mode)
        self.grads = g.param_grads
        return g.input_grad


class LayerNorm(Layer):
    def __init__(self, channels, dtype=np.float32):
        super().__init__()
        self.params = {"gamma": np.ones(channels, dtype=dtype),
                       "beta": np.zeros(channels, dtype=dtype)}
        self._cache = None

    def forward(self, x, mode=Mode.INFER, rng=None):
        if mode is Mode.TRAIN:
            self._cache = x
        return layer_norm(x, self.params["gamma"], self.params["beta"])

    def backward(self, dy):
        x = self._need_cache("LayerNorm")
        g = layer_norm_backward(x, self.params["gamma"], dy)
        self.grads = g.param_grads
        return g.input_grad


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self._cache = None

    def forward(self, x, mode=Mode.INFER, rng=None):
        if mode is Mode.TRAIN:
            self._cache = x
        return relu(x)

    def backward(self, dy):
        return relu_backward(self._need_cache("ReLU"), dy)


class SoftmaxChannels(Layer):
    def __init__(self):
        super().__init__()
        self._cache = None

    def forward(self, x, mode=Mode.INFER, rng=None):
        y = softmax_channels(x)
        if mode is Mode.TRAIN:
            self._cache = y
        return y

    def backward(self, dy):
        return softmax_channels_backward(self._need_cache("SoftmaxChannels"), dy)


class Dropout(Layer):
    def __init__(self, rate):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self._mask = None

    def forward(self, x, mode=Mode.INFER, rng=None):
        if mode is Mode.INFER or self.rate == 0.0:
            self._mask = None
            return x
        if rng is None:
            raise ValueError("Dropout in TRAIN mode needs an rng")
        self._mask = dropout_mask(rng, x.shape, self.rate, x.dtype)
        return x * self._mask

    def backward(self, dy):
        return dy if self._mask is None else dy * self._mask


class GaussianNoise(Layer):
    def __init__(self, std):
        super().__init__()
        if std < 0:
            raise ValueError(f"noise std must be >= 0, got {std}")
        self.std = std

    def forward(self, x, mode=Mode.INFER, rng=None):
        if mode is Mode.INFER or self.std == 0.0:
            return x
        if rng is None:
            raise ValueError("GaussianNoise in TRAIN mode needs an rng")
        return gaussian_noise(x, self.std, mode, rng)

    def backward(self, dy):
        return dy


class MaxPool(Layer):
    def __init__(self, window):
        super().__init__()
        self.window = window
        self._cache = None

    def forward(self, x, mode=Mode.INFER, rng=None):
        w = _norm_stride(self.window, x.ndim - 2)
        if mode is Mode.TRAIN:
            self._cache = (x, w)
        return max_pool(x, w)

    def backward(self, dy):
        x, w = self._need_cache("MaxPool")
        return max_pool_backward(x, w, dy)


class NearestUpsample(Layer):
    def __init__(self, factor):
        super().__init__()
        self.factor = factor
        self._cache = None

    def forward(self, x, mode=Mode.INFER, rng=None):
        if mode is Mode.TRAIN:
            self._cache = x.shape
        return nearest_upsample(x, self.factor)

    def backward(self, dy):
        shape = self._need_cache("NearestUpsample")
        return nearest_upsample_backward(shape, self.factor, dy)


class ConcatChannels(Layer):
    """Joins two inputs along channels; backward returns the two slices."""

    def __init__(self):
        super().__init__()
        self._split = None

    def forward(self, a, b=None, mode=Mode.INFER, rng=None):
        if b is None:
            raise ValueError("ConcatChannels.forward needs two inputs")
        self._split = a.shape[-1]
        return concat_channels(a, b)

    def backward(self, dy):
        if self._split is None:
            raise RuntimeError("ConcatChannels.backward requires a preceding forward")
        return concat_channels_backward(dy, self._split)


class Sequential(Layer):
    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)
        self.children = [(str(i), l) for i, l in enumerate(self.layers)]

    def forward(self, x, mode=Mode.INFER, rng=None):
        for l in self.layers:
            x = l.forward(x, mode, rng)
        return x

    def backward(self, dy):
        for l in reversed(self.layers):
            dy = l.backward(dy)
        return dy


def named_params(layer, prefix=""):
    """Depth-first (name, array) walk over a layer tree, in a fixed order."""
    out = []
    for name, arr in layer.params.items():
        out.append((f"{prefix}{name}", arr))
    for cname, child in layer.children:
        out.extend(named_params(child, f"{prefix}{cname}."))
    return out


def named_grads(layer, prefix=""):
    out = []
    for name in layer.params:
        if name not in layer.grads:
            raise RuntimeError(f"gradient for {prefix}{name} missing; run backward first")
        out.append((f"{prefix}{name}", layer.grads[name]))
    for cname, child in layer.children:
        out.extend(named_grads(child, f"{prefix}{cname}."))
    return out


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    errors: dict            # parameter name -> max relative error
    input_error: float
    tolerance: float

    @property
    def max_error(self):
        vals = list(self.errors.values()) + [self.input_error]
        return max(vals) if vals else 0.0

    @property
    def passed(self):
        return self.max_error < self.tolerance

    def __str__(self):
        lines = [f"input: {self.input_error:.3e}"]
        lines += [f"{k}: {v:.3e}" for k, v in self.errors.items()]
        lines.append(f"max {self.max_error:.3e} vs tolerance {self.tolerance:.1e}: "
                     + ("PASS" if self.passed else "FAIL"))
        return "\n".join(lines)


def _coord_error(analytic, fd, floor=1e-6):
    denom = max(abs(analytic), abs(fd), floor)
    return abs(analytic - fd) / denom


def grad_check(layer, x, tolerance=1e-4, mode=Mode.TRAIN, rng_seed=0, samples=None,
               step=1e-5):
    """Compare analytic gradients against central finite differences.

    The scalar objective is sum(forward(x) * R) for a fixed random cotangent
    R.  Stochastic layers are frozen by re-seeding the rng identically for
    every evaluation.  Requires float64 parameters and input.

    `samples` caps the number of coordinates probed per tensor (all when
    None); the finite-difference step is 1e-5 of each value's scale.
    """
    x = np.asarray(x, dtype=np.float64)
    y0 = layer.forward(x, mode, make_rng(rng_seed))
    if not np.all(np.isfinite(y0)):
        raise FloatingPointError("grad_check: non-finite forward output")
    cot = make_rng(rng_seed + 0x9E3779B9).standard_normal(y0.shape)

    dx = layer.backward(cot)
    analytic = dict(named_grads(layer))
    analytic["<input>"] = dx

    def objective():
        return float((layer.forward(x, mode, make_rng(rng_seed)) * cot).sum())

    tensors = dict(named_params(layer))
    tensors["<input>"] = x
    pick_rng = make_rng(rng_seed + 1)
    errors = {}
    for name, arr in tensors.items():
        grad = analytic[name]
        if not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"grad_check: non-finite analytic gradient for {name}")
        flat = arr.reshape(-1)
        n = flat.size
        if samples is not None and n > samples:
            coords = pick_rng.choice(n, size=samples, replace=False)
        else:
            coords = np.arange(n)
        worst = 0.0
        gflat = grad.reshape(-1)
        for c in coords:
            old = flat[c]
            h = step * max(1.0, abs(old))
            flat[c] = old + h
            f1 = objective()
            flat[c] = old - h
            f2 = objective()
            flat[c] = old
            fd = (f1 - f2) / (2.0 * h)
            worst = max(worst, _coord_error(gflat[c], fd))
        if name == "<input>":
            input_error = worst
        else:
            errors[name] = worst
    return GradCheckReport(errors, input_error, tolerance)
