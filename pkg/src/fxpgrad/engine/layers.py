"""Layers with explicit forward/backward passes over NCHW numpy arrays.

Every layer implements ``forward(x, ctx) -> (y, cache)`` and
``backward(dy, cache, ctx) -> dx``; parameter gradients are written into
``layer.grads``.  ``Dense`` and ``Conv2D`` optionally carry a
:class:`LayerQuant` and then run on quantized weights/activations and quantize
the activation gradient arriving at their output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..interval import GradClipState, policy_step
from ..metrics import clip_ratios, grad_error_report, max_abs
from ..quantizer import (
    ClipParam,
    Mode,
    QuantizerSpec,
    Rounding,
    dequantize,
    fake_quantize,
    quantize,
    ste_backward,
)


class NumericError(FloatingPointError):
    """Raised when a forward or backward pass produces non-finite values."""


@dataclass
class LayerQuant:
    """Quantization settings and state of one Dense/Conv2D layer.

    ``None`` bit-widths leave the corresponding tensor in full precision.
    """

    w_bits: int | None
    a_bits: int | None
    g_bits: int | None
    w_clip: ClipParam = field(default_factory=lambda: ClipParam(1.0))
    a_clip: ClipParam = field(default_factory=lambda: ClipParam(1.0))
    grad_state: GradClipState | None = None
    quantize_forward: bool = True
    quantize_backward: bool = True
    wide: bool = False
    clip_grads: dict = field(default_factory=lambda: {"w_clip": 0.0, "a_clip": 0.0})

    @property
    def quantizes_weights(self) -> bool:
        return self.quantize_forward and self.w_bits is not None

    @property
    def quantizes_acts(self) -> bool:
        return self.quantize_forward and self.a_bits is not None

    @property
    def quantizes_grads(self) -> bool:
        return self.quantize_backward and self.g_bits is not None and self.grad_state is not None


class Layer:
    kind = "layer"

    def __init__(self):
        self.name = ""
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.quant: LayerQuant | None = None

    def children(self):
        return ()

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)
        if self.quant is not None:
            self.quant.clip_grads = {"w_clip": 0.0, "a_clip": 0.0}

    def forward(self, x, ctx):
        raise NotImplementedError

    def backward(self, dy, cache, ctx):
        raise NotImplementedError


class _QuantizedLinearOp(Layer):
    """Shared quantization plumbing for Dense and Conv2D."""

    trainable = True

    def _quant_inputs(self, x, ctx):
        w = self.params["weight"]
        q = self.quant
        if ctx.calibrating and q is not None:
            ctx.calibration[self.name] = x
        if q is None or not ctx.quantize:
            return x, w
        if q.quantizes_acts:
            ctx.count_quantizer(self.name, "act")
            spec = QuantizerSpec(q.a_bits, Mode.HALF_NORMAL, Rounding.NEAREST, q.wide)
            xq = fake_quantize(x, q.a_clip.value, spec)
        else:
            xq = x
        if q.quantizes_weights:
            ctx.count_quantizer(self.name, "weight")
            spec = QuantizerSpec(q.w_bits, Mode.SYMMETRIC, Rounding.NEAREST, q.wide)
            wq = fake_quantize(w, q.w_clip.value, spec)
        else:
            wq = w
        return xq, wq

    def _quant_grad(self, dy, ctx):
        q = self.quant
        if q is None or not ctx.quantize or not q.quantizes_grads:
            return dy
        ctx.count_quantizer(self.name, "grad")
        state = q.grad_state
        g_max = max_abs(dy)
        if g_max == 0.0:
            ctx.log_layer(self.name, state, 0.0, 0.0, None)
            return dy
        spec = QuantizerSpec(q.g_bits, Mode.SYMMETRIC, ctx.grad_rounding, q.wide)
        q64 = dequantize(quantize(dy, state.gamma * g_max, spec, ctx.rng))
        alpha = state.alpha_for(dy.size)
        report = None
        if ctx.full_stats:
            report = grad_error_report(dy, q64, state.gamma, q.g_bits, alpha)
            r_out = report.r_out
        else:
            r_out = clip_ratios(dy, state.gamma, alpha, g_max)[1]
        ctx.log_layer(self.name, state, g_max, r_out, report)
        q.grad_state = policy_step(ctx.policy, state, dy)
        return q64.astype(dy.dtype)

    def _quant_weight_grad(self, dw, ctx):
        q = self.quant
        if q is None or not ctx.quantize or not ctx.quantize_weight_grads or not q.quantizes_grads:
            return dw
        g_max = max_abs(dw)
        if g_max == 0.0:
            return dw
        spec = QuantizerSpec(q.g_bits, Mode.SYMMETRIC, Rounding.STOCHASTIC, q.wide)
        return fake_quantize(dw, g_max, spec, ctx.rng)

    def _ste(self, x, dxq, w, dwq, ctx):
        """Route gradients through the weight/activation quantizers."""
        q = self.quant
        if q is None or not ctx.quantize:
            return dxq, dwq
        if q.quantizes_acts:
            spec = QuantizerSpec(q.a_bits, Mode.HALF_NORMAL, Rounding.NEAREST, q.wide)
            dxq, gc = ste_backward(x, q.a_clip, dxq, spec)
            q.clip_grads["a_clip"] += gc
        if q.quantizes_weights:
            spec = QuantizerSpec(q.w_bits, Mode.SYMMETRIC, Rounding.NEAREST, q.wide)
            dwq, gc = ste_backward(w, q.w_clip, dwq, spec)
            q.clip_grads["w_clip"] += gc
        return dxq, dwq


class Dense(_QuantizedLinearOp):
    kind = "dense"

    def __init__(self, n_in, n_out, rng, bias=True, dtype=np.float32, gain=2.0):
        super().__init__()
        std = np.sqrt(gain / n_in)
        self.params["weight"] = (rng.standard_normal((n_out, n_in)) * std).astype(dtype)
        if bias:
            self.params["bias"] = np.zeros(n_out, dtype=dtype)
        self.zero_grad()

    def forward(self, x, ctx):
        xq, wq = self._quant_inputs(x, ctx)
        y = xq @ wq.T
        if "bias" in self.params:
            y = y + self.params["bias"]
        return y, (x, xq, wq)

    def backward(self, dy, cache, ctx):
        x, xq, wq = cache
        g = self._quant_grad(dy, ctx)
        dw = self._quant_weight_grad(g.T @ xq, ctx)
        dxq = g @ wq
        dx, dw = self._ste(x, dxq, self.params["weight"], dw, ctx)
        self.grads["weight"] += dw
        if "bias" in self.params:
            self.grads["bias"] += g.sum(axis=0)
        return dx


class Conv2D(_QuantizedLinearOp):
    kind = "conv2d"

    def __init__(self, c_in, c_out, k, rng, stride=1, pad=None, bias=False, dtype=np.float32):
        super().__init__()
        self.k, self.stride = k, stride
        self.pad = k // 2 if pad is None else pad
        std = np.sqrt(2.0 / (c_in * k * k))
        self.params["weight"] = (rng.standard_normal((c_out, c_in, k, k)) * std).astype(dtype)
        if bias:
            self.params["bias"] = np.zeros(c_out, dtype=dtype)
        self.zero_grad()

    def _cols(self, x):
        p, k, s = self.pad, self.k, self.stride
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s]
        n, c, ho, wo = win.shape[:4]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
        return cols, (n, c, ho, wo, x.shape)

    def forward(self, x, ctx):
        xq, wq = self._quant_inputs(x, ctx)
        cols, geom = self._cols(xq)
        n, _, ho, wo, _ = geom
        y = cols @ wq.reshape(wq.shape[0], -1).T
        if "bias" in self.params:
            y = y + self.params["bias"]
        y = y.reshape(n, ho, wo, -1).transpose(0, 3, 1, 2)
        return np.ascontiguousarray(y), (x, cols, geom, wq)

    def backward(self, dy, cache, ctx):
        x, cols, geom, wq = cache
        n, c, ho, wo, padded_shape = geom
        k, s, p = self.k, self.stride, self.pad
        g = self._quant_grad(dy, ctx)
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, -1)
        dw = self._quant_weight_grad((g2.T @ cols).reshape(wq.shape), ctx)
        dcols = (g2 @ wq.reshape(wq.shape[0], -1)).reshape(n, ho, wo, c, k, k)
        dxp = np.zeros(padded_shape, dtype=dy.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i : i + s * ho : s, j : j + s * wo : s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        dxq = dxp[:, :, p : padded_shape[2] - p, p : padded_shape[3] - p] if p else dxp
        dx, dw = self._ste(x, dxq, self.params["weight"], dw, ctx)
        self.grads["weight"] += dw
        if "bias" in self.params:
            self.grads["bias"] += g.sum(axis=(0, 2, 3))
        return dx


class BatchNorm(Layer):
    """Batch normalization over the channel axis (axis 1); full precision."""

    kind = "batchnorm"
    trainable = True

    def __init__(self, channels, dtype=np.float32, momentum=0.1, eps=1e-5):
        super().__init__()
        self.params["weight"] = np.ones(channels, dtype=dtype)
        self.params["bias"] = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum, self.eps = momentum, eps
        self.zero_grad()

    def _axes(self, x):
        return (0,) if x.ndim == 2 else (0, 2, 3)

    def _bcast(self, v, x):
        return v if x.ndim == 2 else v[None, :, None, None]

    def forward(self, x, ctx):
        axes = self._axes(x)
        if ctx.train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.size // x.shape[1]
            mom = self.momentum
            self.running_mean = ((1 - mom) * self.running_mean + mom * mean).astype(x.dtype)
            unbiased = var * m / max(m - 1, 1)
            self.running_var = ((1 - mom) * self.running_var + mom * unbiased).astype(x.dtype)
        else:
            mean, var = self.running_mean, self.running_var
        inv = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - self._bcast(mean, x)) * self._bcast(inv, x)
        y = xhat * self._bcast(self.params["weight"], x) + self._bcast(self.params["bias"], x)
        return y, (xhat, inv, ctx.train)

    def backward(self, dy, cache, ctx):
        xhat, inv, train = cache
        axes = self._axes(dy)
        self.grads["weight"] += (dy * xhat).sum(axis=axes)
        self.grads["bias"] += dy.sum(axis=axes)
        dxhat = dy * self._bcast(self.params["weight"], dy)
        if not train:
            return dxhat * self._bcast(inv, dy)
        m = dy.size // dy.shape[1]
        mean_d = dxhat.sum(axis=axes) / m
        mean_dx = (dxhat * xhat).sum(axis=axes) / m
        return (dxhat - self._bcast(mean_d, dy) - xhat * self._bcast(mean_dx, dy)) * self._bcast(inv, dy)


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, ctx):
        mask = x > 0
        return np.where(mask, x, 0).astype(x.dtype, copy=False), mask

    def backward(self, dy, cache, ctx):
        return np.where(cache, dy, 0).astype(dy.dtype, copy=False)


class MaxPool2D(Layer):
    """Non-overlapping k x k max pooling; spatial dims must divide by k."""

    kind = "pool"

    def __init__(self, k=2):
        super().__init__()
        self.k = k

    def forward(self, x, ctx):
        n, c, h, w = x.shape
        k = self.k
        if h % k or w % k:
            raise ValueError(f"MaxPool2D({k}) needs spatial dims divisible by {k}, got {h}x{w}")
        xr = x.reshape(n, c, h // k, k, w // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // k, w // k, k * k)
        idx = xr.argmax(axis=-1)
        y = np.take_along_axis(xr, idx[..., None], axis=-1)[..., 0]
        return y, (idx, x.shape)

    def backward(self, dy, cache, ctx):
        idx, shape = cache
        n, c, h, w = shape
        k = self.k
        d = np.zeros((n, c, h // k, w // k, k * k), dtype=dy.dtype)
        np.put_along_axis(d, idx[..., None], dy[..., None], axis=-1)
        return d.reshape(n, c, h // k, w // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


class GlobalAvgPool(Layer):
    kind = "pool"

    def forward(self, x, ctx):
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dy, cache, ctx):
        n, c, h, w = cache
        return np.broadcast_to((dy / (h * w))[:, :, None, None], cache).astype(dy.dtype)


class Flatten(Layer):
    kind = "flatten"

    def forward(self, x, ctx):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, dy, cache, ctx):
        return dy.reshape(cache)


class Sequential(Layer):
    kind = "sequential"

    def __init__(self, layers):
        super().__init__()
        self.layers = list(layers)

    def children(self):
        return self.layers

    def forward(self, x, ctx):
        caches = []
        for layer in self.layers:
            x, c = layer.forward(x, ctx)
            caches.append(c)
        return x, caches

    def backward(self, dy, cache, ctx):
        for layer, c in zip(reversed(self.layers), reversed(cache)):
            dy = layer.backward(dy, c, ctx)
        return dy


class ResidualAdd(Layer):
    """``relu(body(x) + shortcut(x))`` with a parameter-free shortcut.

    When the body changes resolution or width the shortcut subsamples by the
    stride and zero-pads the new channels.
    """

    kind = "residual"

    def __init__(self, body: Sequential, c_in, c_out, stride):
        super().__init__()
        self.body = body
        self.c_in, self.c_out, self.stride = c_in, c_out, stride
        self.relu = ReLU()

    def children(self):
        return (self.body,)

    def _shortcut(self, x):
        if self.stride > 1:
            x = x[:, :, :: self.stride, :: self.stride]
        if self.c_out != self.c_in:
            extra = self.c_out - self.c_in
            lo = extra // 2
            x = np.pad(x, ((0, 0), (lo, extra - lo), (0, 0), (0, 0)))
        return x

    def forward(self, x, ctx):
        h, cb = self.body.forward(x, ctx)
        y, cr = self.relu.forward(h + self._shortcut(x), ctx)
        return y, (cb, cr, x.shape)

    def backward(self, dy, cache, ctx):
        cb, cr, xshape = cache
        d = self.relu.backward(dy, cr, ctx)
        dx = self.body.backward(d, cb, ctx)
        ds = d
        if self.c_out != self.c_in:
            lo = (self.c_out - self.c_in) // 2
            ds = ds[:, lo : lo + self.c_in]
        if self.stride > 1:
            full = np.zeros(xshape, dtype=dy.dtype)
            full[:, :, :: self.stride, :: self.stride] = ds
            ds = full
        return dx + ds


def walk(layer: Layer):
    """Depth-first traversal in forward order."""
    yield layer
    for child in layer.children():
        yield from walk(child)
