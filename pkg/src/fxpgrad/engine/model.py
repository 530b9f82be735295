"""Model container, run context and architecture builders."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from ..interval import GradClipState, IntervalPolicy
from ..quantizer import ClipParam, Rounding
from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    GlobalAvgPool,
    Layer,
    LayerQuant,
    MaxPool2D,
    NumericError,
    ReLU,
    ResidualAdd,
    Sequential,
    walk,
)

ARCHS = ("mlp", "smallcnn", "resnet20")
CLIP_FLOOR = 1e-3


@dataclass
class Bits:
    """Bit-widths for weights/activations/gradients; ``None`` means full precision."""

    w: int | None = 4
    a: int | None = 4
    g: int | None = 4

    @classmethod
    def parse(cls, text: str) -> Bits:
        text = str(text).strip().lower()
        if text == "fp":
            return cls(None, None, None)
        parts = text.split("/")
        if len(parts) == 1:
            parts = parts * 3
        if len(parts) != 3:
            raise ValueError(f"bits must be 'fp', 'b' or 'w/a/g', got {text!r}")
        vals = [None if p == "fp" else int(p) for p in parts]
        return cls(*vals)

    def __str__(self):
        return "/".join("fp" if v is None else str(v) for v in (self.w, self.a, self.g))

    @property
    def is_fp(self) -> bool:
        return self.w is None and self.a is None and self.g is None


@dataclass
class RunContext:
    """Per-pass switches and telemetry sinks threaded through the layers."""

    policy: IntervalPolicy = field(default_factory=IntervalPolicy)
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    train: bool = True
    quantize: bool = True
    grad_rounding: Rounding = Rounding.STOCHASTIC
    quantize_weight_grads: bool = False
    full_stats: bool = True
    calibrating: bool = False
    calibration: dict = field(default_factory=dict)
    layer_log: list = field(default_factory=list)
    quantizer_calls: Counter = field(default_factory=Counter)

    def count_quantizer(self, layer_name, what):
        self.quantizer_calls[(layer_name, what)] += 1

    def log_layer(self, name, state, g_max, r_out, report):
        self.layer_log.append((name, state.gamma, g_max, r_out, report))


class Model:
    def __init__(self, net: Sequential, arch: str, input_shape, n_classes, bits: Bits):
        self.net = net
        self.arch = arch
        self.input_shape = tuple(input_shape)
        self.n_classes = n_classes
        self.bits = bits
        for i, layer in enumerate(walk(net)):
            layer.name = f"{i:02d}.{layer.kind}"

    def layers(self):
        return list(walk(self.net))

    def weight_layers(self) -> list[Layer]:
        return [l for l in walk(self.net) if isinstance(l, (Dense, Conv2D))]

    def quantized_layers(self) -> list[Layer]:
        return [l for l in self.weight_layers() if l.quant is not None]

    def param_layers(self) -> list[Layer]:
        return [l for l in walk(self.net) if l.params]

    def clip_params(self) -> list[tuple[Layer, str, ClipParam]]:
        out = []
        for l in self.quantized_layers():
            q = l.quant
            if q.quantizes_weights and q.w_clip.learnable:
                out.append((l, "w_clip", q.w_clip))
            if q.quantizes_acts and q.a_clip.learnable:
                out.append((l, "a_clip", q.a_clip))
        return out

    def zero_grad(self):
        for l in walk(self.net):
            l.zero_grad()

    def forward(self, x, ctx: RunContext):
        if tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"batch shape {x.shape[1:]} does not match model input {self.input_shape}")
        logits, cache = self.net.forward(x, ctx)
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite logits in forward pass")
        return logits, cache

    def backward(self, dlogits, cache, ctx: RunContext):
        dx = self.net.backward(dlogits, cache, ctx)
        for l in self.param_layers():
            for k, g in l.grads.items():
                if not np.all(np.isfinite(g)):
                    raise NumericError(f"non-finite gradient in {l.name}.{k}")
        return dx


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. the logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -float(logp[np.arange(n), labels].mean())
    d = np.exp(logp)
    d[np.arange(n), labels] -= 1.0
    return loss, (d / n).astype(logits.dtype)


def _attach_quant(model_layers, bits: Bits, beta, tau, alpha, policy: IntervalPolicy, wide):
    """Attach quantizers to every weight layer except the first and the last."""
    for layer in model_layers[1:-1]:
        state = None
        if bits.g is not None:
            state = GradClipState(
                gamma=policy.initial_gamma(), beta=beta, alpha=alpha, bits=bits.g, tau=tau
            )
        layer.quant = LayerQuant(bits.w, bits.a, bits.g, grad_state=state, wide=wide)


def build_model(
    arch: str,
    input_shape,
    n_classes: int,
    bits: Bits | str = "4/4/4",
    *,
    seed: int = 0,
    policy: IntervalPolicy | None = None,
    beta: float = 1e-3,
    tau: float | None = 10.0,
    alpha: float = 1e-3,
    hidden=(128,),
    width: int = 16,
    bias: bool = True,
    dtype=np.float32,
    wide: bool = False,
) -> Model:
    """Build ``mlp``, ``smallcnn`` or ``resnet20`` with first/last layers left in full precision."""
    if isinstance(bits, str):
        bits = Bits.parse(bits)
    policy = policy or IntervalPolicy()
    rng = np.random.default_rng(seed)
    arch = arch.lower()
    if arch == "mlp":
        d_in = int(np.prod(input_shape))
        hidden = list(hidden)
        layers = [Flatten(), Dense(d_in, hidden[0], rng, bias, dtype), ReLU()]
        for i, h in enumerate(hidden):
            h_next = hidden[i + 1] if i + 1 < len(hidden) else h
            layers += [Dense(h, h_next, rng, bias, dtype), ReLU()]
        layers.append(Dense(hidden[-1], n_classes, rng, bias, dtype, gain=1.0))
        net = Sequential(layers)
    elif arch == "smallcnn":
        c, w = input_shape[0], width
        net = Sequential([
            Conv2D(c, w, 3, rng, dtype=dtype), BatchNorm(w, dtype), ReLU(), MaxPool2D(2),
            Conv2D(w, 2 * w, 3, rng, dtype=dtype), BatchNorm(2 * w, dtype), ReLU(), MaxPool2D(2),
            Conv2D(2 * w, 4 * w, 3, rng, dtype=dtype), BatchNorm(4 * w, dtype), ReLU(),
            GlobalAvgPool(),
            Dense(4 * w, n_classes, rng, bias, dtype, gain=1.0),
        ])
    elif arch == "resnet20":
        c, w = input_shape[0], width
        layers = [Conv2D(c, w, 3, rng, dtype=dtype), BatchNorm(w, dtype), ReLU()]
        c_in = w
        for stage, c_out in enumerate((w, 2 * w, 4 * w)):
            for block in range(3):
                stride = 2 if stage > 0 and block == 0 else 1
                body = Sequential([
                    Conv2D(c_in, c_out, 3, rng, stride=stride, dtype=dtype), BatchNorm(c_out, dtype), ReLU(),
                    Conv2D(c_out, c_out, 3, rng, dtype=dtype), BatchNorm(c_out, dtype),
                ])
                layers.append(ResidualAdd(body, c_in, c_out, stride))
                c_in = c_out
        layers += [GlobalAvgPool(), Dense(c_in, n_classes, rng, bias, dtype, gain=1.0)]
        net = Sequential(layers)
    else:
        raise ValueError(f"unknown architecture {arch!r}; expected one of {ARCHS}")
    model = Model(net, arch, input_shape, n_classes, bits)
    if not bits.is_fp:
        _attach_quant(model.weight_layers(), bits, beta, tau, alpha, policy, wide)
    return model


def init_clip_values(model: Model, calibration_batch, percentile: float = 99.9) -> Model:
    """Set weight/activation clip values from percentiles of |w| and of the layer inputs."""
    x = np.asarray(calibration_batch)
    if x.size == 0 or x.shape[0] == 0:
        raise ValueError("calibration batch is empty")
    ctx = RunContext(train=False, quantize=False, calibrating=True)
    model.forward(x.astype(model.weight_layers()[0].params["weight"].dtype), ctx)
    for layer in model.quantized_layers():
        q = layer.quant
        w = np.abs(layer.params["weight"]).ravel()
        q.w_clip = ClipParam(max(float(np.percentile(w, percentile)), CLIP_FLOOR), q.w_clip.learnable)
        acts = ctx.calibration[layer.name].ravel()
        q.a_clip = ClipParam(max(float(np.percentile(acts, percentile)), CLIP_FLOOR), q.a_clip.learnable)
    return model
