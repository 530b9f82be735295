"""Layer-wise uniform fixed-point quantizer.

A tensor is clipped to a quantization interval, normalized by a scale factor,
rounded to an integer code and (optionally) mapped back to reals:

    x_n  = clip(x, c) / s
    code = round(x_n)
    Q(x) = s * code

Two interval shapes are supported. ``Symmetric`` covers zero-centered data
(weights, gradients) with codes in ``[-(2^(b-1)-1), 2^(b-1)-1]``;
``HalfNormal`` covers non-negative data (post-ReLU activations) with codes in
``[0, 2^b-1]``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

MIN_BITS = 2
MAX_BITS = 8
# Only reachable with wide=True; used by transparency checks in the tests.
MAX_WIDE_BITS = 16


class Mode(str, enum.Enum):
    SYMMETRIC = "symmetric"
    HALF_NORMAL = "half_normal"


class Rounding(str, enum.Enum):
    NEAREST = "nearest"
    STOCHASTIC = "stochastic"


@dataclass(frozen=True)
class QuantizerSpec:
    bits: int
    mode: Mode = Mode.SYMMETRIC
    rounding: Rounding = Rounding.NEAREST
    wide: bool = False

    def __post_init__(self):
        hi = MAX_WIDE_BITS if self.wide else MAX_BITS
        if not isinstance(self.bits, (int, np.integer)) or not MIN_BITS <= self.bits <= hi:
            raise ValueError(f"bits must be an integer in [{MIN_BITS}, {hi}], got {self.bits!r}")
        object.__setattr__(self, "mode", Mode(self.mode))
        object.__setattr__(self, "rounding", Rounding(self.rounding))

    @property
    def qmax(self) -> int:
        if self.mode is Mode.SYMMETRIC:
            return 2 ** (self.bits - 1) - 1
        return 2**self.bits - 1

    @property
    def qmin(self) -> int:
        return -self.qmax if self.mode is Mode.SYMMETRIC else 0

    def with_rounding(self, rounding: Rounding) -> QuantizerSpec:
        return QuantizerSpec(self.bits, self.mode, Rounding(rounding), self.wide)


@dataclass(frozen=True)
class QTensor:
    """Integer codes plus the scale that maps them back to reals.

    Codes are stored as int64 regardless of the logical bit-width.
    """

    codes: np.ndarray
    scale: float
    spec: QuantizerSpec

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale!r}")
        codes = np.asarray(self.codes)
        if codes.size and (codes.min() < self.spec.qmin or codes.max() > self.spec.qmax):
            raise ValueError("codes outside the range implied by the quantizer spec")

    @property
    def shape(self):
        return self.codes.shape


@dataclass
class ClipParam:
    """Clipping value of a weight or activation quantizer."""

    value: float
    learnable: bool = True

    def __post_init__(self):
        if not self.value > 0:
            raise ValueError(f"clip value must be positive, got {self.value!r}")


def _check_clip(c) -> float:
    c = float(c)
    if not c > 0 or not np.isfinite(c):
        raise ValueError(f"clipping value must be finite and > 0, got {c!r}")
    return c


def scale_factor(c: float, spec: QuantizerSpec) -> float:
    """Step size of the quantization grid for clipping value ``c``."""
    return _check_clip(c) / spec.qmax


def clip(x, c: float, mode: Mode = Mode.SYMMETRIC) -> np.ndarray:
    c = _check_clip(c)
    x = np.asarray(x)
    lo = -c if Mode(mode) is Mode.SYMMETRIC else 0.0
    return np.minimum(np.maximum(x, lo), c)


def round_half_away(x: np.ndarray) -> np.ndarray:
    """Nearest integer; exact .5 ties go away from zero."""
    x = np.asarray(x, dtype=np.float64)
    r = np.round(x)
    t = np.trunc(x)
    tie = np.abs(x - t) == 0.5
    if np.any(tie):
        r = np.where(tie, t + np.sign(x), r)
    return r


def stochastic_round(x_n, rng: np.random.Generator) -> np.ndarray:
    """Round down or up at random; up with probability equal to the fractional part.

    The expectation of the result equals ``x_n``. Works elementwise on arrays
    and returns a float array of integral values (``int`` for a scalar input).
    """
    x = np.asarray(x_n, dtype=np.float64)
    lo = np.floor(x)
    up = rng.random(x.shape) < (x - lo)
    out = lo + up
    if out.ndim == 0:
        return int(out)
    return out


def quantize(x, c: float, spec: QuantizerSpec, rng: np.random.Generator | None = None) -> QTensor:
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("quantize: input contains non-finite values")
    s = scale_factor(c, spec)
    x_n = clip(x, c, spec.mode) / s
    if spec.rounding is Rounding.STOCHASTIC:
        if rng is None:
            raise ValueError("stochastic rounding requires a random generator")
        r = stochastic_round(x_n, rng)
    else:
        r = round_half_away(x_n)
    # c/s can land one ulp above qmax, so the clamp is needed after rounding.
    codes = np.clip(r, spec.qmin, spec.qmax).astype(np.int64)
    return QTensor(codes, s, spec)


def dequantize(q: QTensor) -> np.ndarray:
    return q.codes * q.scale


def fake_quantize(x, c: float, spec: QuantizerSpec, rng: np.random.Generator | None = None) -> np.ndarray:
    """``dequantize(quantize(x))`` cast back to the dtype of ``x``."""
    x = np.asarray(x)
    return dequantize(quantize(x, c, spec, rng)).astype(x.dtype, copy=False)


def ste_backward(x, c: ClipParam | float, upstream_grad, spec: QuantizerSpec):
    """Straight-through gradients of ``Q(x)`` w.r.t. ``x`` and the clip value.

    Inside the interval the rounding is treated as identity. Elements pinned to
    the interval edge ``+c`` (or ``-c`` in symmetric mode) contribute their
    upstream gradient times the sign of that edge to ``grad_c``; elements pinned
    at zero in half-normal mode contribute nothing.
    """
    cval = _check_clip(c.value if isinstance(c, ClipParam) else c)
    x = np.asarray(x)
    up = np.asarray(upstream_grad)
    if x.shape != up.shape:
        raise ValueError(f"shape mismatch: x {x.shape} vs upstream {up.shape}")
    upper = x >= cval
    if spec.mode is Mode.SYMMETRIC:
        lower = x <= -cval
        grad_c = float(up[upper].sum() - up[lower].sum())
        inside = ~(upper | lower)
    else:
        grad_c = float(up[upper].sum())
        inside = (x > 0) & ~upper
    grad_x = np.where(inside, up, 0).astype(up.dtype, copy=False)
    return grad_x, grad_c
