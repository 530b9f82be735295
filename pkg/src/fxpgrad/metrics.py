"""Quantization-error statistics for one layer's gradient tensor.

Notation used throughout: ``G`` is the full-precision gradient tensor of a
layer, ``g_max = max|G|``, and the large-gradient set ``G_L`` holds the
elements with ``|g| >= t_alpha`` where ``t_alpha`` is the order statistic that
leaves roughly a fraction ``alpha`` of the elements at or above it.  Large
gradients are split by the gradient clipping value ``gamma * g_max`` into
clip-in (``|g| <= gamma*g_max``) and clip-out (``|g| > gamma*g_max``) parts.

All reductions run over the flattened tensor in linear index order.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

# alpha * n is compared against integers; this absorbs representation error in
# products like 0.3 * 10.
_COUNT_EPS = 1e-9


@dataclass(frozen=True)
class GradErrorReport:
    g_max: float
    t_alpha: float
    e_entire: float
    e_large: float
    r_in: float
    r_out: float
    ulg: float
    # effective large-gradient ratio N(G_L)/N(G) after tie handling
    alpha: float
    gamma: float
    bits: int

    def as_dict(self) -> dict:
        return asdict(self)


def _flat(G) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64).ravel()
    if G.size == 0:
        raise ValueError("gradient tensor is empty")
    return G


def _check_alpha(alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha!r}")
    return float(alpha)


def max_abs(G) -> float:
    return float(np.max(np.abs(_flat(G))))


def large_count(n: int, alpha: float) -> int:
    """Number of order statistics to keep: ceil(alpha * n), at least 1."""
    return max(1, math.ceil(alpha * n - _COUNT_EPS))


def large_grad_threshold(G, alpha: float) -> float:
    """Smallest magnitude among the ``ceil(alpha*N)`` largest ``|g|``.

    The fraction of elements with ``|g| >= t`` is then the smallest fraction
    attainable by any threshold that is still ``>= alpha``.
    """
    alpha = _check_alpha(alpha)
    mag = np.abs(_flat(G))
    k = large_count(mag.size, alpha)
    # k-th largest == (n-k)-th smallest
    return float(np.partition(mag, mag.size - k)[mag.size - k])


def large_mask(G, alpha: float) -> np.ndarray:
    mag = np.abs(_flat(G))
    return mag >= large_grad_threshold(mag, alpha)


def error_entire(G, Q, g_max: float) -> float:
    G, Q = _flat(G), _flat(Q)
    if G.shape != Q.shape:
        raise ValueError("G and Q must have the same number of elements")
    if g_max == 0:
        return 0.0
    return float(np.sum(np.abs(G - Q)) / (G.size * g_max))


def error_large(G, Q, alpha: float, g_max: float) -> float:
    G, Q = _flat(G), _flat(Q)
    if G.shape != Q.shape:
        raise ValueError("G and Q must have the same number of elements")
    if g_max == 0:
        return 0.0
    m = large_mask(G, alpha)
    return float(np.sum(np.abs(G[m] - Q[m])) / (np.count_nonzero(m) * g_max))


def clip_ratios(G, gamma: float, alpha: float, g_max: float | None = None) -> tuple[float, float]:
    """``(r_in, r_out)``: clip-in and clip-out large-gradient counts over ``N(G)``."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma!r}")
    mag = np.abs(_flat(G))
    if g_max is None:
        g_max = float(mag.max())
    m = mag >= large_grad_threshold(mag, alpha)
    c = gamma * g_max
    n_out = int(np.count_nonzero(m & (mag > c)))
    n_in = int(np.count_nonzero(m)) - n_out
    return n_in / mag.size, n_out / mag.size


def _check_ulg_args(gamma, bits, alpha):
    if bits < 2:
        raise ValueError(f"bits must be >= 2 for the error bound, got {bits!r}")
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must lie in (0, 1], got {gamma!r}")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha!r}")


def ulg(gamma: float, bits: int, r_in: float, r_out: float, alpha: float) -> float:
    """Upper bound on ``E(G_L)``.

    Clip-in elements err by at most half a step, ``gamma*g_max/(2^b-2)``;
    clip-out elements by at most ``(1-gamma)*g_max``.  Normalizing by
    ``N(G_L)*g_max`` leaves the ratios and ``alpha``.
    """
    _check_ulg_args(gamma, bits, alpha)
    return (gamma / (2**bits - 2) * r_in + (1.0 - gamma) * r_out) / alpha


def ulg_derivative(gamma: float, bits: int, r_in: float, r_out: float, alpha: float) -> float:
    """d(ULG)/d(gamma) with the clip-out ratio held fixed."""
    _check_ulg_args(gamma, bits, alpha)
    return (r_in / (2**bits - 2) - r_out) / alpha


def grad_error_report(G, Q, gamma: float, bits: int, alpha: float) -> GradErrorReport:
    """All statistics for one layer/iteration from ``G`` and its quantized copy ``Q``.

    ``alpha`` is the nominal large-gradient ratio; the report carries the
    effective one, ``N(G_L)/N(G)``, which differs only under magnitude ties and
    is the value used for the bound.
    """
    alpha = _check_alpha(alpha)
    G, Q = _flat(G), _flat(Q)
    mag = np.abs(G)
    g_max = float(mag.max())
    if g_max == 0:
        return GradErrorReport(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, float(gamma), int(bits))
    n = G.size
    t = float(np.partition(mag, n - large_count(n, alpha))[n - large_count(n, alpha)])
    m = mag >= t
    n_large = int(np.count_nonzero(m))
    err = np.abs(G - Q)
    c = gamma * g_max
    n_out = int(np.count_nonzero(m & (mag > c)))
    r_in, r_out = (n_large - n_out) / n, n_out / n
    a_eff = n_large / n
    return GradErrorReport(
        g_max=g_max,
        t_alpha=t,
        e_entire=float(np.sum(err) / (n * g_max)),
        e_large=float(np.sum(err[m]) / (n_large * g_max)),
        r_in=r_in,
        r_out=r_out,
        ulg=ulg(gamma, bits, r_in, r_out, a_eff),
        alpha=a_eff,
        gamma=float(gamma),
        bits=int(bits),
    )
