"""Per-layer gradient clipping factor and the policies that move it.

The gradient clipping value of a layer is ``gamma * g_max``.  Four policies
decide ``gamma``:

* ``ours``   -- sign-based step toward the clip-out ratio ``alpha/(2^b-1)``
* ``minmax`` -- always 1 (interval spans the whole gradient range)
* ``fixed``  -- a constant ``gamma0``
* ``dsgc``   -- grid argmax of cosine similarity between ``G`` and ``Q(G)``
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace

import numpy as np

from .quantizer import Mode, QuantizerSpec, Rounding, quantize, dequantize
from .metrics import clip_ratios

# Upper bound on alpha when it is derived as tau / N(G) on a tiny tensor.
ALPHA_CAP = 0.5

DEFAULT_DSGC_GRID = tuple(round(0.05 * i, 2) for i in range(1, 21))


class PolicyKind(str, enum.Enum):
    OURS = "ours"
    MINMAX = "minmax"
    FIXED = "fixed"
    DSGC = "dsgc"


@dataclass(frozen=True)
class IntervalPolicy:
    kind: PolicyKind = PolicyKind.OURS
    gamma0: float = 1.0
    grid: tuple[float, ...] = DEFAULT_DSGC_GRID

    def __post_init__(self):
        object.__setattr__(self, "kind", PolicyKind(self.kind))
        if not 0.0 < self.gamma0 <= 1.0:
            raise ValueError(f"gamma0 must lie in (0, 1], got {self.gamma0!r}")
        grid = tuple(float(g) for g in self.grid)
        if not grid or any(not 0.0 < g <= 1.0 for g in grid):
            raise ValueError("DSGC grid must be non-empty with values in (0, 1]")
        object.__setattr__(self, "grid", grid)

    @classmethod
    def parse(cls, text: str, grid=None) -> IntervalPolicy:
        """Build from tokens like ``ours``, ``minmax``, ``dsgc`` or ``fixed:0.6``."""
        text = text.strip().lower()
        kind, _, arg = text.partition(":")
        extra = {} if grid is None else {"grid": tuple(grid)}
        if kind == "fixed":
            if not arg:
                raise ValueError("fixed policy needs a value, e.g. fixed:0.8")
            return cls(PolicyKind.FIXED, gamma0=float(arg), **extra)
        if arg:
            raise ValueError(f"policy {kind!r} takes no argument")
        return cls(PolicyKind(kind), **extra)

    @property
    def label(self) -> str:
        if self.kind is PolicyKind.FIXED:
            return f"fixed:{self.gamma0:g}"
        return self.kind.value

    def initial_gamma(self) -> float:
        return self.gamma0 if self.kind is PolicyKind.FIXED else 1.0


@dataclass(frozen=True)
class GradClipState:
    gamma: float = 1.0
    beta: float = 1e-3
    alpha: float = 1e-3
    bits: int = 4
    # when set, alpha is re-derived as tau / N(G) at every update
    tau: float | None = None
    steps: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.beta > 0:
            raise ValueError("beta must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.gamma_min <= self.gamma <= 1.0:
            raise ValueError(f"gamma {self.gamma!r} outside [{self.gamma_min}, 1]")

    @property
    def gamma_min(self) -> float:
        return 10.0 * self.beta

    def alpha_for(self, n: int) -> float:
        if self.tau is None:
            return self.alpha
        return min(self.tau / n, ALPHA_CAP)


def t_statistic(r_out: float, alpha: float, bits: int) -> float:
    return r_out - alpha / (2**bits - 1)


def _clip_out_ratio(mag: np.ndarray, c: float) -> float:
    # Exact r_out whenever c >= t_alpha; when c < t_alpha it overestimates r_out,
    # but both values already exceed alpha/(2^b-1), so sign(T) is unchanged.
    return np.count_nonzero(mag > c) / mag.size


def update_gamma(state: GradClipState, G) -> GradClipState:
    mag = np.abs(np.asarray(G, dtype=np.float64)).ravel()
    g_max = float(mag.max()) if mag.size else 0.0
    if g_max == 0.0:
        return state
    alpha = state.alpha_for(mag.size)
    T = t_statistic(_clip_out_ratio(mag, state.gamma * g_max), alpha, state.bits)
    gamma = state.gamma + state.beta * float(np.sign(T))
    gamma = min(max(gamma, state.gamma_min), 1.0)
    return replace(state, gamma=gamma, alpha=alpha, steps=state.steps + 1)


def optimality_residual(state: GradClipState, G) -> tuple[float, float]:
    """Distance of the current clip ratios from their optimal values."""
    G = np.asarray(G, dtype=np.float64)
    alpha = state.alpha_for(G.size)
    r_in, r_out = clip_ratios(G, state.gamma, alpha)
    b = state.bits
    return r_in - (2**b - 2) / (2**b - 1) * alpha, r_out - alpha / (2**b - 1)


def dsgc_select_gamma(G, spec: QuantizerSpec, grid=DEFAULT_DSGC_GRID) -> float:
    """Grid value of gamma maximizing cosine(G, Q(G)); ties go to the larger gamma."""
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ValueError("grid must be non-empty")
    g = np.asarray(G, dtype=np.float64).ravel()
    g_max = float(np.max(np.abs(g))) if g.size else 0.0
    if g_max == 0.0:
        return 1.0
    spec = QuantizerSpec(spec.bits, Mode.SYMMETRIC, Rounding.NEAREST, spec.wide)
    norm_g = np.linalg.norm(g)
    best, best_cos = grid[0], -np.inf
    for gamma in grid:
        q = dequantize(quantize(g, gamma * g_max, spec))
        nq = np.linalg.norm(q)
        cos = float(g @ q / (norm_g * nq)) if nq > 0 else 0.0
        if cos >= best_cos:
            best, best_cos = gamma, cos
    return best


def policy_step(policy: IntervalPolicy, state: GradClipState, G) -> GradClipState:
    if not np.any(np.asarray(G)):
        return state
    kind = policy.kind
    if kind is PolicyKind.OURS:
        return update_gamma(state, G)
    if kind is PolicyKind.MINMAX:
        return replace(state, gamma=1.0, steps=state.steps + 1)
    if kind is PolicyKind.FIXED:
        return replace(state, gamma=policy.gamma0, steps=state.steps + 1)
    gamma = dsgc_select_gamma(G, QuantizerSpec(state.bits, wide=state.bits > 8), policy.grid)
    # keeps the state invariant for grids reaching below gamma_min
    return replace(state, gamma=max(gamma, state.gamma_min), steps=state.steps + 1)
