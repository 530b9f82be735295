"""Fixed-point training with adaptive gradient quantization intervals."""

from .quantizer import (
    ClipParam,
    Mode,
    QTensor,
    QuantizerSpec,
    Rounding,
    clip,
    dequantize,
    quantize,
    scale_factor,
    stochastic_round,
    ste_backward,
)
from .metrics import (
    GradErrorReport,
    clip_ratios,
    error_entire,
    error_large,
    grad_error_report,
    large_grad_threshold,
    max_abs,
    ulg,
    ulg_derivative,
)
from .interval import (
    GradClipState,
    IntervalPolicy,
    PolicyKind,
    dsgc_select_gamma,
    optimality_residual,
    policy_step,
    t_statistic,
    update_gamma,
)

__version__ = "0.1.0"
