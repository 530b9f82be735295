from .layers import (
    BatchNorm,
    Conv2D,
    Dense,
    Flatten,
    GlobalAvgPool,
    LayerQuant,
    MaxPool2D,
    NumericError,
    ReLU,
    ResidualAdd,
    Sequential,
)
from .model import Bits, Model, RunContext, build_model, init_clip_values, softmax_cross_entropy
from .optim import OptimState
from .trainer import LayerStep, Trainer
