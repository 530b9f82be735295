"""SGD for network weights, Adam for learnable clip values."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..quantizer import ClipParam
from .model import CLIP_FLOOR, Model


@dataclass
class OptimState:
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_lr: float = 1e-5
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    # epochs at which lr is multiplied by lr_decay
    milestones: tuple[int, ...] = ()
    lr_decay: float = 0.1

    def __post_init__(self):
        if not (self.lr > 0 and self.clip_lr > 0):
            raise ValueError("learning rates must be positive")

    def lr_at(self, epoch: int) -> float:
        return self.lr * self.lr_decay ** sum(epoch >= m for m in self.milestones)


class SGD:
    def __init__(self, model: Model, cfg: OptimState):
        self.model, self.cfg = model, cfg
        self.velocity = {
            (l.name, k): np.zeros_like(v) for l in model.param_layers() for k, v in l.params.items()
        }

    def step(self, lr: float):
        m, wd = self.cfg.momentum, self.cfg.weight_decay
        for l in self.model.param_layers():
            for k, p in l.params.items():
                g = l.grads[k] + wd * p
                v = self.velocity[(l.name, k)]
                v *= m
                v += g
                p -= (lr * v).astype(p.dtype)

    def state_dict(self):
        return {f"{n}/{k}": v for (n, k), v in self.velocity.items()}

    def load_state_dict(self, d):
        for (n, k), v in self.velocity.items():
            v[...] = d[f"{n}/{k}"]


class ClipAdam:
    """Adam over scalar clip values; values are floored to stay positive."""

    def __init__(self, model: Model, cfg: OptimState):
        self.model, self.cfg = model, cfg
        self.t = 0
        self.m: dict[str, float] = {}
        self.v: dict[str, float] = {}

    def step(self):
        b1, b2 = self.cfg.adam_betas
        self.t += 1
        for layer, which, param in self.model.clip_params():
            key = f"{layer.name}/{which}"
            g = layer.quant.clip_grads[which]
            m = b1 * self.m.get(key, 0.0) + (1 - b1) * g
            v = b2 * self.v.get(key, 0.0) + (1 - b2) * g * g
            self.m[key], self.v[key] = m, v
            mhat, vhat = m / (1 - b1**self.t), v / (1 - b2**self.t)
            new = param.value - self.cfg.clip_lr * mhat / (np.sqrt(vhat) + self.cfg.adam_eps)
            setattr(layer.quant, which, ClipParam(max(float(new), CLIP_FLOOR), param.learnable))

    def state_dict(self):
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, d):
        self.t, self.m, self.v = int(d["t"]), dict(d["m"]), dict(d["v"])
