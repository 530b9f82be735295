"""One-step training loop, evaluation and checkpoints."""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..interval import GradClipState, IntervalPolicy
from ..metrics import GradErrorReport
from ..quantizer import ClipParam, Rounding
from .layers import NumericError, walk
from .model import Model, RunContext, softmax_cross_entropy
from .optim import SGD, ClipAdam, OptimState

CHECKPOINT_VERSION = 1


@dataclass
class LayerStep:
    """Per-layer telemetry for one iteration."""

    layer: str
    gamma: float
    g_max: float
    r_out: float
    report: GradErrorReport | None


class Trainer:
    def __init__(
        self,
        model: Model,
        optim: OptimState,
        policy: IntervalPolicy,
        seed: int,
        grad_rounding: Rounding = Rounding.STOCHASTIC,
        quantize_weight_grads: bool = False,
    ):
        self.model = model
        self.optim_cfg = optim
        self.policy = policy
        self.rng = np.random.default_rng(seed)
        self.grad_rounding = Rounding(grad_rounding)
        self.quantize_weight_grads = quantize_weight_grads
        self.sgd = SGD(model, optim)
        self.adam = ClipAdam(model, optim)
        self.iteration = 0
        self.epoch = 0
        self.last_ctx: RunContext | None = None

    def _ctx(self, train: bool, full_stats: bool = True) -> RunContext:
        return RunContext(
            policy=self.policy,
            rng=self.rng,
            train=train,
            quantize=not self.model.bits.is_fp,
            grad_rounding=self.grad_rounding,
            quantize_weight_grads=self.quantize_weight_grads,
            full_stats=full_stats,
        )

    def train_step(self, x, y, full_stats: bool = True):
        """Forward, backward and parameter update on one batch.

        Returns ``(loss, reports, layer_steps)``: one :class:`GradErrorReport`
        per quantized layer when ``full_stats`` is set (empty otherwise) and
        one :class:`LayerStep` per quantized layer regardless.
        """
        ctx = self._ctx(True, full_stats)
        self.model.zero_grad()
        logits, cache = self.model.forward(x, ctx)
        loss, dlogits = softmax_cross_entropy(logits, y)
        if not np.isfinite(loss):
            raise NumericError("non-finite loss")
        self.model.backward(dlogits, cache, ctx)
        self.sgd.step(self.optim_cfg.lr_at(self.epoch))
        if self.model.clip_params():
            self.adam.step()
        self.iteration += 1
        self.last_ctx = ctx
        # backward visits layers last-to-first; report them in forward order
        steps = [LayerStep(*row) for row in reversed(ctx.layer_log)]
        reports = [s.report for s in steps if s.report is not None]
        acc = float(np.mean(logits.argmax(axis=1) == y))
        self.last_batch_acc = acc
        return loss, reports, steps

    def evaluate(self, x, y, batch_size: int = 500) -> tuple[float, float]:
        """Mean loss and accuracy with running BN statistics."""
        ctx = self._ctx(False)
        total_loss, correct = 0.0, 0
        for i in range(0, len(x), batch_size):
            xb, yb = x[i : i + batch_size], y[i : i + batch_size]
            logits, _ = self.model.forward(xb, ctx)
            loss, _ = softmax_cross_entropy(logits, yb)
            total_loss += loss * len(xb)
            correct += int(np.sum(logits.argmax(axis=1) == yb))
        return total_loss / len(x), correct / len(x)

    # checkpoints ---------------------------------------------------------

    def save_checkpoint(self, path):
        arrays = {}
        for l in walk(self.model.net):
            for k, v in l.params.items():
                arrays[f"param/{l.name}/{k}"] = v
            if hasattr(l, "running_mean"):
                arrays[f"bn/{l.name}/mean"] = l.running_mean
                arrays[f"bn/{l.name}/var"] = l.running_var
        for k, v in self.sgd.state_dict().items():
            arrays[f"sgd/{k}"] = v
        quant = {}
        for l in self.model.quantized_layers():
            q = l.quant
            quant[l.name] = {
                "w_clip": q.w_clip.value,
                "a_clip": q.a_clip.value,
                "grad_state": None if q.grad_state is None else asdict(q.grad_state),
            }
        meta = {
            "version": CHECKPOINT_VERSION,
            "iteration": self.iteration,
            "epoch": self.epoch,
            "rng": self.rng.bit_generator.state,
            "adam": self.adam.state_dict(),
            "quant": quant,
        }
        arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
        buf = io.BytesIO()
        np.savez(buf, **arrays)
        Path(path).write_bytes(buf.getvalue())

    def load_checkpoint(self, path):
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {meta.get('version')!r}")
            for l in walk(self.model.net):
                for k in l.params:
                    l.params[k][...] = data[f"param/{l.name}/{k}"]
                if hasattr(l, "running_mean"):
                    l.running_mean = data[f"bn/{l.name}/mean"].copy()
                    l.running_var = data[f"bn/{l.name}/var"].copy()
            self.sgd.load_state_dict({k[4:]: data[k] for k in data.files if k.startswith("sgd/")})
        for l in self.model.quantized_layers():
            entry = meta["quant"][l.name]
            q = l.quant
            q.w_clip = ClipParam(entry["w_clip"], q.w_clip.learnable)
            q.a_clip = ClipParam(entry["a_clip"], q.a_clip.learnable)
            if entry["grad_state"] is not None:
                q.grad_state = GradClipState(**entry["grad_state"])
        self.adam.load_state_dict(meta["adam"])
        self.rng.bit_generator.state = meta["rng"]
        self.iteration, self.epoch = meta["iteration"], meta["epoch"]
