"""Training runs and sweeps driven by :class:`RunConfig`."""

from __future__ import annotations

import itertools
import json
import logging
import statistics
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..engine import OptimState, Trainer, build_model, init_clip_values
from ..engine.layers import NumericError
from ..interval import IntervalPolicy
from ..quantizer import Rounding
from .config import ConfigError, RunConfig, config_from_mapping, parse_flat
from .datasets import Dataset, DatasetError, DatasetMissing, load_dataset, random_crop_flip
from .trace import TraceRecord, TraceWriter, layer_record, read_trace

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATASET = 3
EXIT_NUMERIC = 4


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (DatasetMissing, DatasetError)):
        return EXIT_DATASET
    if isinstance(exc, (NumericError, FloatingPointError)):
        return EXIT_NUMERIC
    raise exc


def prepare_data(cfg: RunConfig) -> Dataset:
    ds = load_dataset(
        cfg.dataset,
        cfg.data_root,
        n_samples=cfg.n_samples,
        n_classes=cfg.n_classes,
        input_shape=cfg.input_shape,
        class_sep=cfg.class_sep,
        seed=cfg.data_seed,
    )
    if cfg.n_train:
        ds.x_train, ds.y_train = ds.x_train[: cfg.n_train], ds.y_train[: cfg.n_train]
    if cfg.n_test:
        ds.x_test, ds.y_test = ds.x_test[: cfg.n_test], ds.y_test[: cfg.n_test]
    if cfg.val_size:
        if cfg.val_size >= len(ds.x_train):
            raise ConfigError(f"val_size {cfg.val_size} leaves no training data")
        k = len(ds.x_train) - cfg.val_size
        ds.x_test, ds.y_test = ds.x_train[k:], ds.y_train[k:]
        ds.x_train, ds.y_train = ds.x_train[:k], ds.y_train[:k]
    dtype = np.dtype(cfg.dtype)
    ds.x_train, ds.x_test = ds.x_train.astype(dtype), ds.x_test.astype(dtype)
    return ds


def make_trainer(cfg: RunConfig, ds: Dataset) -> Trainer:
    policy = cfg.interval_policy()
    model = build_model(
        cfg.arch,
        ds.input_shape,
        ds.n_classes,
        cfg.bit_widths(),
        seed=cfg.seed,
        policy=policy,
        beta=cfg.beta,
        tau=cfg.tau or None,
        alpha=cfg.alpha,
        hidden=cfg.hidden,
        width=cfg.width,
        dtype=np.dtype(cfg.dtype),
    )
    optim = OptimState(
        lr=cfg.lr,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
        clip_lr=cfg.clip_lr,
        milestones=cfg.milestones,
        lr_decay=cfg.lr_decay,
    )
    return Trainer(
        model, optim, policy, cfg.seed, Rounding(cfg.grad_rounding), cfg.quantize_weight_grads
    )


def _header(cfg: RunConfig) -> TraceRecord:
    return TraceRecord(
        "header",
        policy=cfg.interval_policy().label,
        bit_widths=str(cfg.bit_widths()),
        grad_rounding=cfg.grad_rounding,
        arch=cfg.arch,
        seed=cfg.seed,
    )


def train_run(cfg: RunConfig, resume: bool = False) -> dict:
    """Train one configuration; writes config.cfg, trace.jsonl, summary.json, checkpoint.npz."""
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = prepare_data(cfg)
    trainer = make_trainer(cfg, ds)
    ckpt = out / "checkpoint.npz"
    trace_path = out / "trace.jsonl"
    history = []
    if resume and ckpt.exists():
        trainer.load_checkpoint(ckpt)
        # keep only rows of completed epochs; later rows came from an interrupted epoch
        kept = [r for r in read_trace(trace_path) if r.kind == "header" or (r.epoch is not None and r.epoch < trainer.epoch)]
        history = [r for r in kept if r.kind == "epoch"]
        writer = TraceWriter(trace_path, "w")
        for r in kept:
            writer.write(r)
    else:
        (out / "config.cfg").write_text(cfg.dumps())
        init_clip_values(trainer.model, ds.x_train[: cfg.calib_size])
        writer = TraceWriter(trace_path, "w")
        writer.write(_header(cfg))
    status = "ok"
    try:
        with writer:
            for epoch in range(trainer.epoch, cfg.epochs):
                trainer.epoch = epoch
                order_rng = np.random.default_rng([cfg.seed, epoch])
                perm = order_rng.permutation(len(ds.x_train))
                for i in range(0, len(perm), cfg.batch_size):
                    idx = perm[i : i + cfg.batch_size]
                    xb, yb = ds.x_train[idx], ds.y_train[idx]
                    if cfg.augment:
                        xb = random_crop_flip(xb, order_rng)
                    it = trainer.iteration
                    loss, _, steps = trainer.train_step(xb, yb, full_stats=it % cfg.stats_every == 0)
                    for s in steps:
                        writer.write(layer_record(it, epoch, s))
                    writer.write(TraceRecord("step", it, epoch, loss=loss, acc=trainer.last_batch_acc))
                test_loss, test_acc = trainer.evaluate(ds.x_test, ds.y_test)
                rec = TraceRecord("epoch", trainer.iteration, epoch, loss=loss, test_loss=test_loss, test_acc=test_acc)
                writer.write(rec)
                writer.flush()
                history.append(rec)
                trainer.epoch = epoch + 1
                trainer.save_checkpoint(ckpt)
                log.info("epoch %d: test_acc=%.4f test_loss=%.4f", epoch, test_acc, test_loss)
    except NumericError:
        status = "numeric_abort"
        raise
    finally:
        summary = {
            "status": status,
            "arch": cfg.arch,
            "dataset": cfg.dataset,
            "bits": str(cfg.bit_widths()),
            "policy": cfg.interval_policy().label,
            "seed": cfg.seed,
            "epochs_completed": trainer.epoch,
            "iterations": trainer.iteration,
            "final_test_acc": history[-1].test_acc if history else None,
            "best_test_acc": max((h.test_acc for h in history), default=None),
            "final_test_loss": history[-1].test_loss if history else None,
            "final_gamma": {
                l.name: l.quant.grad_state.gamma
                for l in trainer.model.quantized_layers()
                if l.quant.grad_state is not None
            },
        }
        (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


# sweeps ------------------------------------------------------------------

SWEEP_KEYS = ("policy", "bits", "seed", "gamma")


@dataclass
class Cell:
    policy: str
    bits: str
    seed: int
    out: Path
    exit_code: int = 0
    acc: float | None = None


def parse_sweep(text: str) -> dict[str, list[str]]:
    values = parse_flat(text) if text.strip() else {}
    unknown = set(values) - set(SWEEP_KEYS)
    if unknown:
        raise ConfigError(f"unknown sweep keys: {', '.join(sorted(unknown))}")
    spec = {k: [v.strip() for v in raw.split(",") if v.strip()] for k, raw in values.items()}
    policies = spec.pop("policy", [])
    policies += [f"fixed:{g}" for g in spec.pop("gamma", [])]
    if policies:
        spec["policy"] = policies
    return spec


def _slug(text: str) -> str:
    return text.replace("/", "-").replace(":", "")


def run_sweep(base: RunConfig, spec: dict[str, list[str]], out) -> list[Cell]:
    out = Path(out)
    policies = spec.get("policy") or [base.policy]
    bits = spec.get("bits") or [base.bits]
    seeds = spec.get("seed") or [str(base.seed)]
    cells = []
    for b, p, s in itertools.product(bits, policies, seeds):
        cell_out = out / "cells" / f"{_slug(b)}_{_slug(p)}_s{s}"
        try:
            label = IntervalPolicy.parse(p).label
        except ValueError as e:
            raise ConfigError(str(e)) from None
        cell = Cell(label, b, int(s), cell_out)
        try:
            values = parse_flat(base.dumps())
            values.update(policy=p, bits=b, seed=s, out=str(cell_out))
            cfg = config_from_mapping(values)
            cell.acc = train_run(cfg)["final_test_acc"]
        except Exception as e:  # noqa: BLE001 - failed cells are recorded, the sweep continues
            try:
                cell.exit_code = exit_code_for(e)
            except Exception:
                log.exception("cell %s failed", cell_out)
                cell.exit_code = 1
            log.warning("cell %s failed with exit code %d: %s", cell_out.name, cell.exit_code, e)
        cells.append(cell)
    return cells


def sweep_table(cells: list[Cell]) -> list[dict]:
    rows = {}
    for c in cells:
        row = rows.setdefault((c.policy, c.bits), {"policy": c.policy, "bits": c.bits, "accs": [], "failed": 0})
        if c.exit_code == 0 and c.acc is not None:
            row["accs"].append(c.acc)
        else:
            row["failed"] += 1
    table = []
    for row in rows.values():
        accs = row.pop("accs")
        row["n"] = len(accs)
        row["mean_acc"] = statistics.fmean(accs) if accs else None
        row["std_acc"] = statistics.pstdev(accs) if len(accs) > 1 else 0.0 if accs else None
        table.append(row)
    return table


def check_order(table: list[dict], margin: float = 0.0) -> list[str]:
    """Violations of ``ours >= minmax + margin`` per bit-width (accuracy as a fraction)."""
    problems = []
    by = {(r["policy"], r["bits"]): r["mean_acc"] for r in table}
    for bits in sorted({r["bits"] for r in table}):
        ours = by.get(("ours", bits))
        ref = by.get(("minmax", bits), by.get(("fixed:1", bits)))
        if ours is None or ref is None:
            continue
        if ours < ref + margin:
            problems.append(f"{bits}: ours {ours:.4f} < minmax {ref:.4f} + {margin}")
    return problems
