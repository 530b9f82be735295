"""``trace.jsonl``: one JSON object per line, append-only.

Row kinds:

``header``  run metadata (bits, policy, gradient rounding); first line
``layer``   per quantized layer per iteration; error statistics only on
            stats iterations
``step``    per iteration training loss / batch accuracy
``epoch``   end-of-epoch evaluation
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path

SCHEMA_VERSION = 1
KINDS = ("header", "layer", "step", "epoch")


class TraceError(ValueError):
    def __init__(self, path, line_no, msg):
        super().__init__(f"{path}:{line_no}: {msg}")
        self.path, self.line_no = path, line_no


@dataclass
class TraceRecord:
    kind: str
    iteration: int | None = None
    epoch: int | None = None
    layer: str | None = None
    gamma: float | None = None
    g_max: float | None = None
    t_alpha: float | None = None
    e_entire: float | None = None
    e_large: float | None = None
    r_in: float | None = None
    r_out: float | None = None
    ulg: float | None = None
    alpha: float | None = None
    bits: int | None = None
    loss: float | None = None
    acc: float | None = None
    test_loss: float | None = None
    test_acc: float | None = None
    policy: str | None = None
    bit_widths: str | None = None
    grad_rounding: str | None = None
    arch: str | None = None
    seed: int | None = None

    def to_json(self) -> str:
        d = {"schema": SCHEMA_VERSION}
        for f in fields(self):
            v = getattr(self, f.name)
            if v is not None:
                d[f.name] = v
        return json.dumps(d, allow_nan=False)

    @property
    def has_errors(self) -> bool:
        return self.e_large is not None

    @classmethod
    def from_dict(cls, d: dict) -> TraceRecord:
        known = {f.name for f in fields(cls)}
        extra = set(d) - known - {"schema"}
        if extra:
            raise ValueError(f"unknown fields {sorted(extra)}")
        return cls(**{k: v for k, v in d.items() if k != "schema"})


def layer_record(iteration, epoch, step) -> TraceRecord:
    rec = TraceRecord("layer", iteration, epoch, step.layer, gamma=step.gamma, g_max=step.g_max, r_out=step.r_out)
    r = step.report
    if r is not None:
        rec.t_alpha, rec.e_entire, rec.e_large = r.t_alpha, r.e_entire, r.e_large
        rec.r_in, rec.ulg, rec.alpha, rec.bits = r.r_in, r.ulg, r.alpha, r.bits
    return rec


class TraceWriter:
    def __init__(self, path, mode="w"):
        self.path = Path(path)
        self._fh = open(self.path, mode, encoding="utf-8", newline="\n")

    def write(self, rec: TraceRecord):
        self._fh.write(rec.to_json() + "\n")

    def flush(self):
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _check_finite(rec: TraceRecord):
    for f in fields(rec):
        v = getattr(rec, f.name)
        if isinstance(v, float) and not math.isfinite(v):
            raise ValueError(f"non-finite {f.name}")


def read_trace(path) -> list[TraceRecord]:
    """Parse and validate a trace; raises :class:`TraceError` on the first bad line."""
    path = Path(path)
    if not path.exists():
        raise TraceError(path, 0, "trace file missing")
    records = []
    with open(path, encoding="utf-8") as fh:
        for i, line in enumerate(fh, 1):
            if not line.strip():
                raise TraceError(path, i, "blank line")
            try:
                d = json.loads(line)
            except json.JSONDecodeError as e:
                raise TraceError(path, i, f"invalid JSON ({e.msg})") from None
            if not isinstance(d, dict):
                raise TraceError(path, i, "row is not an object")
            if d.get("schema") != SCHEMA_VERSION:
                raise TraceError(path, i, f"unsupported schema version {d.get('schema')!r}")
            if d.get("kind") not in KINDS:
                raise TraceError(path, i, f"unknown row kind {d.get('kind')!r}")
            try:
                rec = TraceRecord.from_dict(d)
                _check_finite(rec)
            except (TypeError, ValueError) as e:
                raise TraceError(path, i, str(e)) from None
            records.append(rec)
    if not records:
        raise TraceError(path, 0, "trace is empty")
    if records[0].kind != "header":
        raise TraceError(path, 1, "first row must be the header")
    return records
