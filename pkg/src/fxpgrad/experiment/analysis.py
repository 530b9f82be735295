"""Post-hoc analysis of run traces and SVG rendering of the resulting series."""

from __future__ import annotations

import csv
import json
import statistics
from collections import defaultdict
from pathlib import Path

from .svg import line_chart
from .trace import TraceRecord, read_trace

# Relative slack for float rounding when checking E(G_L) <= ULG.
BOUND_RTOL = 1e-9


class MissingSeries(LookupError):
    pass


def bound_terms(rec: TraceRecord) -> tuple[float, float]:
    """(clip-in term, clip-out term) of ULG from a layer row."""
    clip_in = rec.gamma / (2**rec.bits - 2) * rec.r_in / rec.alpha
    clip_out = (1.0 - rec.gamma) * rec.r_out / rec.alpha
    return clip_in, clip_out


def bound_violated(rec: TraceRecord, stochastic: bool) -> bool:
    """Nearest rounding must satisfy E(G_L) <= ULG; stochastic rounding doubles the clip-in term."""
    if rec.alpha == 0:
        return rec.e_large > 0
    clip_in, clip_out = bound_terms(rec)
    bound = (2 * clip_in if stochastic else clip_in) + clip_out
    return rec.e_large > bound * (1 + BOUND_RTOL) + 1e-15


def _run_label(path: Path, seen: set) -> str:
    label = path.name or "run"
    base, i = label, 1
    while label in seen:
        i += 1
        label = f"{base}-{i}"
    seen.add(label)
    return label


def summarize_run(records: list[TraceRecord]) -> dict:
    header = records[0]
    stochastic = header.grad_rounding == "stochastic"
    layers = defaultdict(list)
    for r in records:
        if r.kind == "layer":
            layers[r.layer].append(r)
    layer_summary = {}
    total_violations = 0
    for name, rows in layers.items():
        full = [r for r in rows if r.has_errors]
        violations = sum(bound_violated(r, stochastic) for r in full)
        total_violations += violations
        layer_summary[name] = {
            "iterations": len(rows),
            "stats_rows": len(full),
            "final_gamma": rows[-1].gamma,
            "mean_gamma": statistics.fmean(r.gamma for r in rows),
            "mean_e_entire": statistics.fmean(r.e_entire for r in full) if full else None,
            "mean_e_large": statistics.fmean(r.e_large for r in full) if full else None,
            "mean_ulg": statistics.fmean(r.ulg for r in full) if full else None,
            "bound_violations": violations,
        }
    epochs = [r for r in records if r.kind == "epoch"]
    return {
        "policy": header.policy,
        "bits": header.bit_widths,
        "grad_rounding": header.grad_rounding,
        "seed": header.seed,
        "final_test_acc": epochs[-1].test_acc if epochs else None,
        "bound_violations": total_violations,
        "bound_checked_against": "2*clip_in + clip_out" if stochastic else "ulg",
        "layers": layer_summary,
    }


def _write_csv(path: Path, header: list[str], rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if v is None else repr(v) if isinstance(v, float) else v for v in row])


def analyze(run_dirs, out) -> dict:
    """Parse traces, write per-layer series (CSV + series.json) and analysis.json.

    With several runs, ``deltas`` compares each run's mean E(G_L) per layer
    against the first run.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    seen: set = set()
    runs, series = {}, {}
    for d in run_dirs:
        d = Path(d)
        records = read_trace(d / "trace.jsonl")
        label = _run_label(d, seen)
        runs[label] = summarize_run(records)
        run_out = out / label
        run_out.mkdir(exist_ok=True)
        layers = defaultdict(list)
        for r in records:
            if r.kind == "layer":
                layers[r.layer].append(r)
        run_series = {"layers": {}, "loss": {"iteration": [], "loss": []}}
        cols = ["iteration", "gamma", "g_max", "r_out", "r_in", "t_alpha", "e_entire", "e_large", "ulg", "alpha"]
        for name, rows in layers.items():
            _write_csv(run_out / f"layer_{name}.csv", cols, ([getattr(r, c) for c in cols] for r in rows))
            full = [r for r in rows if r.has_errors]
            run_series["layers"][name] = {
                "iteration": [r.iteration for r in rows],
                "gamma": [r.gamma for r in rows],
                "stats_iteration": [r.iteration for r in full],
                "e_entire": [r.e_entire for r in full],
                "e_large": [r.e_large for r in full],
            }
        steps = [r for r in records if r.kind == "step"]
        _write_csv(run_out / "loss.csv", ["iteration", "loss", "acc"], ([r.iteration, r.loss, r.acc] for r in steps))
        run_series["loss"] = {"iteration": [r.iteration for r in steps], "loss": [r.loss for r in steps]}
        series[label] = run_series
    result = {"runs": runs}
    labels = list(runs)
    if len(labels) > 1:
        ref = runs[labels[0]]["layers"]
        deltas = {}
        for label in labels[1:]:
            per_layer = {}
            for name, s in runs[label]["layers"].items():
                a, b = s["mean_e_large"], ref.get(name, {}).get("mean_e_large")
                if a is None or b is None:
                    continue
                diff = a - b
                per_layer[name] = {"delta_e_large": diff, "sign": (diff > 0) - (diff < 0)}
            deltas[f"{label} - {labels[0]}"] = per_layer
        result["deltas"] = deltas
    (out / "analysis.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    (out / "series.json").write_text(json.dumps(series, sort_keys=True) + "\n")
    return result


def plot(analysis_dir, out=None, layers=None) -> list[Path]:
    """Render gamma and E(G_L) per layer plus the loss curve; one legend entry per run."""
    analysis_dir = Path(analysis_dir)
    out = Path(out) if out else analysis_dir / "plots"
    path = analysis_dir / "series.json"
    if not path.exists():
        raise MissingSeries(f"{path} not found; run analyze first")
    series = json.loads(path.read_text())
    if not series:
        raise MissingSeries("series.json holds no runs")
    out.mkdir(parents=True, exist_ok=True)
    names = sorted({n for run in series.values() for n in run.get("layers", {})})
    if layers:
        missing = set(layers) - set(names)
        if missing:
            raise MissingSeries(f"no series for layers {sorted(missing)}")
        names = [n for n in names if n in layers]
    written = []

    def emit(fname, svg):
        p = out / fname
        p.write_text(svg)
        written.append(p)

    for name in names:
        gam, el = [], []
        for label, run in series.items():
            s = run["layers"].get(name)
            if s is None:
                continue
            gam.append((label, s["iteration"], s["gamma"]))
            el.append((label, s["stats_iteration"], s["e_large"]))
        emit(f"layer_{name}_gamma.svg", line_chart(gam, f"clipping factor, layer {name}", "iteration", "gamma"))
        emit(f"layer_{name}_e_large.svg", line_chart(el, f"E(G_L), layer {name}", "iteration", "E(G_L)", logy=True))
    loss = []
    for label, run in series.items():
        if "loss" not in run or not run["loss"]["iteration"]:
            raise MissingSeries(f"run {label} has no loss series")
        loss.append((label, run["loss"]["iteration"], run["loss"]["loss"]))
    emit("loss.svg", line_chart(loss, "training loss", "iteration", "loss"))
    return written
