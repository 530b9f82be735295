"""Command line entry point: ``fxpgrad {train,sweep,analyze,plot}``.

Exit codes: 0 ok, 1 ordering check failed, 2 bad config, 3 dataset missing or
malformed, 4 numeric abort, 5 corrupt trace, 6 missing series.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .analysis import MissingSeries, analyze, plot
from .config import ConfigError, RunConfig, load_config
from .runner import check_order, exit_code_for, parse_sweep, run_sweep, sweep_table, train_run
from .trace import TraceError

EXIT_ORDER = 1
EXIT_TRACE = 5
EXIT_SERIES = 6

log = logging.getLogger("fxpgrad")


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    if args.out:
        out["out"] = args.out
    if args.seed is not None:
        out["seed"] = str(args.seed)
    return out


def _load(args) -> RunConfig:
    if not args.config:
        raise ConfigError("--config is required")
    return load_config(args.config, _overrides(args))


def cmd_train(args) -> int:
    cfg = _load(args)
    summary = train_run(cfg, resume=args.resume)
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def _fmt_acc(v):
    return "" if v is None else f"{100 * v:.2f}"


def cmd_sweep(args) -> int:
    base = _load(args)
    text = Path(args.sweep).read_text() if args.sweep else ""
    spec = parse_sweep(text)
    out = Path(args.out or base.out)
    cells = run_sweep(base, spec, out)
    table = sweep_table(cells)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "table.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["policy", "bits", "n", "failed", "mean_acc", "std_acc"])
        for r in table:
            w.writerow([r["policy"], r["bits"], r["n"], r["failed"], _fmt_acc(r["mean_acc"]), _fmt_acc(r["std_acc"])])
    lines = ["| policy | W/A/G | runs | failed | top-1 (%) |", "|---|---|---|---|---|"]
    for r in table:
        acc = _fmt_acc(r["mean_acc"]) or "FAILED"
        if r["n"] > 1:
            acc += f" ± {_fmt_acc(r['std_acc'])}"
        lines.append(f"| {r['policy']} | {r['bits']} | {r['n']} | {r['failed']} | {acc} |")
    md = "\n".join(lines) + "\n"
    (out / "table.md").write_text(md)
    print(md, end="")
    if args.assert_order:
        problems = check_order(table, args.margin / 100.0)
        for p in problems:
            print(f"ORDER VIOLATION {p}", file=sys.stderr)
        if problems:
            return EXIT_ORDER
    return 0


def cmd_analyze(args) -> int:
    out = args.out or "analysis"
    result = analyze(args.runs, out)
    for label, run in result["runs"].items():
        print(f"{label}: policy={run['policy']} bits={run['bits']} acc={run['final_test_acc']} "
              f"bound_violations={run['bound_violations']}")
    for pair, layers in result.get("deltas", {}).items():
        signs = " ".join(f"{n}:{'+' if d['sign'] > 0 else '-' if d['sign'] < 0 else '0'}" for n, d in layers.items())
        print(f"delta E(G_L) {pair}: {signs}")
    return 0


def cmd_plot(args) -> int:
    files = plot(args.analysis, args.out, args.layers)
    for f in files:
        print(f)
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run config file (flat key = value)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fxpgrad", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", parents=[common], help="train one configuration")
    t.add_argument("--resume", action="store_true", help="continue from the run's checkpoint")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sweep", parents=[common], help="train a grid of configurations")
    s.add_argument("--sweep", help="sweep spec: policy / bits / seed / gamma lists")
    s.add_argument("--assert-order", action="store_true", help="fail unless ours >= minmax per bit-width")
    s.add_argument("--margin", type=float, default=0.0, help="required ours - minmax gap in points")
    s.set_defaults(func=cmd_sweep)

    a = sub.add_parser("analyze", parents=[common], help="derive statistics from run traces")
    a.add_argument("runs", nargs="+", help="run directories holding trace.jsonl")
    a.set_defaults(func=cmd_analyze)

    pl = sub.add_parser("plot", parents=[common], help="render SVG charts from an analysis directory")
    pl.add_argument("analysis", help="directory written by analyze")
    pl.add_argument("--layers", nargs="*", help="restrict to these layer names")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except TraceError as e:
        print(f"error: corrupt trace: {e}", file=sys.stderr)
        return EXIT_TRACE
    except MissingSeries as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SERIES
    except Exception as e:  # noqa: BLE001
        try:
            code = exit_code_for(e)
        except Exception:
            raise e from None
        print(f"error: {e}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
