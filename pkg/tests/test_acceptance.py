"""Acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the pytest terminal
summary (section "acceptance criteria").
"""

import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE
from fxpgrad.experiment.analysis import BOUND_RTOL
from fxpgrad.experiment.cli import main as cli_main
from fxpgrad.experiment.config import load_config
from fxpgrad.experiment.runner import check_order, run_sweep, sweep_table
from fxpgrad.interval import GradClipState, dsgc_select_gamma, update_gamma
from fxpgrad.metrics import clip_ratios, error_entire, error_large, grad_error_report, max_abs
from fxpgrad.quantizer import Mode, QuantizerSpec, Rounding, clip, dequantize, quantize, scale_factor

from oracles import ref_stats

REPO = Path(__file__).resolve().parent.parent


def record(n, ok, detail):
    ACCEPTANCE[n] = (bool(ok), detail)
    assert ok, detail


def _sample(rng, kind, n):
    if kind == "laplace":
        return rng.laplace(size=n)
    if kind == "normal":
        return rng.standard_normal(n)
    if kind == "student3":
        return rng.standard_t(3, size=n)
    if kind == "cauchy":
        return rng.standard_cauchy(n)
    return rng.uniform(-1, 1, n)


KINDS = ("laplace", "normal", "student3", "cauchy", "uniform")


def test_criterion_1_quantizer_properties():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    failures = []
    for bits in (2, 4, 8):
        for mode in Mode:
            spec = QuantizerSpec(bits, mode)
            for trial in range(200):
                c = float(np.exp(rng.uniform(-5, 5)))
                x = rng.standard_normal(int(rng.integers(1, 500))) * c * rng.uniform(0.1, 3)
                q = quantize(x, c, spec)
                s = scale_factor(c, spec)
                tag = f"b={bits} {mode.value} trial {trial}"
                if q.codes.min() < spec.qmin or q.codes.max() > spec.qmax:
                    failures.append(f"code range {tag}")
                if np.any(np.abs(dequantize(q) - clip(x, c, mode)) > s / 2 * (1 + 1e-12)):
                    failures.append(f"error bound {tag}")
                if not np.array_equal(quantize(dequantize(q), c, spec).codes, q.codes):
                    failures.append(f"idempotence {tag}")
                if mode is Mode.SYMMETRIC and not np.array_equal(quantize(-x, c, spec).codes, -q.codes):
                    failures.append(f"symmetry {tag}")
        # unbiasedness of stochastic rounding inside the interval
        sto = QuantizerSpec(bits, Mode.SYMMETRIC, Rounding.STOCHASTIC)
        c = 1.0
        s = scale_factor(c, sto)
        for x in rng.uniform(-c, c, 10):
            draws = dequantize(quantize(np.full(100_000, x), c, sto, rng))
            frac = x / s - np.floor(x / s)
            se = s * np.sqrt(frac * (1 - frac) / 100_000)
            if abs(draws.mean() - x) > 4 * se + 1e-12:
                failures.append(f"unbiasedness b={bits} x={x:.4f}")
    dt = time.perf_counter() - t0
    record(1, not failures and dt < 60, f"{len(failures)} property failures over b in (2,4,8), {dt:.1f}s"
           + (f"; first: {failures[0]}" if failures else ""))


def test_criterion_2_metrics_match_loop_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(100):
        n = int(np.exp(rng.uniform(np.log(10), np.log(100_000))))
        G = _sample(rng, KINDS[i % len(KINDS)], n) * np.exp(rng.uniform(-8, 2))
        gamma, bits, alpha = rng.uniform(0.05, 1.0), int(rng.choice([2, 4, 8])), rng.uniform(1e-3, 0.3)
        Q = dequantize(quantize(G, gamma * max_abs(G), QuantizerSpec(bits)))
        rep = grad_error_report(G, Q, gamma, bits, alpha)
        ref = ref_stats(G.tolist(), Q.tolist(), gamma, bits, alpha)
        for k in ("e_entire", "e_large", "r_in", "r_out", "ulg"):
            a, b = getattr(rep, k), ref[k]
            rel = abs(a - b) / abs(b) if b else abs(a)
            worst = max(worst, rel)
    dt = time.perf_counter() - t0
    record(2, worst <= 1e-12 and dt < 60, f"worst relative difference {worst:.2e} over 100 tensors, {dt:.1f}s")


def test_criterion_3_bound_holds_for_nearest_rounding():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    violations = 0
    for i in range(1000):
        G = _sample(rng, KINDS[i % len(KINDS)], int(rng.integers(100, 5000)))
        gamma, bits, alpha = rng.uniform(0.01, 1.0), int(rng.integers(2, 9)), rng.uniform(1e-3, 0.5)
        Q = dequantize(quantize(G, gamma * max_abs(G), QuantizerSpec(bits)))
        rep = grad_error_report(G, Q, gamma, bits, alpha)
        if rep.e_large > rep.ulg * (1 + BOUND_RTOL):
            violations += 1
    dt = time.perf_counter() - t0
    record(3, violations == 0 and dt < 60, f"{violations} violations of E(G_L) <= ULG in 1000 draws, {dt:.1f}s")


def test_criterion_4_update_converges():
    t0 = time.perf_counter()
    G = np.random.default_rng(4).laplace(size=100_000)
    alpha, beta = 1e-3, 1e-3
    s = GradClipState(gamma=1.0, beta=beta, alpha=alpha, bits=4)
    gammas, r_outs = [], []
    for _ in range(2000):
        r_outs.append(clip_ratios(G, s.gamma, alpha)[1])
        s = update_gamma(s, G)
        gammas.append(s.gamma)
    tail = np.array(gammas[-500:])
    band = tail.max() - tail.min()
    gap = abs(np.mean(r_outs[-500:]) - alpha / 15)
    dt = time.perf_counter() - t0
    ok = band <= 4 * beta + 1e-12 and gap <= alpha / 2 and dt < 60
    record(4, ok, f"final gamma {tail[-1]:.3f}, band {band:.4f} (limit {4 * beta}), "
           f"|mean r_out - a/15| = {gap:.2e} (limit {alpha / 2}), {dt:.1f}s")


def test_criterion_5_cosine_interval_trades_large_gradient_error():
    t0 = time.perf_counter()
    spec = QuantizerSpec(4)
    rows = []
    # Cauchy-like tails are covered separately in test_interval: there the cosine pick is gamma = 1
    for seed, kind in enumerate(("laplace", "student3")):
        G = _sample(np.random.default_rng(50 + seed), kind, 100_000)
        g_max = max_abs(G)
        alpha = 10 / G.size
        gd = dsgc_select_gamma(G, spec)
        q1 = dequantize(quantize(G, g_max, spec))
        qd = dequantize(quantize(G, gd * g_max, spec))
        rows.append((
            kind, gd,
            error_entire(G, qd, g_max) < error_entire(G, q1, g_max),
            error_large(G, qd, alpha, g_max) > error_large(G, q1, alpha, g_max),
        ))
    dt = time.perf_counter() - t0
    ok = all(a and b for _, _, a, b in rows) and dt < 60
    record(5, ok, "; ".join(f"{k}: gamma={g:.2f} E(G) lower={a} E(G_L) higher={b}" for k, g, a, b in rows))


def _mnist_root():
    root = os.environ.get("FXPGRAD_MNIST_ROOT") or str(REPO / "data" / "mnist")
    return root if (Path(root) / "train-images-idx3-ubyte").exists() or (Path(root) / "train-images-idx3-ubyte.gz").exists() else None


def _acc(table, policy, bits):
    return next((r["mean_acc"] for r in table if r["policy"] == policy and r["bits"] == bits), None)


@pytest.mark.slow
def test_criterion_6_desk_scale_ordering(tmp_path):
    notes = []
    ok = True

    # 30-minute smoke variant: MLP on MNIST, ours >= minmax at 4/4/4
    mnist = _mnist_root()
    if mnist is None:
        ok = False
        notes.append("MNIST smoke: no data (set FXPGRAD_MNIST_ROOT or run scripts/mnist_from_npm.py)")
    else:
        base = load_config(REPO / "presets" / "mlp_mnist_444.cfg", {"data_root": mnist})
        cells = run_sweep(base, {"policy": ["ours", "minmax"], "seed": ["0", "1", "2"]}, tmp_path / "mnist")
        table = sweep_table(cells)
        ours, mm = _acc(table, "ours", "4/4/4"), _acc(table, "minmax", "4/4/4")
        smoke_ok = not check_order(table, 0.0)
        ok &= smoke_ok
        notes.append(f"MNIST smoke ours {100 * ours:.2f} vs minmax {100 * mm:.2f} -> {'ok' if smoke_ok else 'ordering violated'}")

    # full variant: ResNet-20 on CIFAR-10, >= 20 epochs, three seeds
    cifar = os.environ.get("FXPGRAD_CIFAR_ROOT")
    if not cifar:
        ok = False
        notes.append("CIFAR ResNet-20: not run, FXPGRAD_CIFAR_ROOT unset (no CIFAR data available)")
    else:
        base = load_config(REPO / "presets" / "resnet20_cifar10_444.cfg", {"data_root": cifar})
        seeds = ["0", "1", "2"]
        cells = run_sweep(base, {"policy": ["ours", "minmax", "dsgc"], "seed": seeds}, tmp_path / "c444")
        cells += run_sweep(base, {"policy": ["ours"], "bits": ["8/8/8", "fp"], "seed": seeds}, tmp_path / "c8fp")
        table = sweep_table(cells)
        ours, mm, ds = (_acc(table, p, "4/4/4") for p in ("ours", "minmax", "dsgc"))
        a8, afp = _acc(table, "ours", "8/8/8"), _acc(table, "ours", "fp")
        full_ok = (None not in (ours, mm, ds, a8, afp) and ours >= mm + 0.005 and ours > ds
                   and abs(a8 - afp) <= 0.015)
        ok &= full_ok
        notes.append(f"CIFAR ours {ours} minmax {mm} dsgc {ds} 8/8/8 {a8} fp {afp}")
    record(6, ok, "; ".join(notes))


def test_criterion_7_gradients_match_finite_differences():
    import test_engine as te

    t0 = time.perf_counter()
    checks = [
        te.test_dense_gradient,
        lambda: te.test_conv_gradient(1),
        lambda: te.test_conv_gradient(2),
        te.test_batchnorm_gradient,
        te.test_relu_gradient,
        te.test_maxpool_gradient,
        te.test_gap_and_flatten_gradients,
        lambda: te.test_residual_gradient(2, 2, 1),
        lambda: te.test_residual_gradient(2, 4, 2),
        te.test_cross_entropy_gradient,
        te.test_full_model_gradient_unquantized,
    ]
    failed = []
    for i, check in enumerate(checks):
        try:
            check()
        except AssertionError as e:
            failed.append(f"check {i}: {str(e).splitlines()[0]}")
    dt = time.perf_counter() - t0
    record(7, not failed and dt < 120, f"{len(checks) - len(failed)}/{len(checks)} layer checks within 1e-4, {dt:.1f}s"
           + (f"; {failed[0]}" if failed else ""))


def test_criterion_8_determinism(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(
        "arch = mlp\ndataset = synthetic-gauss\nn_samples = 600\nn_classes = 4\ninput_shape = 1, 8, 8\n"
        "hidden = 32, 32\nbits = 4/4/4\nepochs = 2\nbatch_size = 32\nstats_every = 3\nlr = 0.05\nseed = 7\n"
    )
    for name in ("a", "b"):
        assert cli_main(["train", "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
    a = (tmp_path / "a" / "trace.jsonl").read_bytes()
    b = (tmp_path / "b" / "trace.jsonl").read_bytes()
    record(8, a == b, f"two runs, {len(a)} trace bytes, identical={a == b}")
