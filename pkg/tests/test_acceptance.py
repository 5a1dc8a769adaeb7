"""Acceptance gate: one test per criterion, each reporting a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -s`` to see the lines as they
happen; they are also repeated in the terminal summary.
"""

import copy
import csv
import io
import json
import subprocess
import sys
import time
from contextlib import redirect_stdout
from pathlib import Path

import numpy as np
import pytest

from qrange.cost_model import BitWidths, LayerGeom, dynamic_cost_bits, static_cost_bits
from qrange.estimators import DSGC, CurrentMinMax, InHindsightMinMax, RunningMinMax
from qrange.harness import cli
from qrange.harness.config import load_config
from qrange.harness.runner import read_jsonl, run_training, strip_timing
from qrange.qnn import Model
from qrange.quantizer import QuantRange, Rounding, fake_quantize, make_grid
from qrange.tensor import RandomSource

from oracles import MLP_2x, TWO_CONV, analytic_grads, central_differences, grid_search_clip

ROOT = Path(__file__).resolve().parents[1]
OFF = {"enabled": False}
FP32 = {"quant": {"weights": OFF, "activations": OFF, "gradients": OFF}}
RUNNING = {"quant": {"activations": {"estimator": "running_min_max"}, "gradients": {"estimator": "running_min_max"}}}
HINDSIGHT = {"quant": {"activations": {"estimator": "in_hindsight"}, "gradients": {"estimator": "in_hindsight"}}}


# -- 1 ----------------------------------------------------------------------

EXPECTED_ROWS = {
    "resnet18.layer1.conv": (428, 1996, 366),
    "resnet18.layer4.conv": (674, 1066, 58),
    "mobilenetv2.pw_expand": (1374, 10782, 685),
    "mobilenetv2.dw_960": (100, 468, 366),
}


def test_criterion_1_cost_table(report):
    t0 = time.perf_counter()
    buf = io.StringIO()
    with redirect_stdout(buf):
        code = cli.main(["cost-table", "--bw", "8", "--ba", "8", "--bacc", "32", "--format", "csv"])
    elapsed = time.perf_counter() - t0
    rows = {r["layer"]: r for r in csv.DictReader(io.StringIO(buf.getvalue()))}
    errs = []
    for name, (s, d, pct) in EXPECTED_ROWS.items():
        r = rows[name]
        got = (int(r["static_kib"]), int(r["dynamic_kib"]), int(r["delta_pct"].strip("+%")))
        if abs(got[0] - s) > 1 or abs(got[1] - d) > 1 or abs(got[2] - pct) > 1:
            errs.append(f"{name}: {got} != {(s, d, pct)}")
    ok = code == 0 and not errs and elapsed < 1.0
    assert report(1, "cost table rows (4 of 5)", ok, f"{elapsed * 1000:.0f} ms {'; '.join(errs)}")


# -- 2 ----------------------------------------------------------------------


def test_criterion_2_overhead_identity(report):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(1000):
        dw = bool(rng.integers(0, 2))
        c_in = int(rng.integers(1, 4097))
        g = LayerGeom(c_in, c_in if dw else int(rng.integers(1, 4097)), int(rng.integers(1, 8)),
                      int(rng.integers(1, 513)), int(rng.integers(1, 513)), dw)
        b_a = int(rng.integers(1, 33))
        b = BitWidths(int(rng.integers(1, 33)), b_a, int(rng.integers(b_a, 65)))
        if dynamic_cost_bits(g, b) - static_cost_bits(g, b) != 2 * g.c_out * g.w * g.h * b.b_acc:
            bad += 1
    elapsed = time.perf_counter() - t0
    assert report(2, "dynamic - static == 2*c_out*w*h*b_acc", bad == 0 and elapsed < 1.0,
                  f"1000 geometries, {bad} mismatches, {elapsed * 1000:.0f} ms")


# -- 3 ----------------------------------------------------------------------


def random_stream(rng, steps):
    out = []
    for _ in range(steps):
        n = int(rng.integers(16, 256))
        out.append((rng.standard_normal(n) * np.exp(rng.uniform(-3, 3)) + rng.uniform(-2, 2)).astype(np.float32))
    return out


def outlier_tensor(rng):
    n = int(rng.integers(256, 2048))
    x = rng.standard_normal(n)
    k = int(rng.integers(1, 6))
    pos = rng.choice(n, k, replace=False)
    x[pos] = rng.choice([-1, 1], k) * rng.uniform(5, 100, k)
    return x.astype(np.float32)


def test_criterion_3_estimator_laws(report):
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    failures = []

    # (a) causality: once calibrated, the step-t range never depends on the step-t tensor
    for s in range(100):
        est = InHindsightMinMax(float(rng.uniform(0, 0.99))).calibrate(random_stream(rng, 2))
        for t, x in enumerate(random_stream(rng, 10)):
            probe = copy.deepcopy(est)
            perturbed = x * np.float32(rng.uniform(-50, 50)) + np.float32(rng.uniform(-9, 9))
            if probe.range_for_step(perturbed) != est.range_for_step(x):
                failures.append(f"causality stream {s} step {t}")

    # (b) eta = 0 reductions and (c) containment
    for s in range(100):
        stream = random_stream(rng, 10)
        eta = float(rng.uniform(0, 0.99))
        cur, run0, hind0 = CurrentMinMax(), RunningMinMax(0.0), InHindsightMinMax(0.0)
        run, hind = RunningMinMax(eta), InHindsightMinMax(eta)
        lo = min(float(x.min()) for x in stream)
        hi = max(float(x.max()) for x in stream)
        prev = None
        for x in stream:
            c = cur.range_for_step(x)
            if run0.range_for_step(x) != c or hind0.range_for_step(x) != (prev or c):
                failures.append(f"eta=0 reduction stream {s}")
            prev = c
            for r in (run.range_for_step(x), hind.range_for_step(x)):
                if not lo <= r.q_min <= r.q_max <= hi:
                    failures.append(f"containment stream {s}")

    # (d) DSGC frozen between updates
    stream = random_stream(rng, 100)
    dsgc = DSGC(interval=100)
    r0 = dsgc.range_for_step(stream[0])
    if any(dsgc.range_for_step(x) != r0 for x in stream[1:]):
        failures.append("DSGC range moved between updates")

    # (e) golden-section argmax vs dense grid
    worst = 0.0
    for _ in range(20):
        x = outlier_tensor(rng)
        gap = abs(DSGC().search_clip(x) - grid_search_clip(x))
        worst = max(worst, gap)
        if gap > 0.02:
            failures.append(f"DSGC vs grid gap {gap:.3f}")

    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 30
    detail = f"{elapsed:.1f} s, DSGC worst gap {worst:.4f}" + (f"; {failures[:3]}" if failures else "")
    assert report(3, "estimator law suite (a-e)", ok, detail)


# -- 4 ----------------------------------------------------------------------


def test_criterion_4_quantizer(report):
    rng = np.random.default_rng(4)
    t0 = time.perf_counter()
    failures = []
    for _ in range(100):
        lo = float(rng.uniform(-100, 100))
        g = make_grid(QuantRange(lo, lo + float(np.exp(rng.uniform(-5, 5)))), int(rng.integers(2, 17)))
        span = g.nudged_max - g.nudged_min
        x = np.sort(rng.uniform(g.nudged_min - 0.2 * span, g.nudged_max + 0.2 * span, 1000))
        q = fake_quantize(x, g)
        if not np.array_equal(fake_quantize(q, g), q):
            failures.append("idempotence")
        codes = np.rint(q / g.scale) + g.zero_point
        if np.any(codes < 0) or np.any(codes > g.levels) or not np.array_equal(g.dequantize(codes), q):
            failures.append("grid membership")
        if np.any(np.diff(q) < 0):
            failures.append("monotonicity")
        inside = (x >= g.nudged_min) & (x <= g.nudged_max)
        if np.any(np.abs(q - x)[inside] > g.scale / 2 * (1 + 1e-9)):
            failures.append("error bound")

    n = 100_000
    src = RandomSource(44)
    worst = 0.0
    for _ in range(100):
        lo = float(rng.uniform(-10, 0))
        g = make_grid(QuantRange(lo, lo + float(rng.uniform(0.5, 20))), 8, Rounding.STOCHASTIC)
        v = float(rng.uniform(g.nudged_min, g.nudged_max))
        draws = fake_quantize(np.full(n, v), g, src)
        frac = (v / g.scale + g.zero_point) % 1.0
        se = g.scale * np.sqrt(frac * (1 - frac)) / np.sqrt(n)
        z = abs(draws.mean() - v) / se if se > 0 else 0.0
        worst = max(worst, z)
        if z > 3:
            failures.append(f"stochastic mean {z:.2f} SE off")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 30
    detail = f"{elapsed:.1f} s, worst stochastic deviation {worst:.2f} SE" + (f"; {failures[:3]}" if failures else "")
    assert report(4, "quantizer laws on 1e5 inputs", ok, detail)


# -- 5 ----------------------------------------------------------------------


def test_criterion_5_gradient_fidelity(report):
    t0 = time.perf_counter()
    worst, flips = 0.0, 0
    ok = True
    for specs, shape, classes in ((MLP_2x, (5, 2), 2), (TWO_CONV, (4, 1, 6, 6), 3)):
        model = Model(specs, seed=0, dtype=np.float64)
        ok &= sum(p.size for p in model.named_params().values()) <= 500
        rng = np.random.default_rng(3)
        x, y = rng.standard_normal(shape), rng.integers(0, classes, shape[0])
        num, f = central_differences(model, x, y, h=1e-3)
        flips += f
        ana = analytic_grads(model, x, y)
        for k in num:
            err = np.abs(ana[k] - num[k]) - (1e-6 + 1e-4 * np.abs(num[k]))
            worst = max(worst, float(np.max(err)))
    elapsed = time.perf_counter() - t0
    ok = ok and worst <= 0 and flips == 0 and elapsed < 60
    assert report(5, "gradients vs central differences", ok,
                  f"worst excess over tolerance {worst:.2e}, branch flips {flips}, {elapsed:.1f} s")


# -- 6 ----------------------------------------------------------------------


@pytest.fixture(scope="module")
def digits_dir(tmp_path_factory):
    pytest.importorskip("sklearn")
    from qrange.harness.data import make_digits_idx

    out = tmp_path_factory.mktemp("digits")
    make_digits_idx(out, 5000, 1000, seed=0)
    return out


def digits_config(digits_dir):
    raw = json.loads((ROOT / "configs" / "digits.json").read_text())
    raw["dataset"].update(
        images_path=str(digits_dir / "train-images-idx3-ubyte"),
        labels_path=str(digits_dir / "train-labels-idx1-ubyte"),
        val_images_path=str(digits_dir / "test-images-idx3-ubyte"),
        val_labels_path=str(digits_dir / "test-labels-idx1-ubyte"),
    )
    p = digits_dir / "digits.json"
    p.write_text(json.dumps(raw))
    return load_config(p)


def parity(base):
    means = {}
    for name, ov in (("fp32", FP32), ("running", RUNNING), ("in_hindsight", HINDSIGHT)):
        accs = [run_training(base.with_overrides(seed=s, **ov)).val_acc for s in range(3)]
        means[name] = (float(np.mean(accs)), accs)
    return means


@pytest.mark.slow
def test_criterion_6_parity(report, digits_dir):
    t0 = time.perf_counter()
    blobs = load_config(ROOT / "configs" / "blobs.json")
    assert blobs.dataset["noise_sigma"] == 0.1 and blobs.dataset["classes"] == 3
    digits = digits_config(digits_dir)
    assert digits.dataset["limit"] <= 5000 and digits.epochs == 5
    lines, ok = [], True
    for label, cfg in (("blobs", blobs), ("digits-idx", digits)):
        m = parity(cfg)
        h, f, r = m["in_hindsight"][0], m["fp32"][0], m["running"][0]
        good = abs(h - f) <= 0.02 and abs(h - r) <= 0.01
        ok &= good
        lines.append(f"{label}: fp32 {100 * f:.2f} running {100 * r:.2f} in-hindsight {100 * h:.2f}")
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed < 15 * 60
    assert report(6, "W8/A8/G8 in-hindsight parity (3 seeds)", ok, "; ".join(lines) + f"; {elapsed:.0f} s")


# -- 7 ----------------------------------------------------------------------


def train_twice(cfg_path, tmp_path, tag):
    outs = []
    for i in range(2):
        m, c = tmp_path / f"{tag}{i}.jsonl", tmp_path / f"{tag}{i}.ckpt"
        r = subprocess.run(
            [sys.executable, "-m", "qrange.harness.cli", "train", "--config", str(cfg_path),
             "--seed", "1", "--out", str(m), "--checkpoint", str(c)],
            capture_output=True, text=True,
        )
        assert r.returncode == 0, r.stderr
        outs.append(([strip_timing(row) for row in read_jsonl(m)], c.read_bytes()))
    return outs


def test_criterion_7_determinism(report, digits_dir, tmp_path):
    t0 = time.perf_counter()
    raw = digits_config(digits_dir).raw
    raw["dataset"]["limit"] = 640
    raw["epochs"] = 2
    small = tmp_path / "digits_small.json"
    small.write_text(json.dumps(raw))
    ok, notes = True, []
    for tag, path in (("blobs", ROOT / "configs" / "blobs.json"), ("digits", small)):
        (m1, c1), (m2, c2) = train_twice(path, tmp_path, tag)
        same = m1 == m2 and c1 == c2 and len(m1) > 1
        ok &= same
        notes.append(f"{tag}: {len(m1)} records, checkpoint {len(c1)} bytes, identical={same}")
    elapsed = time.perf_counter() - t0
    ok = ok and elapsed < 5 * 60
    assert report(7, "byte-identical metrics and checkpoints", ok, "; ".join(notes) + f"; {elapsed:.0f} s")
