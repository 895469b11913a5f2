"""Acceptance suite: one PASS/FAIL line per criterion.

Lines are printed immediately (visible with ``-s``) and repeated in the
terminal summary. The training benchmark behind criteria 7 and 8 caches its
cells under ``$DFN_BENCH_CACHE`` (default ``<repo>/.bench_cache``); a cold
run trains 21 models and takes hours on one core.
"""

import json
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.special import expit

from dfn import ops
from dfn.ablation import PRESETS, ablation_run, evaluate_model
from dfn.checkpoint import decode_checkpoint, encode_checkpoint
from dfn.cli import main
from dfn.data import DatasetSpec, export_pgm, generate_dataset, read_dataset, read_pgm, write_dataset
from dfn.data.io import decode_dataset
from dfn.errors import FormatError
from dfn.evaluate import mean_iou
from dfn.gradsuite import run_suite
from dfn.losses import LossConfig, combined_loss, focal_loss
from dfn.model import CAB, DFN, ModelConfig
from dfn.tensor import WIDE, Tensor
from dfn.training import TrainConfig, poly_lr

from conftest import ACCEPTANCE, tiny_cfg

ROOT = Path(__file__).resolve().parents[1]
SMALL = ["--classes", "3", "--stage-channels", "4,4,6,6,8", "--unified-channels", "8", "--batch-size", "2"]


def verdict(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    assert ok, line


def test_criterion_01_gradient_suite():
    t0 = time.perf_counter()
    results = run_suite(eps=1e-5)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = all(r.passed for r in results) and elapsed < 120
    verdict(1, ok, f"{len(results)} checks, worst {worst.name} {worst.max_rel_error:.2e} (< 1e-4), {elapsed:.1f}s (< 120s)")


def test_criterion_02_loss_identities():
    rng = np.random.default_rng(2)
    z = rng.normal(scale=3.0, size=(1, 1, 10, 100))
    t = rng.integers(0, 2, size=(1, 10, 100))
    p = expit(z[:, 0])
    bce = -np.mean(t * np.log(p) + (1 - t) * np.log1p(-p))
    focal = focal_loss(Tensor(z, dtype=WIDE), t, gamma=0.0, alpha_f=0.5).item()
    focal_err = abs(focal - 0.5 * bce)

    cfg = tiny_cfg()
    out = DFN(cfg)(Tensor(rng.normal(size=(2, 3, 32, 32)).astype(np.float32)))
    labels = rng.integers(0, 3, size=(2, 32, 32))
    total, l_s, _ = combined_loss(out, labels, rng.integers(0, 2, size=(2, 32, 32)), LossConfig(lam=0.0), cfg)
    exact = total.item() == l_s.item()

    sums = ops.softmax_channels(Tensor(rng.normal(scale=5, size=(4, 6, 8, 8)))).data.sum(axis=1)
    norm_err = np.abs(sums - 1).max()
    ok = focal_err < 1e-12 and exact and norm_err < 1e-6
    verdict(2, ok, f"|focal - BCE/2| {focal_err:.1e} (< 1e-12); lambda=0 exact {exact}; softmax sum err {norm_err:.1e} (< 1e-6)")


def test_criterion_03_cab_semantics():
    rng = np.random.default_rng(3)
    cab = CAB("acc", tiny_cfg())
    low = Tensor(rng.normal(size=(2, 8, 4, 4)).astype(np.float32))
    high = Tensor(rng.normal(size=(2, 8, 4, 4)).astype(np.float32))
    one, _ = cab(low, high, Tensor(np.ones((2, 8, 1, 1), np.float32)))
    zero, _ = cab(low, high, Tensor(np.zeros((2, 8, 1, 1), np.float32)))
    alpha = rng.random((2, 8, 1, 1)).astype(np.float32)
    scaled = ops.channel_scale(low, Tensor(alpha)).data
    oracle = np.empty_like(scaled)
    for n in range(2):
        for c in range(8):
            oracle[n, c] = alpha[n, c, 0, 0] * low.data[n, c]
    additive = one.data.tobytes() == ops.add(low, high).data.tobytes()
    to_high = np.array_equal(zero.data, high.data)
    err = np.abs(scaled - oracle).max()
    verdict(3, additive and to_high and err < 1e-6, f"alpha=1 additive bitwise {additive}; alpha=0 high {to_high}; scale err {err:.1e}")


def test_criterion_04_metric_oracle():
    rng = np.random.default_rng(4)
    mismatches = 0
    for _ in range(2000):
        pred, gt = rng.integers(0, 3, size=(2, 3, 3))
        ious = []
        for c in range(3):
            inter = sum(1 for i in range(3) for j in range(3) if pred[i, j] == c and gt[i, j] == c)
            union = sum(1 for i in range(3) for j in range(3) if pred[i, j] == c or gt[i, j] == c)
            if union:
                ious.append(inter / union)
        mismatches += mean_iou(pred, gt, 3)[0] != pytest.approx(sum(ious) / len(ious), abs=1e-15)
    hand = mean_iou(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]), 2)[0]
    ok = mismatches == 0 and abs(hand - 7 / 12) < 1e-15
    verdict(4, ok, f"{mismatches}/2000 oracle mismatches; 2x2 case {hand:.6f} (7/12)")


def test_criterion_05_poly_schedule():
    start, end, mid = poly_lr(0, 2000, 4e-3, 0.9), poly_lr(2000, 2000, 4e-3, 0.9), poly_lr(1000, 2000, 4e-3, 0.9)
    ok = start == 4e-3 and end == 0 and abs(mid - 2.1435e-3) <= 1e-7
    verdict(5, ok, f"lr(0) {start:g}; lr(max) {end:g}; lr(mid) {mid:.6e} (2.1435e-3 +- 1e-7)")


def test_criterion_06_determinism(tmp_path):
    data = tmp_path / "d.dfnd"
    main(["gen-data", "--out", str(data), "--count", "6", "--size", "32", "--classes", "3", "--seed", "6"])
    base = ["train", "--data", str(data), "--max-iter", "6", "--log-every", "1", *SMALL]
    for name in ("a", "b"):
        assert main(base + ["--out", str(tmp_path / name)]) == 0
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in ("final.dfnc", "train_log.csv"))
    assert main(base + ["--out", str(tmp_path / "half"), "--stop-at", "3"]) == 0
    assert main(base + ["--out", str(tmp_path / "rest"), "--resume", str(tmp_path / "half" / "final.dfnc")]) == 0
    resumed = (tmp_path / "rest" / "final.dfnc").read_bytes() == (tmp_path / "a" / "final.dfnc").read_bytes()
    verdict(6, same and resumed, f"repeat bitwise {same}; train(3)+resume(3) == train(6) bitwise {resumed}")


# desk-scale benchmark: K=4, 64x64, 200 train / 50 val, 2000 iterations, batch 4, seeds 0-2
SEEDS = (0, 1, 2)


@pytest.fixture(scope="module")
def benchmark():
    spec = DatasetSpec(count=200, height=64, width=64, num_classes=4, seed=1)
    spec, train_set = generate_dataset(spec)
    _, val_set = generate_dataset(DatasetSpec(count=50, height=64, width=64, num_classes=4, seed=2))
    cache = Path(os.environ.get("DFN_BENCH_CACHE", ROOT / ".bench_cache"))
    report = ablation_run(
        ModelConfig(num_classes=4),
        PRESETS["leave-one-out"],
        SEEDS,
        TrainConfig(max_iter=2000, batch_size=4),
        train_set,
        val_set,
        spec.mean,
        cache_dir=cache,
    )
    return report, val_set, spec.mean


@pytest.mark.benchmark
def test_criterion_07_ablation_direction(benchmark):
    report = benchmark[0]
    full, base = report.row("full"), report.row("baseline")
    removed = [r for r in report.rows if r.row.name.startswith("-")]
    gain = 100 * (full.mean - base.mean)
    worst = max(removed, key=lambda r: r.mean)
    margin = 100 * (full.mean - worst.mean)
    seconds = sum(c.seconds or 0.0 for r in report.rows for c in r.cells)
    print(report.to_table())
    print(f"benchmark training time {seconds / 60:.1f} min (target < 45 min)")
    ok = gain >= 2.0 and margin >= -1.0
    verdict(7, ok, f"full {100 * full.mean:.2f} vs baseline {100 * base.mean:.2f} ({gain:+.2f}, need >= +2.0); "
            f"vs best removal {worst.row.name} {100 * worst.mean:.2f} ({margin:+.2f}, need >= -1.0); "
            f"train time {seconds / 60:.0f} min")


@pytest.mark.benchmark
def test_criterion_08_border_utility(benchmark):
    report, val_set, mean = benchmark
    full = report.row("full")
    gaps = []
    for seed, cell in zip(full.seeds, full.cells):
        untrained = evaluate_model(DFN(ModelConfig(num_classes=4, init_seed=seed)), val_set, mean, 4)["boundary_f1"]
        gaps.append((seed, cell.boundary_f1, untrained))
    ok = all(trained - untrained >= 0.3 for _, trained, untrained in gaps)
    detail = "; ".join(f"seed {s}: {t:.3f} vs init {u:.3f} ({t - u:+.3f})" for s, t, u in gaps)
    verdict(8, ok, f"{detail} (need >= +0.3 each)")


def test_criterion_09_lambda_sweep(tmp_path):
    train_data, val_data = tmp_path / "t.dfnd", tmp_path / "v.dfnd"
    main(["gen-data", "--out", str(train_data), "--count", "8", "--size", "32", "--classes", "3", "--seed", "1"])
    main(["gen-data", "--out", str(val_data), "--count", "4", "--size", "32", "--classes", "3", "--seed", "2"])
    argv = ["lambda-sweep", "--train-data", str(train_data), "--val-data", str(val_data), "--seeds", "0",
            "--max-iter", "4", *SMALL]
    codes = [main(argv + ["--out", str(tmp_path / name)]) for name in ("a", "b")]
    text = (tmp_path / "a" / "lambda.csv").read_text()
    rows = [line.split(",") for line in text.splitlines()[1:]]
    lams = [float(r[0]) for r in rows]
    mious = [float(r[1]) for r in rows]
    same = text.encode() == (tmp_path / "b" / "lambda.csv").read_bytes()
    ok = codes == [0, 0] and lams == [0.05, 0.1, 0.5, 0.75, 1.0] and all(0 <= m <= 1 for m in mious) and same
    verdict(9, ok, f"{len(mious)} lambdas, mIoU range [{min(mious):.3f}, {max(mious):.3f}]; bitwise repeat {same}")


def test_criterion_10_format_golden(tmp_path):
    spec, samples = generate_dataset(DatasetSpec(count=3, height=32, width=32, num_classes=4, seed=10))
    write_dataset(samples, spec, tmp_path / "d.dfnd")
    raw = (tmp_path / "d.dfnd").read_bytes()
    _, back = read_dataset(tmp_path / "d.dfnd")
    dfnd = all(
        a.image.tobytes() == b.image.tobytes() and a.labels.tobytes() == b.labels.tobytes() for a, b in zip(samples, back)
    )
    write_dataset(back, spec, tmp_path / "e.dfnd")
    dfnd = dfnd and (tmp_path / "e.dfnd").read_bytes() == raw

    model = DFN(tiny_cfg())
    blob = encode_checkpoint(model.cfg, model.state(), {"iter": "0"})
    cfg, state, _ = decode_checkpoint(blob)
    dfnc = encode_checkpoint(cfg, state, {"iter": "0"}) == blob

    export_pgm(np.array([[0, 1], [2, 3]], np.uint8), tmp_path / "l.pgm", 4)
    pgm_raw = (tmp_path / "l.pgm").read_bytes()
    header = pgm_raw == b"P5\n2 2\n255\n" + bytes([0, 85, 170, 255])
    pgm = read_pgm(tmp_path / "l.pgm").tolist() == [[0, 85], [170, 255]]

    truncations = 0
    for decode, buf in ((decode_dataset, raw), (decode_checkpoint, blob)):
        try:
            decode(buf[:-7])
        except FormatError as exc:
            truncations += "byte offset" in str(exc)
    ok = dfnd and dfnc and header and pgm and truncations == 2
    verdict(10, ok, f"DFND {dfnd}; DFNC {dfnc}; PGM header {header} round-trip {pgm}; truncation errors {truncations}/2")
