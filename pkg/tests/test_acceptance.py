"""Acceptance suite: one test per criterion, each printing a pass line.

Run with ``pytest tests/test_acceptance.py -v -s`` to see the per-criterion
lines and timings. Scales: criterion 1 uses the full-size profile for a
single forward pass; everything else runs on the tiny profile.
"""

import dataclasses
import hashlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from crowdformer.checkpoint import apply_to_model, load_checkpoint, save_checkpoint
from crowdformer.cli import main as cli_main
from crowdformer.config import load_config
from crowdformer.data import (
    TrainingSet,
    gen_synthetic_dataset,
    load_annotated_image,
    load_manifest,
    resize_image,
    tile_image,
)
from crowdformer.evaluation import cross_dataset_eval, evaluate, mae, mse, write_matrix
from crowdformer.gradcheck import standard_suite
from crowdformer.model import CrowdFormer
from crowdformer.tensor import Tensor, no_grad
from crowdformer.train import AdamW, smooth_l1, train_epoch


@pytest.fixture(scope="module")
def tiny():
    cfg = load_config("tiny")
    cfg.data = dataclasses.replace(cfg.data, augment=False)
    return cfg


@pytest.fixture(scope="module")
def overfit_setup(tmp_path_factory, tiny):
    """Criterion 6 setup, reused by 8/9: 20 synthetic images, tiny profile."""
    root = tmp_path_factory.mktemp("acc") / "train20"
    manifest = gen_synthetic_dataset(root, n_images=20, count_range=(5, 50), seed=7)
    train_set = TrainingSet(manifest, tiny.model.input_size, tiny.data)
    return manifest, train_set


def _report(criterion: str, detail: str):
    print(f"[PASS] {criterion}: {detail}")


def test_criterion_1_shape_suite():
    started = time.monotonic()
    cfg = load_config("pvt_v2_b5")
    model = CrowdFormer(cfg.model, np.random.default_rng(0))
    x = Tensor(np.random.default_rng(1).standard_normal((1, 3, 384, 384)))
    with no_grad():
        pyramid = model.pyramid(x)
        aggregated = model.head.aggregate(pyramid)
    shapes = [m.shape for m in pyramid]
    assert shapes == [
        (1, 64, 96, 96),
        (1, 128, 48, 48),
        (1, 320, 24, 24),
        (1, 512, 12, 12),
    ]
    assert aggregated.shape == (1, 27648)
    elapsed = time.monotonic() - started
    assert elapsed <= 120.0, f"shape suite took {elapsed:.1f}s (budget 120s)"
    _report("criterion 1 (shape suite)", f"pyramid {shapes}, aggregate 27648, {elapsed:.1f}s")


def test_criterion_2_gradient_suite(tiny):
    started = time.monotonic()
    reports = standard_suite(tiny.model, seed=0, trials=20)
    for report in reports:
        limit = 1e-3 if report.op_name == "model_end_to_end" else 1e-4
        assert report.max_relative_error <= limit, str(report)
        assert report.passed, str(report)
    elapsed = time.monotonic() - started
    assert elapsed <= 300.0, f"gradient suite took {elapsed:.1f}s (budget 300s)"
    worst = max(reports, key=lambda r: r.max_relative_error)
    _report(
        "criterion 2 (gradient suite)",
        f"{len(reports)} checks, worst {worst.op_name} at {worst.max_relative_error:.2e}, {elapsed:.1f}s",
    )


def test_criterion_3_loss_correctness():
    def oracle(diff, beta):
        return 0.5 * diff * diff / beta if abs(diff) <= beta else abs(diff) - 0.5 * beta

    for beta in (1.0, 7.0, 15.0):
        for frac in (0.0, 0.25, 0.5, 0.999, 1.0, 1.001, 2.0, 10.0):
            for sign in (1.0, -1.0):
                diff = sign * frac * beta
                got = smooth_l1(Tensor([diff]), [0.0], beta).item()
                assert got == pytest.approx(oracle(diff, beta), abs=1e-12)

        # value continuity at the joint: both sides sit at 0.5*beta
        for eps in (1e-9,):
            below = smooth_l1(Tensor([beta - eps]), [0.0], beta).item()
            above = smooth_l1(Tensor([beta + eps]), [0.0], beta).item()
            assert abs(below - 0.5 * beta) <= 1.5e-9
            assert abs(above - 0.5 * beta) <= 1.5e-9
            # derivative continuity: both sides equal sign(x-y) = 1
            for point in (beta - eps, beta + eps):
                p = Tensor([point], requires_grad=True)
                smooth_l1(p, [0.0], beta).backward()
                assert abs(p.grad[0] - 1.0) <= 1.5e-9
    _report("criterion 3 (loss correctness)", "branch grid exact; joint continuous to 1e-9")


def test_criterion_4_metric_oracle():
    gen = np.random.default_rng(4)
    pairs = [(gen.uniform(0, 2000), gen.uniform(0, 2000)) for _ in range(100)]
    oracle_mae = math.fsum(abs(p - g) for p, g in pairs) / len(pairs)
    oracle_mse = math.sqrt(math.fsum((p - g) ** 2 for p, g in pairs) / len(pairs))
    assert abs(mae(pairs) - oracle_mae) <= 1e-12
    assert abs(mse(pairs) - oracle_mse) <= 1e-12
    assert mae(pairs) <= mse(pairs)
    _report("criterion 4 (metric oracle)", f"100 pairs, |delta| <= 1e-12, mae {mae(pairs):.3f} <= mse {mse(pairs):.3f}")


def test_criterion_5_tiling_conservation(tmp_path, tiny):
    root = tmp_path / "tile50"
    manifest = gen_synthetic_dataset(root, n_images=50, count_range=(0, 80), seed=13)
    crop = tiny.model.input_size
    for entry in manifest.entries:
        image = load_annotated_image(manifest, entry)
        resized = resize_image(image, out_w=3 * crop, out_h=2 * crop)
        crops = tile_image(resized, crop)
        assert sum(c.count for c in crops) == float(entry.count)

        # crops are disjoint and cover the resized image
        visits = np.zeros((2 * crop, 3 * crop), dtype=int)
        canvas = np.empty_like(resized.pixels)
        for c in crops:
            row, col = divmod(c.crop_index, 3)
            y0, x0 = row * crop, col * crop
            visits[y0 : y0 + crop, x0 : x0 + crop] += 1
            canvas[:, y0 : y0 + crop, x0 : x0 + crop] = c.pixels
        assert visits.min() == visits.max() == 1
        np.testing.assert_array_equal(canvas, resized.pixels)
    _report("criterion 5 (tiling conservation)", "50 images: crop counts sum exactly; partition verified")


def test_criterion_6_overfit(tiny, overfit_setup):
    started = time.monotonic()
    manifest, train_set = overfit_setup
    counts = np.array([e.count for e in manifest.entries], dtype=np.float64)
    baseline_mae = float(np.mean(np.abs(counts - counts.mean())))

    rng = np.random.default_rng(tiny.optim.seed)
    model = CrowdFormer(tiny.model, rng)
    optimizer = AdamW(model.named_params(), tiny.optim)  # tiny profile: lr 1e-3
    assert tiny.optim.learning_rate == 1e-3 and tiny.loss.beta == 1.0
    for _ in range(200):
        train_epoch(model, train_set, tiny.loss, optimizer, rng)
    report = evaluate(model, manifest, tiny.data)
    elapsed = time.monotonic() - started
    assert elapsed <= 1200.0, f"overfit run took {elapsed:.1f}s (budget 1200s)"
    assert report.mae <= 0.2 * baseline_mae, (
        f"train MAE {report.mae:.3f} vs 20% of baseline {baseline_mae:.3f}"
    )
    _report(
        "criterion 6 (overfit)",
        f"train MAE {report.mae:.3f} <= 20% of baseline {baseline_mae:.3f}, {elapsed:.0f}s",
    )


def test_criterion_7_generalization_harness(tmp_path, tiny):
    set_a = gen_synthetic_dataset(tmp_path / "setA", n_images=12, count_range=(5, 50), seed=21)
    set_b = gen_synthetic_dataset(tmp_path / "setB", n_images=12, count_range=(5, 50), seed=22)

    rng = np.random.default_rng(tiny.optim.seed)
    model = CrowdFormer(tiny.model, rng)
    optimizer = AdamW(model.named_params(), tiny.optim)
    train_set = TrainingSet(set_a, tiny.model.input_size, tiny.data)
    for _ in range(40):
        train_epoch(model, train_set, tiny.loss, optimizer, rng)

    cells = cross_dataset_eval(
        {"setA": model}, {"setA": set_a, "setB": set_b}, tiny.data, include_diagonal=True
    )
    matrix_path = tmp_path / "matrix.jsonl"
    write_matrix(cells, matrix_path)
    rows = {(r["source"], r["target"]): r for r in map(json.loads, matrix_path.read_text().splitlines())}
    assert set(rows) == {("setA", "setA"), ("setA", "setB")}
    in_domain = rows[("setA", "setA")]["mae"]
    cross = rows[("setA", "setB")]["mae"]
    assert np.isfinite(cross) and np.isfinite(in_domain)
    assert cross <= 3.0 * in_domain, f"cross {cross:.2f} vs 3x in-domain {in_domain:.2f}"
    _report(
        "criterion 7 (generalization harness)",
        f"matrix written; cross MAE {cross:.2f} <= 3x in-domain {in_domain:.2f}",
    )


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_criterion_8_determinism(tmp_path, tiny):
    # (a) generator: identical trees
    trees = []
    for name in ("g1", "g2"):
        root = tmp_path / name
        gen_synthetic_dataset(root, n_images=4, count_range=(3, 20), seed=31)
        trees.append({str(p.relative_to(root)): _sha(p) for p in sorted(root.rglob("*")) if p.is_file()})
    assert trees[0] == trees[1]

    # (b) forward pass: bit-identical pyramids from identical seeds
    x = np.random.default_rng(8).standard_normal((2, 3, 64, 64))
    outs = []
    for _ in range(2):
        model = CrowdFormer(tiny.model, np.random.default_rng(0))
        outs.append(model.predict_counts(x))
    np.testing.assert_array_equal(outs[0], outs[1])

    # (c) gradient reports: identical tuples
    r1 = standard_suite(tiny.model, seed=3, trials=5)
    r2 = standard_suite(tiny.model, seed=3, trials=5)
    assert [(r.op_name, r.max_relative_error) for r in r1] == [
        (r.op_name, r.max_relative_error) for r in r2
    ]

    # (d) full train/eval runs through the CLI: byte-identical logs,
    #     checkpoints and reports (scaled-down epochs for runtime)
    cfg_path = tmp_path / "tiny2.cfg"
    cfg_path.write_text(_tiny_cfg_text(), encoding="utf-8")
    digests = []
    for name in ("runA", "runB"):
        run_dir = tmp_path / name
        assert cli_main([
            "train", "--config", str(cfg_path), "--data", str(tmp_path / "g1"), "--out", str(run_dir),
        ]) == 0
        eval_dir = tmp_path / (name + "_eval")
        assert cli_main([
            "eval", "--ckpt", str(run_dir / "checkpoint.ckpt"), "--data", str(tmp_path / "g2"),
            "--out", str(eval_dir),
        ]) == 0
        digests.append(
            (
                _sha(run_dir / "checkpoint.ckpt"),
                _sha(run_dir / "loss_log.jsonl"),
                _sha(eval_dir / "report.jsonl"),
            )
        )
    assert digests[0] == digests[1]
    _report("criterion 8 (determinism)", "generator trees, forwards, reports, checkpoints and logs bit-identical")


def _tiny_cfg_text() -> str:
    from importlib import resources

    text = resources.files("crowdformer").joinpath("configs", "tiny.cfg").read_text(encoding="utf-8")
    return text.replace("optim.epochs = 200", "optim.epochs = 2")


def test_criterion_9_checkpoint_roundtrip(tmp_path, tiny, overfit_setup):
    manifest, train_set = overfit_setup
    rng = np.random.default_rng(tiny.optim.seed)
    model = CrowdFormer(tiny.model, rng)
    optimizer = AdamW(model.named_params(), tiny.optim)
    train_epoch(model, train_set, tiny.loss, optimizer, rng)  # one epoch: nontrivial weights

    batch = np.random.default_rng(17).standard_normal((6, 3, 64, 64))
    before = model.predict_counts(batch)
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model, tiny, optimizer=optimizer, rng=rng, source_dataset="train20")
    fresh = CrowdFormer(tiny.model, np.random.default_rng(12345))
    apply_to_model(load_checkpoint(path), fresh)
    after = fresh.predict_counts(batch)
    np.testing.assert_array_equal(before, after)
    _report("criterion 9 (checkpoint round-trip)", "predictions bit-identical after save/load")
