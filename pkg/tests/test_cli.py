"""End-to-end command-line flows in temporary directories."""

import hashlib
import json
from pathlib import Path

import numpy as np
import pytest

from crowdformer.cli import main
from crowdformer.data import gen_synthetic_dataset, load_manifest

MINI_CFG = """\
model.input_size = 32
model.stage_depths = 1,1,1,1
model.embed_dims = 4,8,12,16
model.strides = 4,2,2,2
model.num_heads = 1,2,2,4
model.sr_ratios = 8,4,2,1
model.mlp_ratios = 4.0,4.0,4.0,4.0
model.agg_width = 8
optim.learning_rate = 1e-3
optim.epochs = 2
optim.seed = 0
"""


@pytest.fixture
def workdir(tmp_path):
    cfg_path = tmp_path / "mini.cfg"
    cfg_path.write_text(MINI_CFG, encoding="utf-8")
    data_root = tmp_path / "setA"
    gen_synthetic_dataset(data_root, n_images=4, count_range=(3, 20), seed=5)
    return tmp_path, cfg_path, data_root


def digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_gen_synth_deterministic_and_loadable(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["gen-synth", "--out", str(a), "--n", "3", "--seed", "9"]) == 0
    assert main(["gen-synth", "--out", str(b), "--n", "3", "--seed", "9"]) == 0
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    assert all(digest(a / f) == digest(b / f) for f in files_a)
    manifest = load_manifest(a)
    assert len(manifest) == 3 and not manifest.warnings


def test_gen_synth_zero_images(tmp_path):
    out = tmp_path / "empty"
    assert main(["gen-synth", "--out", str(out), "--n", "0"]) == 0
    assert (out / "manifest").read_text() == ""


def test_train_eval_predict_cycle(workdir, capsys):
    tmp_path, cfg_path, data_root = workdir
    run_dir = tmp_path / "run"
    assert main(["train", "--config", str(cfg_path), "--data", str(data_root), "--out", str(run_dir)]) == 0
    ckpt = run_dir / "checkpoint.ckpt"
    log = run_dir / "loss_log.jsonl"
    assert ckpt.is_file() and log.is_file()
    records = [json.loads(line) for line in log.read_text().splitlines()]
    assert [r["epoch"] for r in records] == [1, 2]

    eval_dir = tmp_path / "eval"
    assert main(["eval", "--ckpt", str(ckpt), "--data", str(data_root), "--out", str(eval_dir)]) == 0
    report_lines = (eval_dir / "report.jsonl").read_text().splitlines()
    assert len(report_lines) == 5  # 4 images + summary
    summary = json.loads(report_lines[-1])["summary"]
    assert summary["n"] == 4 and np.isfinite(summary["mae"])
    capsys.readouterr()

    image = next((data_root / "images").glob("*.png"))
    assert main(["predict", "--ckpt", str(ckpt), "--image", str(image)]) == 0
    printed = capsys.readouterr().out.strip()
    assert float(printed) >= 0.0


def test_train_determinism_across_runs(workdir):
    tmp_path, cfg_path, data_root = workdir
    digests = []
    for name in ("r1", "r2"):
        run_dir = tmp_path / name
        assert main(["train", "--config", str(cfg_path), "--data", str(data_root), "--out", str(run_dir)]) == 0
        digests.append((digest(run_dir / "checkpoint.ckpt"), digest(run_dir / "loss_log.jsonl")))
    assert digests[0] == digests[1]


def test_resume_zero_epochs_keeps_checkpoint(workdir):
    tmp_path, cfg_path, data_root = workdir
    run_dir = tmp_path / "run"
    main(["train", "--config", str(cfg_path), "--data", str(data_root), "--out", str(run_dir)])
    ckpt = run_dir / "checkpoint.ckpt"
    resumed_dir = tmp_path / "resumed"
    assert (
        main(
            [
                "train",
                "--config",
                str(cfg_path),
                "--data",
                str(data_root),
                "--out",
                str(resumed_dir),
                "--resume",
                str(ckpt),
                "--epochs",
                "0",
            ]
        )
        == 0
    )
    assert digest(resumed_dir / "checkpoint.ckpt") == digest(ckpt)


def test_resume_with_mismatched_config_refused(workdir, capsys):
    tmp_path, cfg_path, data_root = workdir
    run_dir = tmp_path / "run"
    main(["train", "--config", str(cfg_path), "--data", str(data_root), "--out", str(run_dir)])
    other_cfg = tmp_path / "other.cfg"
    other_cfg.write_text(MINI_CFG.replace("agg_width = 8", "agg_width = 16"), encoding="utf-8")
    code = main(
        [
            "train",
            "--config",
            str(other_cfg),
            "--data",
            str(data_root),
            "--out",
            str(tmp_path / "x"),
            "--resume",
            str(run_dir / "checkpoint.ckpt"),
        ]
    )
    assert code == 2
    assert "refusing to resume" in capsys.readouterr().err


def test_eval_config_fingerprint_check(workdir, capsys):
    tmp_path, cfg_path, data_root = workdir
    run_dir = tmp_path / "run"
    main(["train", "--config", str(cfg_path), "--data", str(data_root), "--out", str(run_dir)])
    other_cfg = tmp_path / "other.cfg"
    other_cfg.write_text(MINI_CFG.replace("agg_width = 8", "agg_width = 16"), encoding="utf-8")
    code = main(
        [
            "eval",
            "--ckpt",
            str(run_dir / "checkpoint.ckpt"),
            "--data",
            str(data_root),
            "--config",
            str(other_cfg),
            "--out",
            str(tmp_path / "eval"),
        ]
    )
    assert code == 2
    assert "does not match" in capsys.readouterr().err


def test_corrupt_checkpoint_fails_without_partial_report(workdir, capsys, tmp_path):
    _, cfg_path, data_root = workdir
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"garbage")
    out = tmp_path / "evalout"
    code = main(["eval", "--ckpt", str(bad), "--data", str(data_root), "--out", str(out)])
    assert code == 1
    assert not (out / "report.jsonl").exists()
    assert "error:" in capsys.readouterr().err


def test_eval_empty_split_fails(workdir, capsys, tmp_path):
    tmp_path_, cfg_path, data_root = workdir
    run_dir = tmp_path_ / "run"
    main(["train", "--config", str(cfg_path), "--data", str(data_root), "--out", str(run_dir)])
    empty = tmp_path / "emptyset"
    empty.mkdir()
    (empty / "manifest").write_text("", encoding="utf-8")
    code = main(
        ["eval", "--ckpt", str(run_dir / "checkpoint.ckpt"), "--data", str(empty), "--out", str(tmp_path / "o")]
    )
    assert code == 1
    assert "empty test split" in capsys.readouterr().err


def test_unreadable_image_predict(workdir, capsys, tmp_path):
    tmp_path_, cfg_path, data_root = workdir
    run_dir = tmp_path_ / "run"
    main(["train", "--config", str(cfg_path), "--data", str(data_root), "--out", str(run_dir)])
    junk = tmp_path / "junk.png"
    junk.write_bytes(b"not an image")
    code = main(["predict", "--ckpt", str(run_dir / "checkpoint.ckpt"), "--image", str(junk)])
    assert code == 1


def test_cross_eval_matrix_and_no_finetune(workdir, tmp_path):
    tmp_path_, cfg_path, data_root = workdir
    data_b = tmp_path_ / "setB"
    gen_synthetic_dataset(data_b, n_images=3, count_range=(10, 40), seed=6)
    ckpts = []
    for name, root in (("runA", data_root), ("runB", data_b)):
        run_dir = tmp_path_ / name
        main(["train", "--config", str(cfg_path), "--data", str(root), "--out", str(run_dir)])
        ckpts.append(run_dir / "checkpoint.ckpt")
    before = [digest(c) for c in ckpts]

    out = tmp_path_ / "cross"
    code = main(
        [
            "cross-eval",
            "--ckpt",
            str(ckpts[0]),
            "--ckpt",
            str(ckpts[1]),
            "--data",
            f"setA={data_root}",
            "--data",
            f"setB={data_b}",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    rows = [json.loads(l) for l in (out / "cross_matrix.jsonl").read_text().splitlines()]
    assert {(r["source"], r["target"]) for r in rows} == {("setA", "setB"), ("setB", "setA")}
    assert all("mae" in r for r in rows)
    assert [digest(c) for c in ckpts] == before  # evaluation never updates parameters

    out2 = tmp_path_ / "cross_diag"
    code = main(
        [
            "cross-eval",
            "--ckpt",
            str(ckpts[0]),
            "--ckpt",
            str(ckpts[1]),
            "--data",
            f"setA={data_root}",
            "--data",
            f"setB={data_b}",
            "--include-diagonal",
            "--out",
            str(out2),
        ]
    )
    assert code == 0
    rows = [json.loads(l) for l in (out2 / "cross_matrix.jsonl").read_text().splitlines()]
    assert len(rows) == 4


def test_cross_eval_missing_dataset_recorded(workdir):
    tmp_path, cfg_path, data_root = workdir
    run_dir = tmp_path / "run"
    main(["train", "--config", str(cfg_path), "--data", str(data_root), "--out", str(run_dir)])
    out = tmp_path / "cross"
    code = main(
        [
            "cross-eval",
            "--ckpt",
            str(run_dir / "checkpoint.ckpt"),
            "--data",
            f"ghost={tmp_path / 'missing'}",
            "--out",
            str(out),
        ]
    )
    assert code == 0
    rows = [json.loads(l) for l in (out / "cross_matrix.jsonl").read_text().splitlines()]
    assert len(rows) == 1 and "error" in rows[0]


def test_gradcheck_command(workdir, capsys):
    _, cfg_path, _ = workdir
    assert main(["gradcheck", "--config", str(cfg_path), "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "PASS" in out and "FAIL" not in out
