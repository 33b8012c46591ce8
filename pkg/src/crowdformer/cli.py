"""Command-line entry point.

Subcommands::

    train       fit a model on a dataset directory, write checkpoint + loss log
    eval        evaluate a checkpoint on a dataset, write a JSONL report
    cross-eval  evaluate several checkpoints across several datasets
    predict     print the estimated count for one image
    gradcheck   run the finite-difference gradient suite
    gen-synth   generate a synthetic count-labeled dataset

Common flags: --config (path or shipped profile name), --data, --ckpt,
--seed, --out, --preset (sha | shb | qnrf | ucf50, selects the loss beta).
All commands are deterministic given their seeds and inputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .checkpoint import (
    CheckpointError,
    apply_to_model,
    load_checkpoint,
    optimizer_arrays,
    restore_rng,
    save_checkpoint,
)
from .config import BETA_PRESETS, ConfigError, load_config
from .data import (
    AnnotatedImage,
    DataPipelineError,
    gen_synthetic_dataset,
    load_manifest,
    read_image,
    TrainingSet,
)
from .evaluation import (
    CrossDatasetCell,
    cross_dataset_eval,
    evaluate,
    predict_image,
    write_matrix,
    write_report,
)
from .gradcheck import standard_suite
from .model import CrowdFormer
from .train import AdamW, train_epoch

logger = logging.getLogger(__name__)

_USER_ERRORS = (ConfigError, DataPipelineError, CheckpointError, ValueError, OSError)


def _resolved_config(args):
    cfg = load_config(args.config)
    if getattr(args, "preset", None):
        cfg = cfg.apply_preset(args.preset)
    if getattr(args, "seed", None) is not None:
        cfg.optim = dataclasses.replace(cfg.optim, seed=args.seed)
    return cfg


def _model_from_checkpoint(path):
    ckpt = load_checkpoint(path)
    model = CrowdFormer(ckpt.config.model, np.random.default_rng(ckpt.config.optim.seed))
    apply_to_model(ckpt, model)
    return ckpt, model


def cmd_train(args) -> int:
    cfg = _resolved_config(args)
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = load_manifest(args.data, split="train", preset=cfg.preset)
    source_id = cfg.preset or manifest.dataset_id

    rng = np.random.default_rng(cfg.optim.seed)
    model = CrowdFormer(cfg.model, rng)
    optimizer = AdamW(model.named_params(), cfg.optim)
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.fingerprint != cfg.fingerprint():
            print(
                f"error: checkpoint fingerprint {ckpt.fingerprint[:12]}... does not match "
                f"config fingerprint {cfg.fingerprint()[:12]}...; refusing to resume",
                file=sys.stderr,
            )
            return 2
        apply_to_model(ckpt, model)
        opt_state = optimizer_arrays(ckpt)
        if opt_state:
            optimizer.load_state_arrays(opt_state, ckpt.step)
        rng = restore_rng(ckpt.rng_state)
        source_id = ckpt.source_dataset

    epochs = args.epochs if args.epochs is not None else cfg.optim.epochs
    epochs_done = optimizer.step_count // max(1, len(manifest))
    train_set = TrainingSet(manifest, cfg.model.input_size, cfg.data)
    log_path = out_dir / "loss_log.jsonl"
    with open(log_path, "a", encoding="utf-8") as log:
        for i in range(epochs):
            mean_loss = train_epoch(model, train_set, cfg.loss, optimizer, rng)
            record = {"epoch": epochs_done + i + 1, "mean_loss": mean_loss}
            log.write(json.dumps(record, sort_keys=True) + "\n")
            log.flush()
            logger.info("epoch %d: mean loss %.6f", epochs_done + i + 1, mean_loss)

    ckpt_path = out_dir / "checkpoint.ckpt"
    save_checkpoint(ckpt_path, model, cfg, optimizer=optimizer, rng=rng, source_dataset=source_id)
    print(f"trained {epochs} epoch(s); checkpoint: {ckpt_path}; loss log: {log_path}")
    return 0


def cmd_eval(args) -> int:
    ckpt, model = _model_from_checkpoint(args.ckpt)
    cfg = ckpt.config
    if args.config:
        given = _resolved_config(args)
        if given.fingerprint() != ckpt.fingerprint:
            print(
                "error: --config fingerprint does not match the checkpoint; refusing to evaluate",
                file=sys.stderr,
            )
            return 2
    manifest = load_manifest(args.data, split="test")
    report = evaluate(model, manifest, cfg.data, model_id=ckpt.source_dataset)
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report_path = out_dir / "report.jsonl"
    write_report(report, report_path)
    print(f"N={report.n} MAE={report.mae:.6f} MSE={report.mse:.6f} -> {report_path}")
    return 0


def cmd_cross_eval(args) -> int:
    models = {}
    for i, path in enumerate(args.ckpt):
        ckpt, model = _model_from_checkpoint(path)
        key = ckpt.source_dataset
        if key in models:
            key = f"{key}#{i}"
        models[key] = model
        data_cfg = ckpt.config.data
    manifests = {}
    failed = {}
    for spec in args.data:
        name, _, path = spec.partition("=")
        if not path:
            name, path = Path(spec).name, spec
        try:
            manifests[name] = load_manifest(path, split="test")
        except _USER_ERRORS as exc:
            failed[name] = str(exc)
    cells = cross_dataset_eval(models, manifests, data_cfg, include_diagonal=args.include_diagonal)
    for source in models:
        for name, err in failed.items():
            cells.append(CrossDatasetCell(source=source, target=name, error=err))
    out_dir = Path(args.out or "runs")
    out_dir.mkdir(parents=True, exist_ok=True)
    matrix_path = out_dir / "cross_matrix.jsonl"
    write_matrix(cells, matrix_path)
    evaluated = sum(1 for c in cells if c.report is not None)
    print(f"{evaluated}/{len(cells)} cells evaluated -> {matrix_path}")
    return 0


def cmd_predict(args) -> int:
    ckpt, model = _model_from_checkpoint(args.ckpt)
    pixels = read_image(args.image)
    image = AnnotatedImage(pixels=pixels, total_count=0, points=None, image_id=Path(args.image).stem)
    clamped, raw = predict_image(model, image, ckpt.config.data)
    print(f"{clamped:.10g}")
    return 0


def cmd_gradcheck(args) -> int:
    cfg = _resolved_config(args)
    reports = standard_suite(cfg.model, seed=args.seed if args.seed is not None else 0)
    failures = 0
    for report in reports:
        print(report)
        failures += 0 if report.passed else 1
    if failures:
        print(f"{failures}/{len(reports)} gradient checks failed", file=sys.stderr)
        return 1
    return 0


def cmd_gen_synth(args) -> int:
    manifest = gen_synthetic_dataset(
        args.out,
        n_images=args.n,
        count_range=(args.count_min, args.count_max),
        seed=args.seed if args.seed is not None else 0,
    )
    print(f"wrote {len(manifest)} images under {manifest.root}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crowdformer", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=False, data=False, ckpt=False, out=False, preset=False):
        if config:
            p.add_argument("--config", required=config == "required", help="config file or shipped profile name")
        if data:
            p.add_argument("--data", required=True, help="dataset root directory")
        if ckpt:
            p.add_argument("--ckpt", required=True, help="checkpoint file")
        if out:
            p.add_argument("--out", help="output directory (default: config out_dir)")
        if preset:
            p.add_argument("--preset", choices=sorted(BETA_PRESETS), help="dataset preset selecting the loss beta")
        p.add_argument("--seed", type=int, help="seed override")

    p = sub.add_parser("train", help="train a model")
    common(p, config="required", data=True, out=True, preset=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--epochs", type=int, help="epochs to run now (default: config value)")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p, config=True, data=True, ckpt=True, out=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("cross-eval", help="cross-dataset evaluation matrix")
    p.add_argument("--ckpt", action="append", required=True, help="checkpoint file (repeatable)")
    p.add_argument("--data", action="append", required=True, help="name=path dataset root (repeatable)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--include-diagonal", action="store_true", help="also evaluate source == target cells")
    p.add_argument("--seed", type=int, help="seed override")
    p.set_defaults(fn=cmd_cross_eval)

    p = sub.add_parser("predict", help="print the estimated count for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--seed", type=int, help="unused; accepted for interface uniformity")
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    common(p, config="required")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("gen-synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="dataset root to create")
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--count-min", type=int, default=5)
    p.add_argument("--count-max", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gen_synth)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except _USER_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
