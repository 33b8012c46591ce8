"""Counting metrics, image-level prediction and the evaluation protocols.

MAE is the mean absolute error over per-image counts; MSE (as conventional
in counting benchmarks) is the *root* mean squared error. An image-level
prediction is the sum of the six crop-level regressions after the same
resize-and-tile preprocessing used in training, clamped at zero for
reporting (the raw value is kept in a debug field).

Reports are line-delimited JSON. Per-image records carry the fields
``image_id``, ``predicted`` (clamped), ``ground_truth`` and
``raw_prediction``; the final record carries ``summary`` with ``n``,
``mae`` and ``mse``. Cross-dataset matrices are one JSON record per
(source, target) cell.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    TILE_COLS,
    TILE_ROWS,
    AnnotatedImage,
    DatasetManifest,
    load_annotated_image,
    normalize,
    resize_image,
    tile_image,
)

logger = logging.getLogger(__name__)


@dataclass
class PerImageResult:
    image_id: str
    predicted: float  # clamped at zero
    ground_truth: float
    raw_prediction: float


@dataclass
class EvalReport:
    dataset_id: str
    model_id: str
    n: int
    mae: float
    mse: float
    per_image: list

    def validate(self):
        if self.mae > self.mse + 1e-9:
            raise AssertionError(f"MAE {self.mae} exceeds MSE {self.mse}")


@dataclass
class CrossDatasetCell:
    source: str
    target: str
    report: EvalReport | None = None
    error: str = ""


@dataclass
class KFoldReport:
    fold_reports: list
    fold_mean_mae: float
    fold_mean_mse: float
    pooled_mae: float
    pooled_mse: float


def mae(pairs) -> float:
    """Mean absolute error over (predicted, ground-truth) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("mae: empty prediction list")
    arr = np.asarray(pairs, dtype=np.float64)
    return float(np.mean(np.abs(arr[:, 0] - arr[:, 1])))


def mse(pairs) -> float:
    """Root mean squared error over (predicted, ground-truth) pairs."""
    pairs = list(pairs)
    if not pairs:
        raise ValueError("mse: empty prediction list")
    arr = np.asarray(pairs, dtype=np.float64)
    return float(np.sqrt(np.mean((arr[:, 0] - arr[:, 1]) ** 2)))


def predict_image(model, image: AnnotatedImage, data_cfg) -> tuple:
    """Image-level count: resize, tile, sum the six crop predictions.

    Returns (clamped, raw); the clamp at zero applies only to reporting.
    """
    crop = model.config.input_size
    resized = resize_image(image, out_w=TILE_COLS * crop, out_h=TILE_ROWS * crop)
    crops = tile_image(resized, crop)
    batch = np.stack([normalize(c.pixels, data_cfg.mean, data_cfg.std) for c in crops])
    raw = float(model.predict_counts(batch).sum())
    return max(0.0, raw), raw


def evaluate(model, manifest: DatasetManifest, data_cfg, model_id: str = "model") -> EvalReport:
    """MAE/MSE over a test manifest, with per-image predictions in manifest order."""
    if len(manifest) == 0:
        raise ValueError(f"evaluate: empty test split at {manifest.root}")
    per_image = []
    for entry in manifest.entries:
        image = load_annotated_image(manifest, entry)
        clamped, raw = predict_image(model, image, data_cfg)
        per_image.append(
            PerImageResult(
                image_id=entry.image_id,
                predicted=clamped,
                ground_truth=float(entry.count),
                raw_prediction=raw,
            )
        )
    pairs = [(r.predicted, r.ground_truth) for r in per_image]
    report = EvalReport(
        dataset_id=manifest.dataset_id,
        model_id=model_id,
        n=len(per_image),
        mae=mae(pairs),
        mse=mse(pairs),
        per_image=per_image,
    )
    report.validate()
    return report


def kfold_eval(manifest: DatasetManifest, k: int, train_and_eval, shuffle_seed: int | None = None) -> KFoldReport:
    """K-fold protocol: deterministic contiguous folds over manifest order.

    ``train_and_eval(train_entries, eval_manifest)`` must return an
    EvalReport for the held-out fold. A seeded shuffle of the entry order is
    optional; k=1 is rejected because it leaves no held-out data. Reports
    both the mean of per-fold metrics and the pooled metrics over all
    images, since fold aggregation conventions differ.
    """
    if k < 2:
        raise ValueError(f"kfold_eval: need k >= 2 folds, got {k}")
    n = len(manifest)
    if n < k:
        raise ValueError(f"kfold_eval: {n} images cannot fill {k} folds")
    entries = list(manifest.entries)
    if shuffle_seed is not None:
        order = np.random.default_rng(shuffle_seed).permutation(n)
        entries = [entries[i] for i in order]
    bounds = [round(i * n / k) for i in range(k + 1)]
    fold_reports = []
    pooled = []
    for i in range(k):
        held = entries[bounds[i] : bounds[i + 1]]
        rest = entries[: bounds[i]] + entries[bounds[i + 1] :]
        fold_manifest = DatasetManifest(
            root=manifest.root,
            entries=held,
            split="test",
            preset=manifest.preset,
            warnings=list(manifest.warnings),
        )
        report = train_and_eval(rest, fold_manifest)
        fold_reports.append(report)
        pooled.extend((r.predicted, r.ground_truth) for r in report.per_image)
    return KFoldReport(
        fold_reports=fold_reports,
        fold_mean_mae=float(np.mean([r.mae for r in fold_reports])),
        fold_mean_mse=float(np.mean([r.mse for r in fold_reports])),
        pooled_mae=mae(pooled),
        pooled_mse=mse(pooled),
    )


def cross_dataset_eval(models: dict, manifests: dict, data_cfg, include_diagonal: bool = False) -> list:
    """Evaluate every (source model, target dataset) pair without fine-tuning.

    ``models`` maps source dataset id to a model; ``manifests`` maps target
    dataset id to a test manifest. Diagonal (source == target) cells are
    skipped unless requested. Failures are recorded per cell and do not
    abort the sweep.
    """
    cells = []
    for source, model in models.items():
        for target, manifest in manifests.items():
            if source == target and not include_diagonal:
                continue
            cell = CrossDatasetCell(source=source, target=target)
            try:
                cell.report = evaluate(model, manifest, data_cfg, model_id=source)
            except Exception as exc:  # record and continue: partial-failure policy
                cell.error = str(exc)
                logger.warning("cross-eval %s -> %s failed: %s", source, target, exc)
            cells.append(cell)
    return cells


# -- report serialization ------------------------------------------------------


def report_to_lines(report: EvalReport) -> list:
    lines = []
    for r in report.per_image:
        lines.append(
            json.dumps(
                {
                    "image_id": r.image_id,
                    "predicted": r.predicted,
                    "ground_truth": r.ground_truth,
                    "raw_prediction": r.raw_prediction,
                },
                sort_keys=True,
            )
        )
    lines.append(
        json.dumps(
            {
                "summary": {
                    "dataset_id": report.dataset_id,
                    "model_id": report.model_id,
                    "n": report.n,
                    "mae": report.mae,
                    "mse": report.mse,
                }
            },
            sort_keys=True,
        )
    )
    return lines


def write_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text("".join(line + "\n" for line in report_to_lines(report)), encoding="utf-8")


def read_report_summary(path: str | Path) -> dict:
    last = Path(path).read_text(encoding="utf-8").strip().splitlines()[-1]
    return json.loads(last)["summary"]


def write_matrix(cells: list, path: str | Path) -> None:
    lines = []
    for cell in cells:
        record = {"source": cell.source, "target": cell.target}
        if cell.report is not None:
            record.update(n=cell.report.n, mae=cell.report.mae, mse=cell.report.mse)
        else:
            record["error"] = cell.error
        lines.append(json.dumps(record, sort_keys=True))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")
