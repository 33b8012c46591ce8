"""Training walkthrough: smooth-L1 objective, AdamW, and MAE/MSE evaluation
on a synthetic dataset. About a minute of CPU time.

Run: python3 demos/04_train_and_evaluate.py
"""

import dataclasses
import tempfile
from pathlib import Path

import numpy as np

from crowdformer import AdamW, CrowdFormer, load_config, train_epoch
from crowdformer.data import TrainingSet, gen_synthetic_dataset
from crowdformer.evaluation import evaluate

EPOCHS = 60

cfg = load_config("tiny")
cfg.data = dataclasses.replace(cfg.data, augment=False)  # cleaner overfit curve

with tempfile.TemporaryDirectory() as td:
    manifest = gen_synthetic_dataset(Path(td) / "train", n_images=12, count_range=(5, 50), seed=21)
    counts = np.array([e.count for e in manifest.entries], dtype=float)
    baseline = np.mean(np.abs(counts - counts.mean()))
    print(f"12 synthetic images, counts {counts.min():.0f}..{counts.max():.0f}; "
          f"constant-mean predictor MAE {baseline:.2f}")

    train_set = TrainingSet(manifest, cfg.model.input_size, cfg.data)
    rng = np.random.default_rng(cfg.optim.seed)
    model = CrowdFormer(cfg.model, rng)
    optimizer = AdamW(model.named_params(), cfg.optim)

    print(f"\ntraining tiny profile for {EPOCHS} epochs "
          f"(lr {cfg.optim.learning_rate}, beta {cfg.loss.beta}, batch = 1 image = 6 crops)")
    for epoch in range(1, EPOCHS + 1):
        mean_loss = train_epoch(model, train_set, cfg.loss, optimizer, rng)
        if epoch % 10 == 0:
            report = evaluate(model, manifest, cfg.data)
            print(f"  epoch {epoch:>3}: mean loss {mean_loss:7.4f}   train MAE {report.mae:6.2f}")

    report = evaluate(model, manifest, cfg.data)
    print(f"\nfinal train MAE {report.mae:.2f} (baseline {baseline:.2f}); per-image predictions:")
    for row in report.per_image[:5]:
        print(f"  {row.image_id}: predicted {row.predicted:6.2f}  truth {row.ground_truth:4.0f}")
