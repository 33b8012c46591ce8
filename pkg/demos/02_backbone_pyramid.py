"""Backbone walkthrough: overlapping patch embedding, spatial-reduction
attention stages, and the pooled aggregation head.

The tiny profile (64x64 input) keeps this instant; switch PROFILE to
"pvt_v2_b5" to see the full-scale 384x384 geometry (one forward pass takes
a few seconds and ~1 GB of RAM).

Run: python3 demos/02_backbone_pyramid.py
"""

import numpy as np

from crowdformer import CrowdFormer, Tensor, load_config, no_grad

PROFILE = "tiny"

cfg = load_config(PROFILE)
mc = cfg.model
print(f"profile {PROFILE}: input {mc.input_size}x{mc.input_size}, dims {mc.embed_dims}, "
      f"depths {mc.stage_depths}, heads {mc.num_heads}, sr ratios {mc.sr_ratios}")

model = CrowdFormer(mc, np.random.default_rng(0))
print(f"parameters: {model.num_params():,}")

x = Tensor(np.random.default_rng(1).standard_normal((1, 3, mc.input_size, mc.input_size)))
with no_grad():
    pyramid = model.pyramid(x)
    aggregated = model.head.aggregate(pyramid)
    counts = model.head.regress(aggregated)

print("\nstage outputs (spatial side halves every stage, starting at input/4):")
for i, fmap in enumerate(pyramid, start=1):
    n, c, h, w = fmap.shape
    print(f"  stage {i}: {h:>3} x {w:<3} x {c:<4} (input / {mc.input_size // h})")

print(f"\npooled + projected + concatenated feature: {aggregated.shape[1]} wide")
print(f"regressed count for this random crop: {counts.item():+.4f} "
      "(raw; untrained weights, clamped at 0 only when reporting)")
