# %% [markdown]
# # CircleMix, oversampling and detection metrics
#
# Small numeric walk-through of the augmentation and evaluation helpers.

# %%
from pathlib import Path

import numpy as np
from PIL import Image

from lnpath.augment import LabeledCrop, circlemix, oversample_weights
from lnpath.classes import GlomerulusClass as G, to_vector
from lnpath.geometry import BoundingBox, Detection
from lnpath.metrics import evaluate_detections
from lnpath.synth import render_glomerulus

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

# %%
a = LabeledCrop(render_glomerulus({G.Normal}, side=96, seed=1), to_vector({G.Normal}))
b = LabeledCrop(render_glomerulus({G.Crescent}, side=96, seed=2), to_vector({G.Crescent}))
mixed, spec = circlemix(a, b, 30, 150)
print(f"arc 30-150 deg takes lambda={spec.lam:.4f} of the pixels from a")
print("mixed label vector:", np.round(mixed.labels, 4))
Image.fromarray(np.concatenate([a.image, b.image, mixed.image], axis=1)).save(out / "circlemix.png")

# %%
# reference cohort class counts as single-label samples: rare classes get larger weights
counts = [18, 25, 19, 10, 41, 10, 5, 14, 2]
labels = [to_vector({G(c)}) for c, n in enumerate(counts) for _ in range(n)]
w = oversample_weights(labels)
draws = np.random.default_rng(0).choice(len(labels), 50_000, p=w)
per_class = np.bincount(np.repeat(np.arange(9), counts)[draws], minlength=9) / len(draws)
for c in G:
    print(f"{c.name:<30} raw {counts[c] / sum(counts):.3f}  resampled {per_class[c]:.3f}")

# %%
truth = {"s1": [BoundingBox(10, 10, 50, 50), BoundingBox(100, 100, 140, 150)]}
preds = {"s1": [Detection(BoundingBox(12, 11, 52, 49), 0.9), Detection(BoundingBox(300, 300, 320, 320), 0.8),
                Detection(BoundingBox(104, 98, 140, 146), 0.6)]}
res = evaluate_detections(preds, truth)
print({k: round(v, 4) for k, v in res.ap_per_iou.items()})
print(f"AP[.5:.95] {res.ap_range:.4f}  AR[.5:.95] {res.ar_range:.4f}")
