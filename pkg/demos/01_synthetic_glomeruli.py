# %% [markdown]
# # Synthetic glomeruli and stain normalization
#
# Renders one glomerulus per phenotype, a full slide with boxes, and shows
# what stain normalization does to a slide stained with a different matrix.
# Images land in demos/out/.

# %%
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from lnpath.classes import GlomerulusClass
from lnpath.stain import compute_stain_stats, normalize
from lnpath.synth import SynthSpec, generate_slide, render_glomerulus

out = Path(__file__).parent / "out"
out.mkdir(exist_ok=True)

# %%
# one 96px crop per class, side by side
tiles = [render_glomerulus({c}, side=96, seed=int(c)) for c in GlomerulusClass]
Image.fromarray(np.concatenate(tiles, axis=1)).save(out / "phenotypes.png")
print("classes:", ", ".join(c.name for c in GlomerulusClass))

# %%
# a slide plus its ground-truth boxes
slide = generate_slide(SynthSpec(seed=0), seed=1)
im = Image.fromarray(slide.image)
draw = ImageDraw.Draw(im)
for a in slide.annotations:
    b = a.box
    draw.rectangle([b.x_min, b.y_min, b.x_max, b.y_max], outline=(0, 160, 0), width=2)
im.save(out / "slide_boxes.png")
print(f"{slide.slide_id}: {len(slide.annotations)} glomeruli, labels",
      [sorted(c.name for c in a.labels) for a in slide.annotations])

# %%
# normalize a second slide (different jittered stain matrix) to the first one
target = compute_stain_stats(slide.image)
other = generate_slide(SynthSpec(stain_jitter=0.12, seed=5), seed=2)
fixed = normalize(other.image, target)
Image.fromarray(np.concatenate([other.image, fixed], axis=0)).save(out / "normalized.png")
print("target stain matrix (columns = stains):")
print(np.round(target.stain_matrix.matrix, 3))
print("source p99 concentrations:", np.round(compute_stain_stats(other.image).conc_percentile_99, 3),
      "-> target", np.round(target.conc_percentile_99, 3))
