# %% [markdown]
# # End to end on a small synthetic cohort
#
# Writes a cohort to disk as PNG + ImageScope XML, trains every stage at a
# reduced scale (about five minutes on one core), and prints the patient report.
# The acceptance suite runs the same stages at full scale.

# %%
import sys
from dataclasses import replace
from pathlib import Path

from lnpath import pipeline as P
from lnpath.io.config import RunConfig, dump_config

work = Path(__file__).parent / "out" / "e2e"
cfg = RunConfig()
cfg = replace(
    cfg,
    synth=replace(cfg.synth, patients_per_ln_class=5, glomeruli_per_patient=(16, 24), slide_size=(512, 384),
                  glomeruli_per_slide=(4, 6), radius_range=(30.0, 44.0)),
    detector=replace(cfg.detector, epochs=25, batch_size=2, max_side=512),
    classifier=replace(cfg.classifier, input_side=64, finetune_epochs=15, pretrain_epochs=10),
    artifacts_dir=str(work / "artifacts"),
).with_seed(1)
work.mkdir(parents=True, exist_ok=True)
(work / "config.yaml").write_text(dump_config(cfg))

# %%
manifest = P.synthesize(cfg, work / "data")
print(f"{len(manifest.slides)} slides, {len(manifest.patients)} patients")

# %%
arts, split = P.train_all(manifest, cfg, cfg.artifacts_dir, log=lambda m: print(m, file=sys.stderr))
det = P.evaluate_detector_stage(manifest, split[2], arts.stain, arts.detector, cfg)
print(f"test AP@0.5 {det.ap_per_iou[0.5]:.3f}  AR {det.ar_range:.3f}")

# %%
report = P.run_pipeline(manifest, arts, cfg, slide_ids=split[2], overlay_dir=work / "overlays")
(work / "report.json").write_text(P.report_json(report))
print(P.summary_table(report))
