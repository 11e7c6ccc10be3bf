# %% [markdown]
# Localisation overlay
# --------------------
#
# Uses a checkpoint from `03_aggregation_experiment.py` (or trains a short
# one) to score a fresh fractured phantom, then burns the box of the most
# suspicious patch into the mid-sagittal slice.

# %%
from pathlib import Path

from vcfseq.model import Checkpoint, predict_series
from vcfseq.phantom import PhantomSpec, generate_series
from vcfseq.pipeline import PrepConfig, prepare_volume
from vcfseq.render import render_overlay

OUT = Path("walkthrough_out")
ckpt_path = OUT / "max_prob.ckpt"
if not ckpt_path.exists():
    raise SystemExit(f"{ckpt_path} missing: run notebooks/03_aggregation_experiment.py first")
ck = Checkpoint.load(ckpt_path)
prep = PrepConfig.from_meta(ck.meta)  # the checkpoint remembers how its inputs were prepared

# %%
volume, label = generate_series(PhantomSpec(seed=2024), [(9, "severe")])
prepared = prepare_volume(volume, label.canal_centerline, prep)
pred = predict_series(prepared.patches, ck, sagittal_shape=prepared.sagittal.data.shape[1:])
v = label.per_vertebra[9]
lo, hi = prepared.patches.intervals_mm[pred.argmax_patch]
print(f"score {pred.series_score:.3f}; argmax patch {pred.argmax_patch} covers {lo:.0f}-{hi:.0f} mm; "
      f"fractured vertebra centre at {(v.top_mm + v.bottom_mm) / 2:.0f} mm")

# %%
img = render_overlay(prepared.sagittal, pred, OUT / "overlay.pgm")
print("overlay", img.shape, "->", OUT / "overlay.pgm")
