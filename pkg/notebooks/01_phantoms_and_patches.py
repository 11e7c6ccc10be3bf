# %% [markdown]
# Phantoms, windowing and patch sequences
# ---------------------------------------
#
# A walk from one synthetic CT series to the patch sequence the model sees.
# Run top to bottom (`python3 notebooks/01_phantoms_and_patches.py`) or cell
# by cell in an editor that understands `# %%` markers.

# %%
from pathlib import Path

import numpy as np

from vcfseq.phantom import PhantomSpec, generate_series
from vcfseq.pipeline import DESK_PREP, prepare_volume
from vcfseq.render import encode_pgm, overlay_image
from vcfseq.representation import sequence_labels
from vcfseq.volume import WindowSpec, apply_window

OUT = Path("walkthrough_out")
OUT.mkdir(exist_ok=True)

# %% [markdown]
# One series with a severe fracture at vertebra 6 and a mild one at 11.
# The label keeps the exact geometry, so everything downstream can be
# checked against it.

# %%
spec = PhantomSpec(seed=3)
volume, label = generate_series(spec, [(6, "severe"), (11, "mild")])
print("volume", volume.shape, "spacing (z, y, x) mm", volume.spacing)
for v in label.per_vertebra:
    if v.fractured:
        print(f"vertebra {v.index}: {v.grade}, height loss {v.height_loss:.2f}, "
              f"{v.top_mm:.1f}-{v.bottom_mm:.1f} mm")

# %% [markdown]
# Bone window: centre 370 HU, width 840 HU, clamped to [0, 1].

# %%
axial = apply_window(volume.data[volume.shape[0] // 2], WindowSpec())
print("axial slice range", axial.min(), axial.max())
(OUT / "axial_mid.pgm").write_bytes(encode_pgm(np.floor(axial * 255 + 0.5).astype(np.uint8)))

# %% [markdown]
# Reslice to an isotropic sagittal volume, crop around the cord track and
# tile along the spine. The desk preset uses 16x16x8 patches over 32-row tiles.

# %%
prepared = prepare_volume(volume, label.canal_centerline, DESK_PREP)
seq = prepared.patches
y = sequence_labels(seq, label.per_vertebra)
print("sagittal", prepared.sagittal.data.shape, "patches", seq.patches.shape)
for i, (loc, (lo, hi), yi) in enumerate(zip(seq.locations, seq.intervals_mm, y)):
    print(f"patch {i:2d}  loc={loc:.3f}  {lo:6.1f}-{hi:6.1f} mm  label={int(yi)}")

# %%
img = overlay_image(prepared.sagittal, None, seq.mid_x)
(OUT / "sagittal_mid.pgm").write_bytes(encode_pgm(img))
print("wrote", OUT / "axial_mid.pgm", "and", OUT / "sagittal_mid.pgm")
