# %% [markdown]
# Aggregation variants and the ensemble
# -------------------------------------
#
# Trains the three sequence aggregations (max patch probability, max with
# location, BiLSTM) under one seed and one dataset, compares them on the
# tuning split, picks a 3-model ensemble with flip/identity TTA, and scores
# the held-out split.
#
# The defaults reproduce the desk benchmark (200 series, desk schedule,
# about 10 minutes on one core). `N_SERIES=50 EPOCHS=1` gives a quick smoke
# pass with meaningless numbers.

# %%
import os
from pathlib import Path

from vcfseq.experiment import evaluate, run_aggregation_experiment, select_ensemble
from vcfseq.model import ModelConfig
from vcfseq.phantom import make_dataset, read_manifest
from vcfseq.pipeline import DESK_PREP, load_items
from vcfseq.training import DESK_SCHEDULE, with_overrides

N_SERIES = int(os.environ.get("N_SERIES", 200))
EPOCHS = int(os.environ.get("EPOCHS", DESK_SCHEDULE.epochs))
OUT = Path("walkthrough_out")
DATA = OUT / f"phantoms_{N_SERIES}"

# %%
if not (DATA / "manifest.tsv").exists():
    make_dataset(DATA, N_SERIES, 0.33, seed=42)
manifest = read_manifest(DATA)
items = {p: load_items(manifest, manifest.partition(p), DESK_PREP) for p in ("train", "tune", "test")}
print({p: len(v) for p, v in items.items()})

# %%
schedule = with_overrides(DESK_SCHEDULE, epochs=EPOCHS)
report = run_aggregation_experiment(items["train"], items["tune"], ModelConfig(patch_size=DESK_PREP.patch_size),
                                    schedule, prep=DESK_PREP, log=print)
print(report.to_text())

# %% [markdown]
# Exhaustive ensemble search on the tuning split, then the held-out numbers.

# %%
pool = [r.checkpoint for r in report.results]
choice = select_ensemble(pool, items["tune"], size=3)
print("ensemble", [report.results[i].variant for i in choice.members], choice.ttas, f"tune auc {choice.tune_auc:.3f}")
metrics, mean_s = evaluate(items["test"], [pool[i] for i in choice.members], choice.ttas)
print(metrics.report(mean_s))

for i in choice.members:
    pool[i].save(OUT / f"{report.results[i].variant}.ckpt")
