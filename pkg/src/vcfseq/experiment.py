"""Aggregation-strategy comparison, ensemble selection and evaluation."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .metrics import Metrics, roc_auc
from .model import TTA_ALIASES, TTAS, Checkpoint, ModelConfig, ensemble_member_scores
from .phantom import read_centerline
from .pipeline import PrepConfig, prepare_volume
from .training import DESK_SCHEDULE, TrainConfig, series_scores, train
from .volume import load_volume

EXPERIMENT_VARIANTS = ("max_prob", "max_prob_with_location", "bilstm")
REFERENCE_TUNE_AUC = 0.961  # clinical tuning result, context only
MAX_POOL = 8


@dataclass
class VariantResult:
    variant: str
    checkpoint: Checkpoint
    metrics: Metrics
    best_epoch: int
    train_seconds: float


@dataclass
class AggregationReport:
    results: list = field(default_factory=list)

    def variant(self, name: str) -> VariantResult:
        for r in self.results:
            if r.variant == name:
                return r
        raise KeyError(name)

    def to_text(self) -> str:
        lines = [f"# aggregation comparison (reference tuning auc={REFERENCE_TUNE_AUC}, clinical data; not a target)"]
        for r in self.results:
            m = r.metrics
            lines.append(f"variant={r.variant} tune_auc={m.auc:.6f} sens@0.5={m.sensitivity:.6f} "
                         f"spec@0.5={m.specificity:.6f} best_epoch={r.best_epoch} train_s={r.train_seconds:.1f}")
        for r in self.results:
            pts = " ".join(f"{f:.6g},{t:.6g}" for f, t in zip(r.metrics.fpr, r.metrics.tpr))
            lines.append(f"roc {r.variant} {pts}")
        return "\n".join(lines) + "\n"


def run_aggregation_experiment(train_items, tune_items, base_config: ModelConfig, train_config: TrainConfig = DESK_SCHEDULE,
                               variants=EXPERIMENT_VARIANTS, prep: PrepConfig | None = None, log=None) -> AggregationReport:
    """Train every variant with identical seed and data, then score the tuning set."""
    report = AggregationReport()
    for variant in variants:
        config = replace(base_config, seq_variant=variant)
        t0 = time.perf_counter()
        result = train(config, train_items, tune_items, train_config, prep,
                       log=None if log is None else (lambda msg, v=variant: log(f"[{v}] {msg}")))
        elapsed = time.perf_counter() - t0
        metrics = roc_auc(series_scores(result.checkpoint, tune_items), [it.label for it in tune_items])
        report.results.append(VariantResult(variant, result.checkpoint, metrics, result.best_epoch, elapsed))
        if log:
            log(f"[{variant}] tune_auc={metrics.auc:.4f}")
    return report


@dataclass
class EnsembleChoice:
    members: tuple  # indices into the candidate pool
    ttas: tuple
    tune_auc: float


def select_ensemble(candidates, tune_items, size: int = 3, ttas=TTAS) -> EnsembleChoice:
    """Exhaustive search over ``size``-member subsets and per-member TTA choices.

    The ensemble score is the mean member score; the winner maximises tuning
    AUC, the first in enumeration order on ties.
    """
    candidates = list(candidates)
    if len(candidates) > MAX_POOL:
        raise ValueError(f"candidate pool capped at {MAX_POOL}, got {len(candidates)}")
    if not 1 <= size <= len(candidates):
        raise ValueError(f"ensemble size {size} not possible with {len(candidates)} candidates")
    labels = [it.label for it in tune_items]
    ttas = tuple(TTA_ALIASES[t] for t in ttas)
    table = {(i, t): series_scores(ck, tune_items, t) for i, ck in enumerate(candidates) for t in ttas}
    best = None
    for members in itertools.combinations(range(len(candidates)), size):
        for assign in itertools.product(ttas, repeat=size):
            score = np.mean([table[(i, t)] for i, t in zip(members, assign)], axis=0)
            auc = roc_auc(score, labels).auc
            if best is None or auc > best.tune_auc:
                best = EnsembleChoice(members, assign, auc)
    return best


def evaluate(items, checkpoints, ttas=None) -> tuple[Metrics, float]:
    """Ensemble metrics over ``items`` and the mean per-series inference time in seconds."""
    scores, times = [], []
    for it in items:
        t0 = time.perf_counter()
        member = ensemble_member_scores(it.patches, checkpoints, ttas)
        scores.append(float(np.mean(member)))
        times.append(time.perf_counter() - t0)
    return roc_auc(scores, [it.label for it in items]), float(np.mean(times))


def evaluate_records(manifest, records, checkpoints, ttas=None, detector=None, prep: PrepConfig | None = None):
    """Whole-pipeline evaluation: load, track, reslice, tile and score each series.

    Returns ``(metrics, mean_seconds_per_series)``; the timing covers every
    step after the manifest lookup.
    """
    prep = PrepConfig.from_meta(checkpoints[0].meta) if prep is None else prep
    scores, times = [], []
    for rec in records:
        t0 = time.perf_counter()
        volume = load_volume(manifest.volume_path(rec))
        source = detector if detector is not None else read_centerline(manifest.label_path(rec))[0]
        seq = prepare_volume(volume, source, prep).patches
        scores.append(float(np.mean(ensemble_member_scores(seq, checkpoints, ttas))))
        times.append(time.perf_counter() - t0)
    return roc_auc(scores, [int(r.positive) for r in records]), float(np.mean(times))
