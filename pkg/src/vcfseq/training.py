"""Mini-batch training of the VCF model.

Batches are class balanced (half positive, half negative series, drawn with
replacement within each class). After every epoch the tuning-set ROC AUC is
computed and the best checkpoint so far is kept.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import ndimage

from . import nn
from .metrics import roc_auc
from .model import Checkpoint, ModelConfig, loss_and_grads, predict_series
from .pipeline import PrepConfig

MAX_ROTATION_DEG = 20.0


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    batch_size: int = 16
    epochs: int = 2000
    iters_per_epoch: int = 150
    lambda_seq: float | None = None  # None keeps the model config's lambda
    seed: int = 0
    flip: bool = True
    rotate: bool = True
    max_rotation_deg: float = MAX_ROTATION_DEG
    selection_metric: str = "tune_auc"

    def __post_init__(self):
        if self.batch_size < 2 or self.batch_size % 2:
            raise ValueError(f"batch size must be even and >= 2, got {self.batch_size}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")
        if self.epochs < 1 or self.iters_per_epoch < 1:
            raise ValueError("epochs and iterations per epoch must be >= 1")
        if self.selection_metric != "tune_auc":
            raise ValueError(f"unsupported selection metric {self.selection_metric!r}")


# long clinical schedule and the pinned desk-scale override
CLINICAL_SCHEDULE = TrainConfig()
DESK_SCHEDULE = TrainConfig(lr=1e-3, batch_size=8, epochs=10, iters_per_epoch=50)


# ------------------------------------------------------------ augmentation


@dataclass(frozen=True)
class AugmentDraw:
    flip_h: bool  # anterior-posterior mirror (patch W axis)
    flip_v: bool  # superior-inferior mirror (patch H axis)
    angle_deg: float


def draw_augmentation(rng: np.random.Generator, config: TrainConfig = TrainConfig()) -> AugmentDraw:
    flip_h = bool(rng.random() < 0.5) if config.flip else False
    flip_v = bool(rng.random() < 0.5) if config.flip else False
    angle = float(rng.uniform(-config.max_rotation_deg, config.max_rotation_deg)) if config.rotate else 0.0
    return AugmentDraw(flip_h, flip_v, angle)


def apply_augmentation(patches, draw: AugmentDraw) -> np.ndarray:
    """Apply one draw to every patch of a series: ``(k, H, W, Z)`` in, same shape out.

    Flips and the rotation act in the sagittal (H, W) plane. The rotation
    turns each patch about its own centre with bilinear interpolation and
    edge-replicating fill.
    """
    out = np.asarray(patches)
    if draw.flip_v:
        out = out[:, ::-1]
    if draw.flip_h:
        out = out[:, :, ::-1]
    if draw.angle_deg != 0.0:
        out = ndimage.rotate(out, draw.angle_deg, axes=(1, 2), reshape=False, order=1, mode="nearest")
    return np.ascontiguousarray(out)


def augment(patchseq, rng: np.random.Generator, config: TrainConfig = TrainConfig()):
    """Random series-consistent flips and rotation; locations stay unchanged."""
    draw = draw_augmentation(rng, config)
    return patchseq.replace_patches(apply_augmentation(patchseq.patches, draw).astype(patchseq.patches.dtype))


# ---------------------------------------------------------------- batching


def balanced_batch(rng: np.random.Generator, positives, negatives, batch_size: int) -> np.ndarray:
    """Item indices: ``batch_size/2`` positives then ``batch_size/2`` negatives, each with replacement."""
    if len(positives) == 0 or len(negatives) == 0:
        raise ValueError("class-balanced batches need both positive and negative series")
    half = batch_size // 2
    pos = np.asarray(positives)[rng.integers(len(positives), size=half)]
    neg = np.asarray(negatives)[rng.integers(len(negatives), size=half)]
    return np.concatenate([pos, neg])


# ---------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    tune_auc: float | None
    seconds: float


@dataclass
class TrainResult:
    checkpoint: Checkpoint  # best by tuning AUC (last epoch without a tuning set)
    final: Checkpoint
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_auc: float | None = None
    initial_loss: float = float("nan")


def dataset_loss(params, config: ModelConfig, items, lam=None, chunk: int = 16) -> float:
    """Mean composite loss over ``items`` without augmentation."""
    total = 0.0
    for s in range(0, len(items), chunk):
        part = items[s : s + chunk]
        loss, _, _ = loss_and_grads(params, config, [it.patches.patches for it in part],
                                    [it.patches.locations for it in part], [it.label for it in part],
                                    [it.patch_labels for it in part], lam)
        total += loss * len(part)
    return total / len(items)


def series_scores(checkpoint: Checkpoint, items, tta: str = "identity") -> np.ndarray:
    return np.array([predict_series(it.patches, checkpoint, tta).series_score for it in items])


def train(model_config: ModelConfig, train_items, tune_items=None, config: TrainConfig = DESK_SCHEDULE,
          prep: PrepConfig | None = None, log=None) -> TrainResult:
    """Adam on the composite loss with class-balanced batches and best-AUC selection.

    Args:
        train_items, tune_items: lists of :class:`vcfseq.pipeline.SeriesItem`.
            Without tuning items (or with a single-class tuning set) the
            last epoch's parameters are returned.
        prep: stored in the checkpoint so inference can rebuild the inputs.
    """
    pos = [i for i, it in enumerate(train_items) if it.label == 1]
    neg = [i for i, it in enumerate(train_items) if it.label == 0]
    if not pos or not neg:
        raise ValueError("training set must contain at least one positive and one negative series")
    for it in train_items:
        if it.patches.patch_shape != tuple(model_config.patch_size):
            raise ValueError(f"series {it.series_id}: patch shape {it.patches.patch_shape} != {model_config.patch_size}")
    tunable = bool(tune_items) and len({it.label for it in tune_items}) == 2

    rng = np.random.default_rng(config.seed)
    ckpt = Checkpoint.initial(model_config, seed=config.seed)
    meta = {"seed": str(config.seed), "lr": repr(config.lr), "batch": str(config.batch_size),
            "epochs": str(config.epochs), "iters": str(config.iters_per_epoch)}
    if prep is not None:
        meta.update(prep.to_meta())
    ckpt.meta = dict(meta)
    state = nn.AdamState(lr=config.lr)
    result = TrainResult(ckpt.copy(), ckpt)
    result.initial_loss = dataset_loss(ckpt.params, model_config, train_items, config.lambda_seq)

    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        losses = []
        for _ in range(config.iters_per_epoch):
            idx = balanced_batch(rng, pos, neg, config.batch_size)
            patches, locs, y, y_seq = [], [], [], []
            for i in idx:
                it = train_items[i]
                p = it.patches.patches
                if config.flip or config.rotate:
                    p = apply_augmentation(p, draw_augmentation(rng, config)).astype(p.dtype, copy=False)
                patches.append(p)
                locs.append(it.patches.locations)
                y.append(it.label)
                y_seq.append(it.patch_labels)
            loss, grads, _ = loss_and_grads(ckpt.params, model_config, patches, locs, y, y_seq, config.lambda_seq)
            nn.adam_step(ckpt.params, grads, state)
            losses.append(loss)

        auc = roc_auc(series_scores(ckpt, tune_items), [it.label for it in tune_items]).auc if tunable else None
        rec = EpochRecord(epoch, float(np.mean(losses)), auc, time.perf_counter() - t0)
        result.history.append(rec)
        if auc is not None and (result.best_auc is None or auc > result.best_auc):
            result.best_auc, result.best_epoch = auc, epoch
            result.checkpoint = ckpt.copy()
            result.checkpoint.meta.update({"best_epoch": str(epoch), "tune_auc": repr(auc)})
        if log:
            auc_text = "n/a" if auc is None else f"{auc:.4f}"
            log(f"epoch {epoch}/{config.epochs} loss={rec.mean_loss:.5f} tune_auc={auc_text} ({rec.seconds:.1f}s)")

    if not tunable:
        result.checkpoint = ckpt.copy()
        result.best_epoch = config.epochs
        result.checkpoint.meta["best_epoch"] = str(config.epochs)
    result.final = ckpt
    return result


def with_overrides(config: TrainConfig, **kwargs) -> TrainConfig:
    """``dataclasses.replace`` that ignores ``None`` values (handy for CLI flags)."""
    return replace(config, **{k: v for k, v in kwargs.items() if v is not None})
