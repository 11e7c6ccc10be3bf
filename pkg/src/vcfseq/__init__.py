"""Vertebral compression fracture detection on spine volumes.

A numpy/scipy pipeline: phantom CT generation, cord detection, sagittal
patch-sequence representation, a hand-differentiated 3D CNN + sequence
model, and training/evaluation utilities.
"""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .detector import (
    BoxDetection,
    CordTrack,
    DetectorConfig,
    DetectorParams,
    DetectorTrainConfig,
    detect_slice,
    detect_track,
    interpolate_track,
    train_detector,
)
from .metrics import Metrics, mann_whitney_auc, roc_auc
from .model import Checkpoint, ModelConfig, SeriesPrediction, ensemble_predict, predict_series
from .phantom import PhantomSpec, generate_series, make_dataset, read_manifest
from .pipeline import DESK_PREP, PrepConfig, prepare_volume
from .render import render_overlay
from .representation import (
    PatchSequence,
    SagittalVolume,
    fourier_resample,
    reconstruct_sagittal,
    tile_patches,
    tile_starts,
)
from .training import DESK_SCHEDULE, CLINICAL_SCHEDULE, TrainConfig, augment, train
from .volume import Volume, WindowSpec, apply_window, load_volume, save_volume

__version__ = "0.1.0"
