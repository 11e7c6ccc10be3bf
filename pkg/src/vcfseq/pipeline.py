"""Glue from raw volumes to model-ready patch sequences.

``PrepConfig`` fixes everything between the volume and the patch tensor
(window, crop, tile length, patch size). It travels inside model
checkpoints so inference prepares series exactly as training did.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detector import CordTrack, DetectorParams, detect_track
from .phantom import Manifest, SeriesRecord, read_centerline
from .representation import (
    DEFAULT_ANTERIOR_BIAS_MM,
    DEFAULT_CROP_MM,
    DEFAULT_PATCH,
    PatchSequence,
    SagittalVolume,
    reconstruct_sagittal,
    sequence_labels,
    tile_patches,
)
from .volume import Volume, WindowSpec, load_volume


@dataclass(frozen=True)
class PrepConfig:
    patch_size: tuple = DEFAULT_PATCH
    tile_length: int | None = None  # sagittal rows per tile; None means patch height
    crop_extent_mm: tuple = DEFAULT_CROP_MM
    anterior_bias_mm: float = DEFAULT_ANTERIOR_BIAS_MM
    window: WindowSpec = WindowSpec()

    def to_meta(self) -> dict:
        return {
            "prep.patch": ",".join(map(str, self.patch_size)),
            "prep.tile_length": str(self.tile_length or 0),
            "prep.crop_mm": ",".join(repr(float(v)) for v in self.crop_extent_mm),
            "prep.anterior_bias_mm": repr(float(self.anterior_bias_mm)),
            "prep.window": f"{self.window.center!r},{self.window.width!r}",
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "PrepConfig":
        if "prep.patch" not in meta:
            return cls()
        center, width = (float(v) for v in meta["prep.window"].split(","))
        return cls(
            tuple(int(v) for v in meta["prep.patch"].split(",")),
            int(meta["prep.tile_length"]) or None,
            tuple(float(v) for v in meta["prep.crop_mm"].split(",")),
            float(meta["prep.anterior_bias_mm"]),
            WindowSpec(center, width),
        )


# desk-scale benchmark inputs: half-resolution patches over 32-row tiles
DESK_PREP = PrepConfig(patch_size=(16, 16, 8), tile_length=32)


@dataclass
class PreparedSeries:
    sagittal: SagittalVolume
    track: CordTrack
    patches: PatchSequence


@dataclass
class SeriesItem:
    """One labelled series ready for training or evaluation."""

    series_id: str
    patches: PatchSequence
    label: int
    patch_labels: np.ndarray
    meta: dict = field(default_factory=dict)


def track_from_centerline(centerline, sz: float) -> CordTrack:
    centerline = np.asarray(centerline, dtype=np.float64)
    return CordTrack(centerline, np.ones(len(centerline), dtype=bool), sz)


def prepare_volume(volume: Volume, track_source, prep: PrepConfig = PrepConfig()) -> PreparedSeries:
    """Sagittal reconstruction, cord tracking and tiling for one volume.

    ``track_source`` is a :class:`DetectorParams`, a :class:`CordTrack` or
    an ``(nz, 2)`` centreline array.
    """
    if isinstance(track_source, DetectorParams):
        track = detect_track(volume, track_source, prep.window)
    elif isinstance(track_source, CordTrack):
        track = track_source
    else:
        track = track_from_centerline(track_source, volume.spacing[0])
    sagittal = reconstruct_sagittal(volume, prep.window)
    seq = tile_patches(sagittal, track, prep.patch_size, prep.crop_extent_mm, prep.anterior_bias_mm,
                       prep.tile_length)
    return PreparedSeries(sagittal, track, seq)


def load_items(manifest: Manifest, records, prep: PrepConfig = PrepConfig(), detector: DetectorParams | None = None):
    """Prepare manifest records; the cord track comes from ``detector`` or, without one, the label sidecar."""
    items = []
    for rec in records:
        items.append(load_item(manifest, rec, prep, detector))
    return items


def load_item(manifest: Manifest, record: SeriesRecord, prep: PrepConfig = PrepConfig(),
              detector: DetectorParams | None = None) -> SeriesItem:
    volume = load_volume(manifest.volume_path(record))
    source = detector if detector is not None else read_centerline(manifest.label_path(record))[0]
    prepared = prepare_volume(volume, source, prep)
    y_seq = sequence_labels(prepared.patches, record.vertebrae)
    return SeriesItem(record.series_id, prepared.patches, int(record.positive), y_seq)
