"""Compact 3D spine representation: sagittal reslicing and patch tiling.

Patch axes are ``(H, W, Z)``: H runs down the spine (superior to inferior),
W runs anterior to posterior, Z runs across sagittal slices (left-right).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .volume import Volume, WindowSpec, apply_window

DEFAULT_PATCH = (32, 32, 16)
DEFAULT_CROP_MM = (60.0, 60.0)  # (anterior-posterior, left-right)
DEFAULT_ANTERIOR_BIAS_MM = 20.0
PATCH_MAGIC = "VSQP1"


def fourier_resample(signal, m: int, axis: int = -1) -> np.ndarray:
    """Band-limited resampling of a periodic sequence to ``m`` samples.

    The DFT is zero-padded (``m > n``) or truncated (``m < n``) around the
    centre of the spectrum. An even-length Nyquist bin is split in half when
    upsampling and folded onto the new Nyquist bin when downsampling, so a
    real input gives a real output. Output sample ``i`` lies at input
    position ``i * n / m``.
    """
    x = np.asarray(signal, dtype=np.float64)
    x = np.moveaxis(x, axis, -1)
    n = x.shape[-1]
    if n < 2 or m < 2:
        raise ValueError(f"fourier_resample needs n >= 2 and m >= 2, got n={n}, m={m}")
    if m == n:
        return np.moveaxis(x.copy(), -1, axis)

    spec = np.fft.fft(x, axis=-1)
    out = np.zeros(x.shape[:-1] + (m,), dtype=complex)
    lo = min(n, m)
    half = lo // 2
    if lo % 2:
        out[..., : half + 1] = spec[..., : half + 1]
        out[..., m - half :] = spec[..., n - half :]
    else:
        out[..., :half] = spec[..., :half]
        out[..., m - half + 1 :] = spec[..., n - half + 1 :]
        if m > n:
            out[..., half] = 0.5 * spec[..., half]
            out[..., m - half] = 0.5 * spec[..., half]
        else:
            out[..., half] = spec[..., half] + spec[..., n - half]
    res = np.fft.ifft(out, axis=-1) * (m / n)
    return np.moveaxis(res.real, -1, axis)


def resampled_length(nz: int, sz: float, sy: float) -> int:
    """Round-half-up of ``nz * sz / sy``."""
    return int(math.floor(nz * sz / sy + 0.5))


@dataclass
class SagittalVolume:
    """Windowed volume resliced to ``(x, z, y)`` with equal z/y pixel size.

    Attributes:
        data: float64 array ``(nx, nz', ny)`` in [0, 1].
        spacing: ``(sx, sz', sy)`` in millimetres.
        source_nz, source_sz: axial slice count and spacing of the source volume.
    """

    data: np.ndarray
    spacing: tuple
    source_nz: int
    source_sz: float

    @property
    def nz(self) -> int:
        return self.data.shape[1]

    def source_slice(self, zp):
        """Fractional source slice index of resampled row ``zp``."""
        return np.asarray(zp, dtype=np.float64) * self.source_nz / self.nz

    def row_center_mm(self, zp):
        """Depth of resampled row ``zp`` below the top edge of the source volume."""
        return (self.source_slice(zp) + 0.5) * self.source_sz


def reconstruct_sagittal(volume: Volume, window: WindowSpec = WindowSpec()) -> SagittalVolume:
    """Reslice axially acquired data to sagittal planes with square pixels.

    Every z column is Fourier-resampled so the vertical pixel size matches
    the in-plane ``sy``, then the HU window maps values onto [0, 1].
    """
    nz, ny, nx = volume.shape
    if nz < 2:
        raise ValueError("cannot reconstruct a sagittal view from a single slice")
    sz, sy, sx = volume.spacing
    m = resampled_length(nz, sz, sy)
    if m < 2:
        raise ValueError(f"resampled length {m} too short")
    sag = np.transpose(volume.data, (2, 0, 1)).astype(np.float64)  # (x, z, y)
    if m != nz:
        sag = fourier_resample(sag, m, axis=1)
    data = apply_window(sag, window)
    return SagittalVolume(data, (sx, nz * sz / m, sy), nz, sz)


def resize_linear(arr, shape) -> np.ndarray:
    """Separable (bi/tri)linear resize with centre-aligned pixels and edge clamping."""
    out = np.asarray(arr)
    for axis, new in enumerate(shape):
        old = out.shape[axis]
        if old == new:
            continue
        pos = np.clip((np.arange(new) + 0.5) * old / new - 0.5, 0, old - 1)
        i0 = np.floor(pos).astype(int)
        i1 = np.minimum(i0 + 1, old - 1)
        w = (pos - i0).reshape((-1,) + (1,) * (out.ndim - axis - 1))
        a = np.take(out, i0, axis=axis)
        b = np.take(out, i1, axis=axis)
        out = a + (b - a) * w
    return out


def tile_starts(length: int, tile: int) -> list[int]:
    """Evenly spread tile offsets covering ``[0, length)`` with ``ceil(length / tile)`` tiles."""
    if length < 1 or tile < 1:
        raise ValueError(f"length and tile must be positive, got {length}, {tile}")
    k = math.ceil(length / tile)
    if k == 1:
        return [0]
    return [int(math.floor(i * (length - tile) / (k - 1) + 0.5)) for i in range(k)]


def location_feature(i: int, k: int, length=None, tile=None) -> float:
    """Relative position of patch ``i``'s centre along the VOI (0 top, 1 bottom).

    Without ``length``/``tile`` the tiling is taken to be exact (``length = k * tile``).
    """
    if not 0 <= i < k:
        raise ValueError(f"patch index {i} outside 0..{k - 1}")
    if length is None:
        return (i + 0.5) / k
    if length <= tile:
        return 0.5
    start = tile_starts(length, tile)[i]
    return (start + tile / 2) / length


@dataclass
class PatchSequence:
    """Ordered patches of one series, top to bottom.

    Attributes:
        patches: ``(k, pH, pW, pZ)`` float32 in [0, 1].
        locations: ``(k,)`` relative positions of the patch centres.
        sources: ``(k, 3, 2)`` half-open source ranges in sagittal voxel
            coordinates, rows ordered (z, y, x). Ranges may run past the
            volume edge where edge replication filled the crop.
        intervals_mm: ``(k, 2)`` depth range covered by each tile, measured
            from the top edge of the source volume.
        voi_length: VOI length along the spine axis in sagittal rows.
        tile_length: source rows per tile.
    """

    patches: np.ndarray
    locations: np.ndarray
    sources: np.ndarray = None
    intervals_mm: np.ndarray = None
    voi_length: int = 0
    tile_length: int = 0
    mid_x: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.patches)

    @property
    def patch_shape(self):
        return self.patches.shape[1:]

    def replace_patches(self, patches) -> "PatchSequence":
        return PatchSequence(patches, self.locations, self.sources, self.intervals_mm, self.voi_length,
                             self.tile_length, self.mid_x, self.meta)


def _window_start(center: float, width: int) -> int:
    return int(math.floor(center - width / 2 + 0.5))


def tile_patches(sagittal: SagittalVolume, track, patch_size=DEFAULT_PATCH, crop_extent_mm=DEFAULT_CROP_MM,
                 anterior_bias_mm=DEFAULT_ANTERIOR_BIAS_MM, tile_length=None) -> PatchSequence:
    """Cut the VOI around the cord into ``k`` minimally overlapping patches.

    Args:
        sagittal: output of :func:`reconstruct_sagittal`.
        track: per-axial-slice cord centres, anything with a ``centers``
            ``(nz, 2)`` attribute (cx, cy in voxels) or such an array.
        patch_size: ``(pH, pW, pZ)`` after resizing.
        crop_extent_mm: ``(anterior-posterior, left-right)`` crop around the cord.
        anterior_bias_mm: shift of the AP crop centre towards anterior (-y).
        tile_length: source rows per tile along the spine; defaults to ``pH``.
    """
    centers = np.asarray(getattr(track, "centers", track), dtype=np.float64)
    if centers.shape != (sagittal.source_nz, 2):
        raise ValueError(f"track has shape {centers.shape}, expected ({sagittal.source_nz}, 2)")
    nx, length, ny = sagittal.data.shape
    sx, szp, sy = sagittal.spacing
    tile = int(tile_length or patch_size[0])
    wy = max(1, int(round(crop_extent_mm[0] / sy)))
    wx = max(1, int(round(crop_extent_mm[1] / sx)))
    if length < 1 or wy < 1 or wx < 1:
        raise ValueError("zero-extent VOI")

    starts = tile_starts(length, tile)
    k = len(starts)
    src_z = np.arange(sagittal.source_nz)
    patches = np.empty((k,) + tuple(patch_size), dtype=np.float32)
    sources = np.empty((k, 3, 2), dtype=np.int64)
    intervals = np.empty((k, 2))
    locations = np.empty(k)
    for n, start in enumerate(starts):
        rows = np.arange(start, start + tile)
        mid_row = start + (min(tile, length) - 1) / 2
        z_src = float(sagittal.source_slice(mid_row))
        cx = np.interp(z_src, src_z, centers[:, 0])
        cy = np.interp(z_src, src_z, centers[:, 1]) - anterior_bias_mm / sy
        y0, x0 = _window_start(cy, wy), _window_start(cx, wx)
        zi = np.clip(rows, 0, length - 1)
        yi = np.clip(np.arange(y0, y0 + wy), 0, ny - 1)
        xi = np.clip(np.arange(x0, x0 + wx), 0, nx - 1)
        block = sagittal.data[np.ix_(xi, zi, yi)].transpose(1, 2, 0)  # (H=z, W=y, Z=x)
        patches[n] = resize_linear(block, patch_size)
        sources[n] = [[start, start + tile], [y0, y0 + wy], [x0, x0 + wx]]
        last = min(start + tile, length) - 1
        intervals[n] = [sagittal.row_center_mm(start) - szp / 2, sagittal.row_center_mm(last) + szp / 2]
        locations[n] = (start + min(tile, length) / 2) / length

    mid_x = int(np.clip(round(float(np.median(centers[:, 0]))), 0, nx - 1))
    return PatchSequence(np.clip(patches, 0, 1), locations, sources, intervals, length, tile, mid_x)


def sequence_labels(patchseq: PatchSequence, vertebrae) -> np.ndarray:
    """Per-patch fracture targets.

    A patch is positive when at least half of some fractured vertebra's
    axial extent falls inside the patch's depth interval.
    """
    labels = np.zeros(len(patchseq), dtype=np.float64)
    for v in vertebrae:
        if not v.fractured:
            continue
        extent = v.bottom_mm - v.top_mm
        lo = np.maximum(patchseq.intervals_mm[:, 0], v.top_mm)
        hi = np.minimum(patchseq.intervals_mm[:, 1], v.bottom_mm)
        labels[(hi - lo) >= 0.5 * extent] = 1.0
    return labels


def save_patch_sequence(patchseq: PatchSequence, path) -> None:
    """Dump patches and locations: text header, then little-endian float32 payloads."""
    k, ph, pw, pz = patchseq.patches.shape
    header = f"magic={PATCH_MAGIC}\nk={k}\npH={ph}\npW={pw}\npZ={pz}\n\n".encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.asarray(patchseq.patches, dtype="<f4").tobytes())
        fh.write(np.asarray(patchseq.locations, dtype="<f4").tobytes())


def load_patch_sequence(path) -> PatchSequence:
    raw = open(path, "rb").read()
    end = raw.find(b"\n\n")
    if end < 0:
        raise ValueError(f"{path}: missing header terminator")
    fields = dict(line.split("=", 1) for line in raw[:end].decode().split("\n"))
    if fields.get("magic") != PATCH_MAGIC:
        raise ValueError(f"{path}: bad magic")
    k, ph, pw, pz = (int(fields[key]) for key in ("k", "pH", "pW", "pZ"))
    body = raw[end + 2 :]
    n = k * ph * pw * pz
    if len(body) != 4 * (n + k):
        raise ValueError(f"{path}: payload length {len(body)} != {4 * (n + k)}")
    patches = np.frombuffer(body[: 4 * n], dtype="<f4").reshape(k, ph, pw, pz).astype(np.float32)
    locations = np.frombuffer(body[4 * n :], dtype="<f4").astype(np.float64)
    return PatchSequence(patches, locations)
