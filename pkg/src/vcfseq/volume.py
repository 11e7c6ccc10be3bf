"""Volume container format and HU windowing.

On-disk layout (``.vsq``)::

    magic=VSQ1
    nz=<int>
    ny=<int>
    nx=<int>
    sz_mm=<float>
    sy_mm=<float>
    sx_mm=<float>
    <blank line>
    <nz*ny*nx little-endian int16 voxels, z-major, then y, then x>

Header lines are UTF-8 ``key=value``. Floats are written with ``repr`` so they
read back to the identical double.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

MAGIC = "VSQ1"
HU_MIN, HU_MAX = -1024, 3071
_HEADER_KEYS = ("magic", "nz", "ny", "nx", "sz_mm", "sy_mm", "sx_mm")


class VolumeFormatError(ValueError):
    """The file is not a well-formed volume container."""


class VolumeDataLengthError(VolumeFormatError):
    """Payload size disagrees with the header's shape."""


@dataclass(frozen=True, eq=False)
class Volume:
    """Axis-aligned CT volume in Hounsfield units.

    Attributes:
        data: int16 array of shape ``(nz, ny, nx)``.
        spacing: ``(sz, sy, sx)`` in millimetres.
    """

    data: np.ndarray
    spacing: tuple[float, float, float]

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {data.shape}")
        if data.dtype != np.int16:
            if not np.issubdtype(data.dtype, np.integer) and not np.all(data == np.round(data)):
                raise ValueError("volume data must hold integer HU values")
            if data.size and (data.min() < HU_MIN or data.max() > HU_MAX):
                raise ValueError(f"HU values outside [{HU_MIN}, {HU_MAX}]")
            data = data.astype(np.int16)
        elif data.size and (data.min() < HU_MIN or data.max() > HU_MAX):
            raise ValueError(f"HU values outside [{HU_MIN}, {HU_MAX}]")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(s > 0 and np.isfinite(s) for s in spacing):
            raise ValueError(f"spacing must be three positive numbers, got {self.spacing!r}")
        data = data.copy()
        data.flags.writeable = False
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return self.spacing == other.spacing and np.array_equal(self.data, other.data)


@dataclass(frozen=True)
class WindowSpec:
    center: float = 370.0
    width: float = 840.0

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"window width must be positive, got {self.width}")

    @property
    def lower(self) -> float:
        return self.center - self.width / 2


def encode_volume(volume: Volume) -> bytes:
    nz, ny, nx = volume.shape
    sz, sy, sx = volume.spacing
    header = (
        f"magic={MAGIC}\nnz={nz}\nny={ny}\nnx={nx}\n"
        f"sz_mm={sz!r}\nsy_mm={sy!r}\nsx_mm={sx!r}\n\n"
    )
    return header.encode("utf-8") + volume.data.astype("<i2").tobytes()


def decode_volume(raw: bytes) -> Volume:
    end = raw.find(b"\n\n")
    if end < 0:
        raise VolumeFormatError("header is not terminated by a blank line")
    try:
        lines = raw[:end].decode("utf-8").split("\n")
    except UnicodeDecodeError as exc:
        raise VolumeFormatError("header is not valid UTF-8") from exc
    fields = {}
    for line in lines:
        key, sep, value = line.partition("=")
        if not sep:
            raise VolumeFormatError(f"malformed header line {line!r}")
        fields[key] = value
    if fields.get("magic") != MAGIC:
        raise VolumeFormatError(f"bad magic {fields.get('magic')!r}")
    missing = [k for k in _HEADER_KEYS if k not in fields]
    if missing:
        raise VolumeFormatError(f"header missing {missing}")
    try:
        shape = tuple(int(fields[k]) for k in ("nz", "ny", "nx"))
        spacing = tuple(float(fields[k]) for k in ("sz_mm", "sy_mm", "sx_mm"))
    except ValueError as exc:
        raise VolumeFormatError(f"unparseable header value: {exc}") from exc
    if any(n < 1 for n in shape):
        raise VolumeFormatError(f"non-positive shape {shape}")

    payload = raw[end + 2 :]
    expected = 2 * shape[0] * shape[1] * shape[2]
    if len(payload) != expected:
        raise VolumeDataLengthError(
            f"header declares {shape} = {expected // 2} voxels but payload holds {len(payload) / 2:g}"
        )
    data = np.frombuffer(payload, dtype="<i2").reshape(shape).astype(np.int16)
    try:
        return Volume(data, spacing)
    except ValueError as exc:
        raise VolumeFormatError(str(exc)) from exc


def load_volume(path) -> Volume:
    """Read a ``.vsq`` file. Raises FileNotFoundError, VolumeFormatError or VolumeDataLengthError."""
    with open(path, "rb") as fh:
        return decode_volume(fh.read())


def save_volume(volume: Volume, path) -> None:
    raw = encode_volume(volume)
    with open(os.fspath(path), "wb") as fh:
        fh.write(raw)


def apply_window(volume, window: WindowSpec = WindowSpec()) -> np.ndarray:
    """Map HU linearly onto [0, 1] over the window and clamp outside it.

    Accepts a :class:`Volume` or any array of HU values; returns float64.
    """
    hu = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    out = (hu.astype(np.float64) - window.lower) / window.width
    return np.clip(out, 0.0, 1.0)
