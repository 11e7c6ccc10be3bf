"""Mid-sagittal overlay images (binary PGM)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .representation import SagittalVolume, reconstruct_sagittal
from .volume import Volume, WindowSpec

BOX_LEVEL = 255


def encode_pgm(image) -> bytes:
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM needs a 2-D uint8 image")
    rows, cols = image.shape
    return f"P5\n{cols} {rows}\n255\n".encode() + image.tobytes()


def decode_pgm(raw: bytes) -> np.ndarray:
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P5" or parts[2] != b"255":
        raise ValueError("not an 8-bit binary PGM")
    cols, rows = (int(v) for v in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8)
    if data.size != rows * cols:
        raise ValueError("PGM payload size mismatch")
    return data.reshape(rows, cols)


def overlay_image(sagittal: SagittalVolume, box=None, mid_x: int | None = None) -> np.ndarray:
    """8-bit mid-sagittal slice (rows down the spine, columns anterior to posterior) with a 1 px box border."""
    nx = sagittal.data.shape[0]
    x = nx // 2 if mid_x is None else int(np.clip(mid_x, 0, nx - 1))
    img = np.floor(np.clip(sagittal.data[x], 0, 1) * 255 + 0.5).astype(np.uint8)
    if box is not None:
        rows, cols = img.shape
        r0, r1, c0, c1 = box
        r0, c0 = max(0, int(r0)), max(0, int(c0))
        r1, c1 = min(rows, int(r1)), min(cols, int(c1))
        if r1 > r0 and c1 > c0:
            img[r0, c0:c1] = BOX_LEVEL
            img[r1 - 1, c0:c1] = BOX_LEVEL
            img[r0:r1, c0] = BOX_LEVEL
            img[r0:r1, c1 - 1] = BOX_LEVEL
    return img


def render_overlay(volume, prediction, out_path, window: WindowSpec = WindowSpec()) -> np.ndarray:
    """Write the mid-sagittal slice with the localisation box burned in; returns the image.

    ``volume`` is a :class:`Volume` (resliced here) or an already
    reconstructed :class:`SagittalVolume`.
    """
    sagittal = reconstruct_sagittal(volume, window) if isinstance(volume, Volume) else volume
    img = overlay_image(sagittal, prediction.box, prediction.mid_x)
    Path(out_path).write_bytes(encode_pgm(img))
    return img
