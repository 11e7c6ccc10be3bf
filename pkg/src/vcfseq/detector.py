"""Single-class grid detector for the spinal cord on axial slices.

An S x S grid over the (resized) slice; every cell predicts
``(tx, ty, tw, th, conf)``. Decoding follows the usual YOLO form: the centre
sits at ``(cell + sigmoid(t)) * cell_size`` and the size is an anchor scaled
by ``exp(t)``. Exactly one cord exists per slice, so inference keeps the
single most confident cell (row-major first on ties) and needs no NMS.

Detections run on a sparse set of slices (every 30 mm) and the remaining
slices are filled by linear interpolation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .checkpoint import load_checkpoint, save_checkpoint
from .representation import resize_linear
from .volume import Volume, WindowSpec, apply_window

DETECTION_SPACING_MM = 30.0


@dataclass(frozen=True)
class BoxDetection:
    center: tuple  # (cx, cy) in voxel indices of the original slice
    size: tuple  # (w, h) in voxels
    confidence: float
    slice_index: int = 0

    def __post_init__(self):
        if not (self.size[0] > 0 and self.size[1] > 0):
            raise ValueError(f"box size must be positive, got {self.size}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass
class CordTrack:
    """Cord centre for every axial slice.

    Attributes:
        centers: ``(nz, 2)`` array of (cx, cy) voxel coordinates.
        detected: ``(nz,)`` bool, True where the centre came from a detection.
    """

    centers: np.ndarray
    detected: np.ndarray
    slice_spacing_mm: float = 1.0

    def __len__(self):
        return len(self.centers)


def detection_stride(sz: float, spacing_mm: float = DETECTION_SPACING_MM) -> int:
    return max(1, math.ceil(spacing_mm / sz - 1e-9))


def interpolate_track(detections, nz: int, sz: float = 1.0) -> CordTrack:
    """Linear interpolation of detected centres over all ``nz`` slices.

    Outside the first/last detection the nearest detected centre is held.
    """
    detections = list(detections)
    if not detections:
        raise ValueError("need at least one detection")
    zs = np.array([d.slice_index for d in detections], dtype=np.float64)
    if np.any(np.diff(zs) <= 0):
        raise ValueError("detections must be sorted by strictly increasing slice index")
    cx = np.array([d.center[0] for d in detections], dtype=np.float64)
    cy = np.array([d.center[1] for d in detections], dtype=np.float64)
    z = np.arange(nz, dtype=np.float64)
    centers = np.stack([np.interp(z, zs, cx), np.interp(z, zs, cy)], axis=1)
    detected = np.zeros(nz, dtype=bool)
    detected[[int(s) for s in zs if 0 <= s < nz]] = True
    return CordTrack(centers, detected, sz)


# ------------------------------------------------------------------ model


@dataclass(frozen=True)
class DetectorConfig:
    grid: int = 7
    input_size: int = 56
    anchor: tuple = (7.0, 7.0)  # (w, h) in input pixels
    channels: tuple = (8, 16, 16)

    def __post_init__(self):
        if self.grid < 1:
            raise ValueError("grid must be >= 1")
        if self.input_size != self.grid * 2 ** len(self.channels):
            raise ValueError(f"input_size must equal grid * {2 ** len(self.channels)}")

    @property
    def cell(self) -> float:
        return self.input_size / self.grid


@dataclass
class DetectorParams:
    config: DetectorConfig = field(default_factory=DetectorConfig)
    params: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, config: DetectorConfig = DetectorConfig(), seed: int = 0, dtype=np.float32) -> "DetectorParams":
        rng = np.random.default_rng(seed)
        params, c_in = {}, 1
        for i, c_out in enumerate(config.channels, 1):
            params[f"conv{i}_w"] = nn.he_uniform(rng, (c_out, c_in, 3, 3, 1), c_in * 9, dtype)
            params[f"conv{i}_b"] = np.zeros(c_out, dtype=dtype)
            c_in = c_out
        params["head_w"] = nn.he_uniform(rng, (5, c_in, 1, 1, 1), c_in, dtype) * 0.1
        params["head_b"] = np.zeros(5, dtype=dtype)
        return cls(config, params, {"seed": str(seed)})

    @classmethod
    def zeros(cls, config: DetectorConfig = DetectorConfig()) -> "DetectorParams":
        p = cls.initial(config)
        return cls(config, {k: np.zeros_like(v) for k, v in p.params.items()})

    def save(self, path) -> None:
        c = self.config
        manifest = {
            "format_version": "1",
            "kind": "cord-detector",
            "grid": str(c.grid),
            "input_size": str(c.input_size),
            "anchor": ",".join(repr(float(a)) for a in c.anchor),
            "channels": ",".join(map(str, c.channels)),
        }
        manifest.update({f"meta.{k}": v for k, v in self.meta.items()})
        save_checkpoint(path, manifest, self.params)

    @classmethod
    def load(cls, path) -> "DetectorParams":
        m, tensors = load_checkpoint(path)
        if m.get("kind") != "cord-detector" or m.get("format_version") != "1":
            raise ValueError(f"{path}: not a cord-detector checkpoint")
        config = DetectorConfig(
            int(m["grid"]), int(m["input_size"]), tuple(float(a) for a in m["anchor"].split(",")),
            tuple(int(c) for c in m["channels"].split(",")),
        )
        expected = cls.initial(config).params
        if set(expected) != set(tensors) or any(expected[k].shape != tensors[k].shape for k in expected):
            raise ValueError(f"{path}: tensor shapes inconsistent with the declared architecture")
        meta = {k[5:]: v for k, v in m.items() if k.startswith("meta.")}
        return cls(config, tensors, meta)


def forward_raw(images, det: DetectorParams):
    """Raw grid predictions ``(N, S, S, 5)`` for ``(N, input, input)`` images, plus a backward cache."""
    p = det.params
    dtype = p["head_w"].dtype
    h = np.asarray(images, dtype=dtype)[:, None, :, :, None]
    caches = []
    for i in range(1, len(det.config.channels) + 1):
        h, cc = nn.conv3d(h, p[f"conv{i}_w"], p[f"conv{i}_b"], padding=(1, 1, 0))
        h, mask = nn.relu(h)
        h, pc = nn.maxpool3d(h, (2, 2, 1))
        caches.append((cc, mask, pc))
    out, hc = nn.conv3d(h, p["head_w"], p["head_b"])
    raw = out[..., 0].transpose(0, 2, 3, 1)
    return raw, (caches, hc)


def backward_raw(draw, cache, det: DetectorParams) -> dict:
    caches, hc = cache
    grads = {}
    dh = np.ascontiguousarray(draw.transpose(0, 3, 1, 2))[..., None]
    dh, grads["head_w"], grads["head_b"] = nn.conv3d_backward(dh, hc)
    for i in range(len(caches), 0, -1):
        cc, mask, pc = caches[i - 1]
        dh = nn.maxpool3d_backward(dh, pc)
        dh = nn.relu_backward(dh, mask)
        dh, grads[f"conv{i}_w"], grads[f"conv{i}_b"] = nn.conv3d_backward(dh, cc, need_input_grad=i > 1)
    return grads


def decode_cell(row: int, col: int, raw, config: DetectorConfig, scale=(1.0, 1.0)):
    """Box ``(cx, cy, w, h)`` in voxel units of the original slice for one cell's raw output.

    ``scale`` is (original width / input size, original height / input size).
    """
    tx, ty, tw, th = (float(v) for v in raw[:4])
    cell = config.cell
    ux = (col + float(nn.sigmoid(tx))) * cell * scale[0]
    uy = (row + float(nn.sigmoid(ty))) * cell * scale[1]
    w = config.anchor[0] * math.exp(tw) * scale[0]
    h = config.anchor[1] * math.exp(th) * scale[1]
    return ux - 0.5, uy - 0.5, w, h


def encode_box(cx, cy, w, h, config: DetectorConfig, scale=(1.0, 1.0)):
    """Inverse of :func:`decode_cell`: ``(row, col, [tx, ty, tw, th])`` for a box."""
    cell = config.cell
    gx = (cx + 0.5) / scale[0] / cell
    gy = (cy + 0.5) / scale[1] / cell
    col = min(max(int(math.floor(gx)), 0), config.grid - 1)
    row = min(max(int(math.floor(gy)), 0), config.grid - 1)
    fx = min(max(gx - col, 1e-6), 1 - 1e-6)
    fy = min(max(gy - row, 1e-6), 1 - 1e-6)
    t = [math.log(fx / (1 - fx)), math.log(fy / (1 - fy)),
         math.log(w / scale[0] / config.anchor[0]), math.log(h / scale[1] / config.anchor[1])]
    return row, col, np.array(t)


def _prepare(slice2d, config: DetectorConfig):
    img = np.asarray(slice2d, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D slice, got shape {img.shape}")
    n = config.input_size
    scale = (img.shape[1] / n, img.shape[0] / n)
    if img.shape != (n, n):
        img = resize_linear(img, (n, n))
    return img, scale


def _pick(raw, config, scale, slice_index):
    conf = nn.sigmoid(raw[..., 4].astype(np.float64))
    flat = int(np.argmax(conf))  # row-major first on ties
    row, col = divmod(flat, config.grid)
    cx, cy, w, h = decode_cell(row, col, raw[row, col], config, scale)
    return BoxDetection((cx, cy), (w, h), float(conf[row, col]), slice_index)


def detect_slice(slice2d, det: DetectorParams, slice_index: int = 0) -> BoxDetection:
    """Most confident box on one windowed axial slice."""
    img, scale = _prepare(slice2d, det.config)
    raw, _ = forward_raw(img[None], det)
    return _pick(raw[0], det.config, scale, slice_index)


def detect_slices(slices, det: DetectorParams, indices=None) -> list:
    slices = list(slices)
    if not slices:
        return []
    prepared = [_prepare(s, det.config) for s in slices]
    raw, _ = forward_raw(np.stack([p[0] for p in prepared]), det)
    indices = range(len(slices)) if indices is None else indices
    return [_pick(r, det.config, p[1], int(i)) for r, p, i in zip(raw, prepared, indices)]


def detect_track(volume: Volume, det: DetectorParams, window: WindowSpec = WindowSpec(),
                 spacing_mm: float = DETECTION_SPACING_MM) -> CordTrack:
    """Detect on every ``ceil(spacing_mm / sz)``-th axial slice and interpolate the rest."""
    nz = volume.shape[0]
    sz = volume.spacing[0]
    idx = list(range(0, nz, detection_stride(sz, spacing_mm)))
    windowed = apply_window(volume.data[idx], window)
    dets = detect_slices(windowed, det, idx)
    return interpolate_track(dets, nz, sz)


# --------------------------------------------------------------- training


@dataclass(frozen=True)
class DetectorTrainConfig:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 2e-3
    coord_weight: float = 5.0
    noobj_weight: float = 0.5
    seed: int = 0


def detector_loss(raw, targets, config: DetectorConfig, tc: DetectorTrainConfig):
    """Composite loss and its gradient w.r.t. ``raw``.

    ``targets`` holds ``(row, col, t)`` per image from :func:`encode_box`.
    Coordinates use squared error on sigmoid offsets and log sizes in the
    responsible cell; confidence uses BCE, with non-responsible cells
    weighted by ``noobj_weight`` and averaged.
    """
    n, s = raw.shape[0], config.grid
    draw = np.zeros_like(raw)
    total = 0.0
    conf_logit = raw[..., 4].astype(np.float64)
    conf = nn.sigmoid(conf_logit)
    eps = nn.EPS
    for b, (row, col, t) in enumerate(targets):
        r = raw[b, row, col].astype(np.float64)
        sx, sy = nn.sigmoid(r[0]), nn.sigmoid(r[1])
        fx, fy = nn.sigmoid(t[0]), nn.sigmoid(t[1])
        e = np.array([sx - fx, sy - fy, r[2] - t[2], r[3] - t[3]])
        total += tc.coord_weight * float(e @ e)
        g = 2 * tc.coord_weight * e
        draw[b, row, col, 0] = g[0] * sx * (1 - sx)
        draw[b, row, col, 1] = g[1] * sy * (1 - sy)
        draw[b, row, col, 2:4] = g[2:4]

        target = np.zeros((s, s))
        target[row, col] = 1.0
        weight = np.full((s, s), tc.noobj_weight / (s * s - 1) if s > 1 else 0.0)
        weight[row, col] = 1.0
        pc = np.clip(conf[b], eps, 1 - eps)
        total += float(np.sum(weight * -(target * np.log(pc) + (1 - target) * np.log1p(-pc))))
        draw[b, ..., 4] = weight * (conf[b] - target)
    return total / n, draw / n


def train_detector(images, boxes, det: DetectorParams | None = None, config: DetectorTrainConfig = DetectorTrainConfig(),
                   log=None) -> tuple[DetectorParams, list]:
    """Fit the detector on windowed slices with ground-truth boxes.

    Args:
        images: ``(N, h, w)`` windowed slices.
        boxes: ``(N, 4)`` rows of ``(cx, cy, w, h)`` in voxel units.

    Returns:
        ``(params, epoch_losses)``; ``epoch_losses[0]`` is the loss before
        any update.
    """
    images = list(images)
    if not images:
        raise ValueError("empty detector training set")
    det = DetectorParams.initial(seed=config.seed) if det is None else det
    cfg = det.config
    prepared = [_prepare(im, cfg) for im in images]
    x = np.stack([p[0] for p in prepared]).astype(det.params["head_w"].dtype)
    targets = [encode_box(*box, cfg, p[1]) for box, p in zip(boxes, prepared)]

    rng = np.random.default_rng(config.seed)
    state = nn.AdamState(lr=config.lr)

    def full_loss():
        total = 0.0
        for s in range(0, len(x), 64):
            raw, _ = forward_raw(x[s : s + 64], det)
            total += detector_loss(raw, targets[s : s + 64], cfg, config)[0] * len(raw)
        return total / len(x)

    history = [full_loss()]
    for epoch in range(config.epochs):
        order = rng.permutation(len(x))
        for s in range(0, len(order), config.batch_size):
            idx = order[s : s + config.batch_size]
            raw, cache = forward_raw(x[idx], det)
            _, draw = detector_loss(raw, [targets[i] for i in idx], cfg, config)
            grads = backward_raw(draw.astype(raw.dtype), cache, det)
            nn.adam_step(det.params, grads, state)
        history.append(full_loss())
        if log:
            log(f"detector epoch {epoch + 1}/{config.epochs} loss={history[-1]:.5f}")
    det.meta.update({"epochs": str(config.epochs), "seed": str(config.seed)})
    return det, history


def box_iou(a, b) -> float:
    """IoU of two ``(cx, cy, w, h)`` boxes."""
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def sample_training_slices(volumes_and_labels, n_slices: int, rng: np.random.Generator,
                           window: WindowSpec = WindowSpec()):
    """Draw ``n_slices`` random axial slices with their canal boxes.

    ``volumes_and_labels`` yields ``(volume, centerline, canal_radius_mm)``.
    Slices are spread round-robin over the given volumes.
    """
    pool = list(volumes_and_labels)
    images, boxes = [], []
    for i in range(n_slices):
        volume, centerline, radius = pool[i % len(pool)]
        z = int(rng.integers(volume.shape[0]))
        images.append(apply_window(volume.data[z], window))
        _, sy, sx = volume.spacing
        boxes.append((centerline[z, 0], centerline[z, 1], 2 * radius / sx, 2 * radius / sy))
    return np.stack(images), np.array(boxes)
