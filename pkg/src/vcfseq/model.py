"""Sequence-to-sequence fracture model over a patch sequence.

Three learned stages:

* ``f_rep``: patch -> feature vector. Three blocks of
  [conv3d, ReLU, conv3d, ReLU, maxpool 2], filters doubling from
  ``base_filters``, flattened and projected to ``feature_dim``. The patch's
  relative location is optionally appended.
* ``f_seq``: feature sequence -> per-patch fracture probabilities, either a
  per-item sigmoid head followed by a sliding max filter, or a (Bi)LSTM with
  a per-step sigmoid head.
* ``f_agg``: probabilities -> series score, a centred moving average with
  edge renormalisation followed by a max.

Training minimises ``BCE(y_series, f_agg(f_seq(Z))) + lambda * mean BCE(y_patch, f_seq(Z))``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields

import numpy as np

from . import nn
from .checkpoint import encode_checkpoint, load_checkpoint, save_checkpoint
from .nn import bce_loss, bce_loss_grad

SEQ_VARIANTS = ("max_prob", "max_prob_with_location", "lstm", "bilstm")
VARIANT_ALIASES = {"max": "max_prob", "maxloc": "max_prob_with_location", "lstm": "lstm", "bilstm": "bilstm"}
AGG_VARIANTS = ("smoothed_max",)
TTAS = ("identity", "flip_lr")
TTA_ALIASES = {"id": "identity", "identity": "identity", "flip": "flip_lr", "flip_lr": "flip_lr"}
N_BLOCKS = 3
CHECKPOINT_VERSION = "1"


@dataclass(frozen=True)
class ModelConfig:
    patch_size: tuple = (32, 32, 16)
    feature_dim: int = 64
    base_filters: int = 8
    seq_variant: str = "max_prob"
    agg_variant: str = "smoothed_max"
    smooth_width: int = 3
    max_filter_width: int = 3
    lambda_seq: float = 1.0
    use_location: bool = False
    lstm_hidden: int = 32

    def __post_init__(self):
        object.__setattr__(self, "patch_size", tuple(int(p) for p in self.patch_size))
        object.__setattr__(self, "seq_variant", VARIANT_ALIASES.get(self.seq_variant, self.seq_variant))
        if self.seq_variant not in SEQ_VARIANTS:
            raise ValueError(f"unknown seq_variant {self.seq_variant!r}")
        if self.agg_variant not in AGG_VARIANTS:
            raise ValueError(f"unknown agg_variant {self.agg_variant!r}")
        if len(self.patch_size) != 3 or any(p % 2**N_BLOCKS or p < 2**N_BLOCKS for p in self.patch_size):
            raise ValueError(f"patch dims must be positive multiples of {2**N_BLOCKS}, got {self.patch_size}")
        if self.feature_dim < 1 or self.base_filters < 1 or self.lstm_hidden < 1:
            raise ValueError("feature_dim, base_filters and lstm_hidden must be >= 1")
        for name in ("smooth_width", "max_filter_width"):
            w = getattr(self, name)
            if w < 1 or w % 2 == 0:
                raise ValueError(f"{name} must be odd and >= 1, got {w}")
        if self.lambda_seq < 0:
            raise ValueError("lambda_seq must be >= 0")

    @property
    def uses_location(self) -> bool:
        return self.use_location or self.seq_variant == "max_prob_with_location"

    @property
    def recurrent(self) -> bool:
        return self.seq_variant in ("lstm", "bilstm")

    @property
    def channels(self) -> list[int]:
        return [self.base_filters * 2**b for b in range(N_BLOCKS)]

    @property
    def flat_dim(self) -> int:
        cells = np.prod([p // 2**N_BLOCKS for p in self.patch_size])
        return int(cells) * self.channels[-1]

    def to_manifest(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = ",".join(map(str, v)) if isinstance(v, tuple) else str(v)
        return out

    @classmethod
    def from_manifest(cls, m: dict) -> "ModelConfig":
        kw = {}
        for f in fields(cls):
            if f.name not in m:
                continue
            text = m[f.name]
            default = f.default
            if isinstance(default, tuple):
                kw[f.name] = tuple(int(t) for t in text.split(","))
            elif isinstance(default, bool):
                kw[f.name] = text == "True"
            elif isinstance(default, int):
                kw[f.name] = int(text)
            elif isinstance(default, float):
                kw[f.name] = float(text)
            else:
                kw[f.name] = text
        return cls(**kw)


def conv_names():
    return [(b, l) for b in range(1, N_BLOCKS + 1) for l in (1, 2)]


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict:
    """He-uniform weights (LSTM: U(+-1/sqrt(H))), zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    params = {}
    c_in = 1
    for b, l in conv_names():
        c_out = config.channels[b - 1]
        params[f"conv{b}{l}_w"] = nn.he_uniform(rng, (c_out, c_in, 3, 3, 3), c_in * 27, dtype)
        params[f"conv{b}{l}_b"] = np.zeros(c_out, dtype=dtype)
        c_in = c_out
    params["proj_w"] = nn.he_uniform(rng, (config.feature_dim, config.flat_dim), config.flat_dim, dtype)
    params["proj_b"] = np.zeros(config.feature_dim, dtype=dtype)
    feat = config.feature_dim + int(config.uses_location)
    head_in = feat
    if config.recurrent:
        hidden = config.lstm_hidden
        bound = 1.0 / np.sqrt(hidden)
        cells = ["lstm"] + (["lstm_r"] if config.seq_variant == "bilstm" else [])
        for cell in cells:
            params[f"{cell}_w_x"] = rng.uniform(-bound, bound, (4 * hidden, feat)).astype(dtype)
            params[f"{cell}_w_h"] = rng.uniform(-bound, bound, (4 * hidden, hidden)).astype(dtype)
            params[f"{cell}_b"] = np.zeros(4 * hidden, dtype=dtype)
        head_in = hidden * len(cells)
    params["head_w"] = nn.he_uniform(rng, (1, head_in), head_in, dtype)
    params["head_b"] = np.zeros(1, dtype=dtype)
    return params


def param_shapes(config: ModelConfig) -> dict:
    return {k: v.shape for k, v in init_params(config, 0).items()}


# ---------------------------------------------------------------- f_rep


def f_rep_forward(patches, params, config: ModelConfig, locations=None):
    """Batched patch encoder. ``patches`` is ``(N, pH, pW, pZ)``; returns ``(features, cache)``."""
    patches = np.asarray(patches)
    if patches.shape[1:] != config.patch_size:
        raise ValueError(f"patch shape {patches.shape[1:]} != configured {config.patch_size}")
    dtype = params["proj_w"].dtype
    h = patches.astype(dtype, copy=False)[:, None]
    caches = []
    for b in range(1, N_BLOCKS + 1):
        block = []
        for l in (1, 2):
            h, cc = nn.conv3d(h, params[f"conv{b}{l}_w"], params[f"conv{b}{l}_b"], padding=1)
            h, mask = nn.relu(h)
            block.append((cc, mask))
        h, pc = nn.maxpool3d(h, 2)
        caches.append((block, pc))
    pooled_shape = h.shape
    z, dc = nn.dense(h.reshape(len(h), -1), params["proj_w"], params["proj_b"])
    if config.uses_location:
        if locations is None:
            raise ValueError("this configuration needs patch locations")
        z = np.concatenate([z, np.asarray(locations, dtype=dtype).reshape(-1, 1)], axis=1)
    return z, (caches, pooled_shape, dc)


def f_rep_backward(dfeat, cache, params, config: ModelConfig, grads: dict):
    caches, pooled_shape, dc = cache
    dz = dfeat[:, : config.feature_dim]
    dflat, grads["proj_w"], grads["proj_b"] = nn.dense_backward(np.ascontiguousarray(dz), dc)
    dh = dflat.reshape(pooled_shape)
    for b in range(N_BLOCKS, 0, -1):
        block, pc = caches[b - 1]
        dh = nn.maxpool3d_backward(dh, pc)
        for l in (2, 1):
            cc, mask = block[l - 1]
            dh = nn.relu_backward(dh, mask)
            first = b == 1 and l == 1
            dh, grads[f"conv{b}{l}_w"], grads[f"conv{b}{l}_b"] = nn.conv3d_backward(dh, cc, need_input_grad=not first)
    return grads


def f_rep(patch, params, config: ModelConfig, location=None) -> np.ndarray:
    """Feature vector of one ``(pH, pW, pZ)`` patch (location appended if configured)."""
    loc = None if location is None else [location]
    z, _ = f_rep_forward(np.asarray(patch)[None], params, config, loc)
    return z[0]


# ---------------------------------------------------------------- f_seq


def sliding_max(values, width: int):
    """Centred, edge-clipped sliding max. Returns ``(maxima, source_index)``; ties go to the lower index."""
    values = np.asarray(values)
    k, r = len(values), width // 2
    idx = np.empty(k, dtype=np.int64)
    for i in range(k):
        lo, hi = max(0, i - r), min(k, i + r + 1)
        idx[i] = lo + int(np.argmax(values[lo:hi]))
    return values[idx], idx


def moving_average(values, width: int) -> np.ndarray:
    """Centred moving average, renormalised by the number of in-range neighbours."""
    values = np.asarray(values)
    k, r = len(values), width // 2
    csum = np.concatenate([[0.0], np.cumsum(values, dtype=np.float64)])
    lo = np.maximum(np.arange(k) - r, 0)
    hi = np.minimum(np.arange(k) + r + 1, k)
    return ((csum[hi] - csum[lo]) / (hi - lo)).astype(values.dtype, copy=False)


def f_seq_forward(feats, params, config: ModelConfig):
    feats = np.asarray(feats)
    if feats.ndim != 2 or len(feats) < 1:
        raise ValueError(f"f_seq expects a (k, F) sequence with k >= 1, got {feats.shape}")
    if config.recurrent:
        direction = "bidirectional" if config.seq_variant == "bilstm" else "forward"
        cell = {k[5:]: v for k, v in params.items() if k.startswith("lstm_") and not k.startswith("lstm_r_")}
        rcell = {k[7:]: v for k, v in params.items() if k.startswith("lstm_r_")} or None
        hs, lc = nn.lstm_sequence(feats, cell, direction, rcell)
        logits, hc = nn.dense(hs, params["head_w"], params["head_b"])
        p = nn.sigmoid(logits[:, 0])
        return p, ("rnn", lc, hc, p)
    if config.seq_variant not in ("max_prob", "max_prob_with_location"):
        raise ValueError(f"unknown seq_variant {config.seq_variant!r}")
    logits, hc = nn.dense(feats, params["head_w"], params["head_b"])
    s = nn.sigmoid(logits[:, 0])
    p, idx = sliding_max(s, config.max_filter_width)
    return p, ("max", hc, s, idx)


def f_seq_backward(dp, cache, grads: dict):
    if cache[0] == "rnn":
        _, lc, hc, p = cache
        dlogits = (dp * p * (1 - p))[:, None]
        dhs, dw, db = nn.dense_backward(dlogits, hc)
        _accumulate(grads, {"head_w": dw, "head_b": db})
        dfeat, cell_grads = nn.lstm_sequence_backward(dhs, lc)
        for prefix, g in zip(("lstm", "lstm_r"), cell_grads):
            _accumulate(grads, {f"{prefix}_{k}": v for k, v in g.items()})
        return dfeat
    _, hc, s, idx = cache
    ds = np.zeros_like(s)
    np.add.at(ds, idx, dp)
    dlogits = (ds * s * (1 - s))[:, None]
    dfeat, dw, db = nn.dense_backward(dlogits, hc)
    _accumulate(grads, {"head_w": dw, "head_b": db})
    return dfeat


def _accumulate(grads: dict, new: dict):
    for k, v in new.items():
        if k in grads:
            grads[k] = grads[k] + v
        else:
            grads[k] = v


def f_seq(feats, params, config: ModelConfig) -> np.ndarray:
    """Per-item fracture probabilities for one ``(k, F)`` feature sequence."""
    return f_seq_forward(feats, params, config)[0]


# ---------------------------------------------------------------- f_agg


def f_agg(probs, width: int = 3):
    """Series score: max of the edge-renormalised moving average."""
    if width < 1 or width % 2 == 0:
        raise ValueError(f"smoothing width must be odd and >= 1, got {width}")
    smoothed = moving_average(np.asarray(probs), width)
    j = int(np.argmax(smoothed))
    return smoothed[j], smoothed, j


def f_agg_backward(dscore, k: int, width: int, j: int, dtype):
    r = width // 2
    lo, hi = max(0, j - r), min(k, j + r + 1)
    dp = np.zeros(k, dtype=dtype)
    dp[lo:hi] = dscore / (hi - lo)
    return dp


# ----------------------------------------------------------------- loss


def total_loss(y_agg, y_seq, feats, params, config: ModelConfig, lam=None) -> float:
    """Composite loss for one series given its feature sequence ``Z``."""
    lam = config.lambda_seq if lam is None else lam
    p = f_seq(feats, params, config)
    score, _, _ = f_agg(p, config.smooth_width)
    return bce_loss(score, y_agg) + lam * bce_loss(p, y_seq)


def loss_and_grads(params, config: ModelConfig, patches_list, locations_list, y_agg, y_seq_list, lam=None,
                   return_pattern=False):
    """Mean composite loss over a batch of series and its gradient.

    Args:
        patches_list: per-series ``(k_s, pH, pW, pZ)`` arrays.
        locations_list: per-series ``(k_s,)`` locations.
        y_agg: per-series labels.
        y_seq_list: per-series ``(k_s,)`` patch labels.

    Returns:
        ``(loss, grads, outputs)`` with ``outputs`` the per-series
        ``(probs, score)`` pairs. With ``return_pattern`` a digest of every
        discrete branch taken (ReLU masks, pool and max-filter choices) is
        appended, for use with :func:`vcfseq.nn.grad_check`.
    """
    lam = config.lambda_seq if lam is None else lam
    sizes = [len(p) for p in patches_list]
    batch = len(sizes)
    patches = np.concatenate(patches_list, axis=0)
    locs = np.concatenate([np.asarray(l, dtype=np.float64) for l in locations_list])
    feats, rep_cache = f_rep_forward(patches, params, config, locs)
    dtype = feats.dtype

    grads: dict = {}
    dfeat = np.zeros_like(feats)
    total, outputs, offset = 0.0, [], 0
    branches = []
    for s, k in enumerate(sizes):
        f = feats[offset : offset + k]
        p, sc = f_seq_forward(f, params, config)
        score, _, j = f_agg(p, config.smooth_width)
        branches.append((j, sc[3].tobytes() if sc[0] == "max" else b""))
        y_seq = np.asarray(y_seq_list[s], dtype=dtype)
        total += bce_loss(score, y_agg[s]) + lam * bce_loss(p, y_seq)
        outputs.append((p, float(score)))

        dscore = bce_loss_grad(np.array([score], dtype=dtype), np.array([y_agg[s]], dtype=dtype))[0] / batch
        dp = f_agg_backward(dscore, k, config.smooth_width, j, dtype)
        dp = dp + lam * bce_loss_grad(p, y_seq) / batch
        dfeat[offset : offset + k] = f_seq_backward(dp.astype(dtype, copy=False), sc, grads)
        offset += k
    f_rep_backward(dfeat, rep_cache, params, config, grads)
    for name, arr in params.items():
        if name not in grads:
            grads[name] = np.zeros_like(arr)
        else:
            grads[name] = grads[name].astype(arr.dtype, copy=False)
    if return_pattern:
        return total / batch, grads, outputs, (_rep_pattern(rep_cache), tuple(branches))
    return total / batch, grads, outputs


def _rep_pattern(rep_cache) -> str:
    digest = hashlib.sha1()
    for block, pc in rep_cache[0]:
        for _, mask in block:
            digest.update(np.packbits(mask).tobytes())
        digest.update(pc.argmax.tobytes())
    return digest.hexdigest()


# ----------------------------------------------------------- checkpoint


@dataclass
class Checkpoint:
    config: ModelConfig
    params: dict
    meta: dict = field(default_factory=dict)

    @classmethod
    def initial(cls, config: ModelConfig, seed: int = 0, dtype=np.float32) -> "Checkpoint":
        return cls(config, init_params(config, seed, dtype), {"seed": str(seed)})

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.config, {k: v.copy() for k, v in self.params.items()}, dict(self.meta))

    def astype(self, dtype) -> "Checkpoint":
        return Checkpoint(self.config, {k: v.astype(dtype) for k, v in self.params.items()}, dict(self.meta))

    def to_bytes(self) -> bytes:
        return encode_checkpoint(self._manifest(), self.params)

    def _manifest(self) -> dict:
        manifest = {"format_version": CHECKPOINT_VERSION, "kind": "vcf-model"}
        manifest.update(self.config.to_manifest())
        manifest.update({f"meta.{k}": v for k, v in self.meta.items()})
        return manifest

    def save(self, path) -> None:
        save_checkpoint(path, self._manifest(), self.params)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        manifest, tensors = load_checkpoint(path)
        if manifest.get("format_version") != CHECKPOINT_VERSION or manifest.get("kind") != "vcf-model":
            raise ValueError(f"{path}: unsupported checkpoint ({manifest.get('kind')}, v{manifest.get('format_version')})")
        config = ModelConfig.from_manifest(manifest)
        expected = param_shapes(config)
        if set(expected) != set(tensors) or any(tensors[k].shape != expected[k] for k in expected):
            raise ValueError(f"{path}: tensor shapes do not match the stored configuration")
        meta = {k[5:]: v for k, v in manifest.items() if k.startswith("meta.")}
        return cls(config, {k: tensors[k] for k in expected}, meta)


# ------------------------------------------------------------ inference


@dataclass
class SeriesPrediction:
    """Model output for one series.

    ``box`` is ``(row0, row1, col0, col1)``, half-open, on the mid-sagittal
    slice (rows run down the spine, columns anterior to posterior), clipped
    to the slice; ``None`` when the sequence carries no source coordinates.
    """

    per_patch_probs: np.ndarray
    smoothed_probs: np.ndarray
    series_score: float
    argmax_patch: int
    box: tuple | None = None
    mid_x: int | None = None  # sagittal plane the box refers to


def apply_tta(patches, tta: str):
    tta = TTA_ALIASES.get(tta, tta)
    if tta == "identity":
        return patches
    if tta == "flip_lr":
        return patches[..., ::-1]
    raise ValueError(f"unknown TTA {tta!r}")


def _features_chunked(patches, locations, params, config, chunk=64):
    out = []
    for s in range(0, len(patches), chunk):
        z, _ = f_rep_forward(patches[s : s + chunk], params, config, None if locations is None else locations[s : s + chunk])
        out.append(z)
    return np.concatenate(out, axis=0)


def predict_series(patchseq, checkpoint: Checkpoint, tta: str = "identity", sagittal_shape=None) -> SeriesPrediction:
    """Score a patch sequence and localise the most suspicious patch.

    ``sagittal_shape`` is the ``(rows, cols)`` size of the mid-sagittal
    slice used to clip the localisation box.
    """
    config = checkpoint.config
    patches = np.asarray(patchseq.patches)
    if patches.shape[1:] != config.patch_size:
        raise ValueError(f"patch shape {patches.shape[1:]} does not match model {config.patch_size}")
    patches = apply_tta(patches, tta)
    feats = _features_chunked(patches, patchseq.locations, checkpoint.params, config)
    p, _ = f_seq_forward(feats, checkpoint.params, config)
    score, smoothed, j = f_agg(p, config.smooth_width)
    box = None
    if getattr(patchseq, "sources", None) is not None:
        (z0, z1), (y0, y1), _ = patchseq.sources[j]
        if sagittal_shape is not None:
            rows, cols = sagittal_shape
            z0, z1 = max(0, z0), min(rows, z1)
            y0, y1 = max(0, y0), min(cols, y1)
        box = (int(z0), int(z1), int(y0), int(y1))
    return SeriesPrediction(p, smoothed, float(score), j, box, getattr(patchseq, "mid_x", None))


def ensemble_member_scores(patchseq, checkpoints, ttas=None) -> list[float]:
    if not checkpoints:
        raise ValueError("ensemble needs at least one checkpoint")
    ttas = ["identity"] if ttas is None else list(ttas)
    if len(ttas) == 1:
        ttas = ttas * len(checkpoints)
    if len(ttas) != len(checkpoints):
        raise ValueError(f"{len(checkpoints)} checkpoints but {len(ttas)} TTAs")
    return [predict_series(patchseq, ck, tta).series_score for ck, tta in zip(checkpoints, ttas)]


def ensemble_predict(patchseq, checkpoints, ttas=None) -> float:
    """Mean series score over (model, TTA) pairs, one TTA per model."""
    scores = ensemble_member_scores(patchseq, checkpoints, ttas)
    return float(sum(scores) / len(scores))
