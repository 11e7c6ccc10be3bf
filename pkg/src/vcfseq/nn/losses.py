"""Binary cross-entropy on probabilities."""

import numpy as np

EPS = 1e-7


def bce_loss(p, y, eps=EPS):
    """Mean binary cross-entropy of probabilities ``p`` against targets ``y``.

    ``p`` is clamped to ``[eps, 1 - eps]`` first, so a perfect prediction costs
    ``-log(1 - eps)`` rather than zero. Targets may be hard or soft.
    """
    p = np.asarray(p)
    if not np.issubdtype(p.dtype, np.floating):
        p = p.astype(np.float64)
    p = np.clip(p, eps, 1 - eps)
    y = np.asarray(y, dtype=p.dtype)
    return float(np.mean(-(y * np.log(p) + (1 - y) * np.log1p(-p))))


def bce_loss_grad(p, y, eps=EPS):
    """d(mean BCE)/dp. Zero where the clamp is active."""
    p = np.asarray(p)
    y = np.asarray(y, dtype=p.dtype)
    pc = np.clip(p, eps, 1 - eps)
    g = (-(y / pc) + (1 - y) / (1 - pc)) / p.size
    return np.where((p >= eps) & (p <= 1 - eps), g, 0).astype(p.dtype, copy=False)
