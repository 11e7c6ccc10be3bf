"""Finite-difference gradient checking with central stencils."""

from __future__ import annotations

from typing import Callable

import numpy as np


def grad_check(fn: Callable, params: dict, probes: int = 100, h: float = 1e-3, rng=None, floor: float = 1e-8,
               return_details: bool = False, five_point: bool = True):
    """Compare analytic gradients with central differences at random coordinates.

    Args:
        fn: ``fn(params) -> (value, grads)`` or ``(value, grads, pattern)``.
            ``grads`` maps parameter names to arrays shaped like ``params``.
            ``pattern`` is any comparable summary of the piecewise-linear
            branch taken (ReLU masks, pooling argmaxes, ...). When given, a
            probe whose ``+h`` or ``-h`` evaluation lands on a different branch
            straddles a kink, where finite differences are meaningless; such
            probes are redrawn.
        params: dict of float64 arrays. Perturbed in place, always restored.
        probes: number of coordinates to compare, drawn over all parameters
            in proportion to their size.
        h: finite-difference step.
        five_point: use the fourth-order stencil
            ``(-f(+2h) + 8f(+h) - 8f(-h) + f(-2h)) / 12h``. Its truncation
            error is small enough to allow a larger ``h``, which keeps the
            rounding noise well below small gradients.

    Returns:
        Maximum of ``(|analytic - numeric| - noise) / max(|analytic|, |numeric|, floor)``,
        where ``noise = 16 eps max(|f|, 1) / h`` bounds the rounding error of
        the difference quotient;
        with ``return_details`` also the number of kink-straddling probes
        that were redrawn.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    base = fn(params)
    grads = base[1]
    pattern = base[2] if len(base) > 2 else None
    names = sorted(params)
    sizes = np.array([params[n].size for n in names])
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst, done, skipped = 0.0, 0, 0
    while done < probes:
        if skipped > 10 * probes:
            raise RuntimeError(f"gave up: {skipped} probes straddled a kink")
        flat = int(rng.integers(sizes.sum()))
        which = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = names[which]
        idx = np.unravel_index(flat - offsets[which], params[name].shape)
        arr = params[name]
        orig = arr[idx]
        steps = (2, 1, -1, -2) if five_point else (1, -1)
        evals = []
        for m in steps:
            arr[idx] = orig + m * h
            evals.append(fn(params))
        arr[idx] = orig
        if pattern is not None and any(e[2] != pattern for e in evals):
            skipped += 1
            continue
        if five_point:
            numeric = (-evals[0][0] + 8 * evals[1][0] - 8 * evals[2][0] + evals[3][0]) / (12 * h)
        else:
            numeric = (evals[0][0] - evals[1][0]) / (2 * h)
        analytic = float(grads[name][idx])
        # differences below the stencil's rounding bound are unresolvable
        scale = max(max(abs(float(e[0])) for e in evals), 1.0)
        noise = 16 * np.finfo(np.float64).eps * scale / h
        err = max(abs(analytic - numeric) - noise, 0.0) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, err)
        done += 1
    return (worst, skipped) if return_details else worst
