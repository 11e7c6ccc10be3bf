"""Shared fixtures-by-function for the model and acceptance tests."""

import numpy as np

from vcfseq import nn
from vcfseq.model import ModelConfig, init_params, loss_and_grads

TINY = dict(patch_size=(8, 8, 8), feature_dim=4, base_filters=2, lstm_hidden=3)


def tiny_config(variant="max_prob", **kw):
    return ModelConfig(seq_variant=variant, **{**TINY, **kw})


def model_grad_error(variant, k, probes=100, seed=0, lam=0.7):
    """Max relative finite-difference error of the full composite loss (float64)."""
    config = tiny_config(variant, max_filter_width=3, smooth_width=3)
    rng = np.random.default_rng(seed)
    params = init_params(config, seed, dtype=np.float64)
    for v in params.values():
        v += 0.05 * rng.standard_normal(v.shape)  # nonzero biases, no exact ties
    patches = [rng.random((k, *config.patch_size)), rng.random((k, *config.patch_size))]
    locs = [np.linspace(0.1, 0.9, k)] * 2
    y_seq = [rng.integers(0, 2, k).astype(float), np.zeros(k)]

    def fn(p):
        loss, grads, _, pattern = loss_and_grads(p, config, patches, locs, [1, 0], y_seq, lam, return_pattern=True)
        return loss, grads, pattern

    return nn.grad_check(fn, params, probes=probes, rng=np.random.default_rng(seed + 1))
