import numpy as np
import pytest
from helpers import model_grad_error, tiny_config

from vcfseq.model import (
    Checkpoint,
    ModelConfig,
    ensemble_predict,
    f_agg,
    f_rep,
    f_rep_forward,
    f_seq,
    init_params,
    predict_series,
    total_loss,
)
from vcfseq.nn import bce_loss, sigmoid
from vcfseq.representation import PatchSequence

VARIANTS = ("max_prob", "max_prob_with_location", "lstm", "bilstm")


def zero_params(config):
    return {k: np.zeros_like(v) for k, v in init_params(config).items()}


# -------------------------------------------------------------- config


def test_default_channels_and_pooled_shape():
    config = ModelConfig()
    assert config.channels == [8, 16, 32]
    assert config.flat_dim == 4 * 4 * 2 * 32
    z, cache = f_rep_forward(np.zeros((1, 32, 32, 16), np.float32), init_params(config), config)
    assert cache[1] == (1, 32, 4, 4, 2)
    assert z.shape == (1, 64)


@pytest.mark.parametrize("kw", [dict(feature_dim=0), dict(smooth_width=2), dict(lambda_seq=-1.0),
                                dict(seq_variant="gru"), dict(patch_size=(12, 16, 16))])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_variant_aliases():
    assert ModelConfig(seq_variant="max").seq_variant == "max_prob"
    assert ModelConfig(seq_variant="maxloc").uses_location


# --------------------------------------------------------------- f_rep


def test_zero_weights_give_bias_constant():
    config = tiny_config()
    params = zero_params(config)
    params["proj_b"][:] = [0.5, -1.0, 2.0, 0.0]
    rng = np.random.default_rng(0)
    a = f_rep(rng.random(config.patch_size), params, config)
    b = f_rep(rng.random(config.patch_size), params, config)
    np.testing.assert_array_equal(a, params["proj_b"])
    np.testing.assert_array_equal(a, b)


def test_location_appended():
    config = tiny_config("max_prob_with_location")
    z = f_rep(np.zeros(config.patch_size), init_params(config), config, location=0.25)
    assert z.shape == (5,)
    assert z[-1] == 0.25
    with pytest.raises(ValueError):
        f_rep(np.zeros(config.patch_size), init_params(config), config)


def test_patch_shape_checked():
    config = tiny_config()
    with pytest.raises(ValueError):
        f_rep(np.zeros((8, 8, 16)), init_params(config), config)


# --------------------------------------------------------------- f_seq


def head_only(feats, params):
    return sigmoid(feats @ params["head_w"][0] + params["head_b"][0])


def test_max_filter_example():
    config = tiny_config(max_filter_width=3)
    params = zero_params(config)
    params["head_w"][0, 0] = 1.0
    scores = np.array([0.1, 0.9, 0.2, 0.3])
    feats = np.zeros((4, 4))
    feats[:, 0] = np.log(scores / (1 - scores))
    np.testing.assert_allclose(f_seq(feats, params, config), [0.9, 0.9, 0.9, 0.3], atol=1e-6)


@pytest.mark.parametrize("variant", ["max_prob", "max_prob_with_location"])
def test_single_item_is_head_score(variant):
    config = tiny_config(variant)
    params = init_params(config, 3, np.float64)
    feats = np.random.default_rng(1).standard_normal((1, config.feature_dim + config.uses_location))
    np.testing.assert_allclose(f_seq(feats, params, config), head_only(feats, params), atol=1e-12)


def test_lstm_single_item_matches_manual_step():
    config = tiny_config("lstm")
    params = init_params(config, 3, np.float64)
    x = np.random.default_rng(2).standard_normal(4)
    a = params["lstm_w_x"] @ x + params["lstm_b"]
    H = config.lstm_hidden
    c = sigmoid(a[:H]) * np.tanh(a[2 * H : 3 * H])
    h = sigmoid(a[3 * H :]) * np.tanh(c)
    expected = sigmoid(params["head_w"][0] @ h + params["head_b"][0])
    np.testing.assert_allclose(f_seq(x[None], params, config), [expected], atol=1e-12)


def test_lstm_without_recurrence_is_itemwise():
    config = tiny_config("lstm")
    params = init_params(config, 5, np.float64)
    params["lstm_w_h"][:] = 0
    # forget gate pinned shut so the cell state does not carry over either
    params["lstm_b"][config.lstm_hidden : 2 * config.lstm_hidden] = -1e3
    feats = np.random.default_rng(6).standard_normal((5, 4))
    full = f_seq(feats, params, config)
    single = [f_seq(f[None], params, config)[0] for f in feats]
    np.testing.assert_allclose(full, single, atol=1e-12)


def test_bilstm_reverse_direction_sees_future():
    config = tiny_config("bilstm")
    params = init_params(config, 2, np.float64)
    feats = np.random.default_rng(3).standard_normal((4, 4))
    base = f_seq(feats, params, config)
    feats2 = feats.copy()
    feats2[3] += 1.0
    assert not np.allclose(f_seq(feats2, params, config)[0], base[0])


def test_f_seq_rejects_empty():
    config = tiny_config()
    with pytest.raises(ValueError):
        f_seq(np.zeros((0, 4)), init_params(config), config)


# --------------------------------------------------------------- f_agg


def test_agg_examples():
    score, smoothed, j = f_agg(np.array([0.0, 1.0, 0.0]), 3)
    np.testing.assert_allclose(smoothed, [0.5, 1 / 3, 0.5])
    assert score == 0.5 and j == 0
    assert f_agg(np.array([0.2, 0.7, 0.1]), 1)[0] == 0.7
    for w in (1, 3, 5, 9):
        assert f_agg(np.full(6, 0.37), w)[0] == pytest.approx(0.37, abs=1e-15)
    with pytest.raises(ValueError):
        f_agg(np.ones(3), 2)


def test_agg_bounds_and_monotone():
    rng = np.random.default_rng(0)
    for _ in range(500):
        k = int(rng.integers(1, 12))
        w = int(rng.choice([1, 3, 5, 7]))
        p = rng.random(k)
        s = f_agg(p, w)[0]
        assert p.min() - 1e-15 <= s <= p.max() + 1e-15
        q = p.copy()
        q[rng.integers(k)] += rng.random() * (1 - q.max())
        assert f_agg(q, w)[0] >= s - 1e-15


# ---------------------------------------------------------------- loss


def test_lambda_zero_is_series_bce():
    config = tiny_config()
    params = init_params(config, 1, np.float64)
    feats = np.random.default_rng(0).standard_normal((5, 4))
    p = f_seq(feats, params, config)
    expected = bce_loss(f_agg(p, config.smooth_width)[0], 1)
    assert total_loss(1, np.ones(5), feats, params, config, lam=0.0) == pytest.approx(expected, rel=1e-12)


def test_perfect_predictions_tiny_loss():
    config = tiny_config()
    params = zero_params(config)
    params = {k: v.astype(np.float64) for k, v in params.items()}
    params["head_b"][0] = 40.0
    assert total_loss(1, np.ones(3), np.zeros((3, 4)), params, config) <= 2.1e-7


@pytest.mark.parametrize("variant", VARIANTS)
@pytest.mark.parametrize("k", [1, 3, 7])
def test_total_loss_gradients(variant, k):
    assert model_grad_error(variant, k, probes=100) < 1e-4


# ------------------------------------------------------------ inference


def sequence(config, k=4, seed=0):
    rng = np.random.default_rng(seed)
    patches = rng.random((k, *config.patch_size)).astype(np.float32)
    starts = [10 * i for i in range(k)]
    sources = np.array([[[s, s + 8], [2, 10], [0, 8]] for s in starts])
    return PatchSequence(patches, np.linspace(0.1, 0.9, k), sources=sources, mid_x=4)


def test_untrained_model_ties_to_patch_zero():
    config = tiny_config()
    ck = Checkpoint(config, zero_params(config))
    pred = predict_series(sequence(config), ck)
    assert np.all(pred.per_patch_probs == 0.5)
    assert pred.argmax_patch == 0
    assert pred.box == (0, 8, 2, 10)
    assert pred.mid_x == 4


def test_box_clipped_to_slice():
    config = tiny_config()
    ck = Checkpoint(config, zero_params(config))
    pred = predict_series(sequence(config), ck, sagittal_shape=(6, 9))
    assert pred.box == (0, 6, 2, 9)


def test_prediction_consistency():
    config = tiny_config()
    ck = Checkpoint.initial(config, 4)
    pred = predict_series(sequence(config, 6), ck)
    assert pred.series_score == pytest.approx(pred.smoothed_probs.max())
    assert pred.argmax_patch == int(np.argmax(pred.smoothed_probs))
    assert np.all((pred.per_patch_probs >= 0) & (pred.per_patch_probs <= 1))
    assert predict_series(sequence(config, 6), ck).argmax_patch == pred.argmax_patch


@pytest.mark.parametrize("variant", ["max_prob", "max_prob_with_location"])
def test_permutation_invariance_of_max_variants(variant):
    config = tiny_config(variant, max_filter_width=1)
    ck = Checkpoint.initial(config, 1, np.float64)
    seq = sequence(config, 5)
    perm = np.array([3, 0, 4, 1, 2])
    shuffled = PatchSequence(seq.patches[perm], seq.locations[perm])
    p = predict_series(seq, ck).per_patch_probs
    q = predict_series(shuffled, ck).per_patch_probs
    unperm = np.empty_like(q)
    unperm[perm] = q
    np.testing.assert_array_equal(unperm, p)


def test_ensemble_examples():
    config = tiny_config()
    seq = sequence(config)
    ck = Checkpoint.initial(config, 2)
    single = predict_series(seq, ck).series_score
    assert ensemble_predict(seq, [ck, ck, ck], ["identity"]) == single
    lo, hi = (Checkpoint(config, zero_params(config)) for _ in range(2))
    lo.params["head_b"][0] = np.log(0.2 / 0.8)
    hi.params["head_b"][0] = np.log(0.8 / 0.2)
    assert ensemble_predict(seq, [lo, hi]) == pytest.approx(0.5, abs=1e-7)
    with pytest.raises(ValueError):
        ensemble_predict(seq, [])


def test_ensemble_within_member_bounds():
    config = tiny_config()
    seq = sequence(config, 5, seed=4)
    cks = [Checkpoint.initial(config, s) for s in range(4)]
    members = [predict_series(seq, c).series_score for c in cks]
    score = ensemble_predict(seq, cks)
    assert min(members) <= score <= max(members)


def test_flip_tta_on_mirror_symmetric_sequence():
    config = tiny_config()
    ck = Checkpoint.initial(config, 7)
    seq = sequence(config, 4)
    sym = (seq.patches + seq.patches[..., ::-1]) / 2
    seq = PatchSequence(sym, seq.locations)
    a = predict_series(seq, ck, "identity").series_score
    b = predict_series(seq, ck, "flip_lr").series_score
    assert abs(a - b) < 1e-6


@pytest.mark.parametrize("variant", VARIANTS)
def test_checkpoint_roundtrip(tmp_path, variant):
    config = tiny_config(variant)
    ck = Checkpoint.initial(config, 9)
    ck.meta["tune_auc"] = "0.5"
    ck.save(tmp_path / "m.ckpt")
    back = Checkpoint.load(tmp_path / "m.ckpt")
    assert back.config == config
    assert back.meta == ck.meta
    seq = sequence(config)
    a, b = predict_series(seq, ck), predict_series(seq, back)
    assert a.per_patch_probs.tobytes() == b.per_patch_probs.tobytes()
    assert back.to_bytes() == ck.to_bytes()


def test_checkpoint_shape_mismatch(tmp_path):
    ck = Checkpoint.initial(tiny_config())
    ck.params["head_w"] = np.zeros((1, 9), np.float32)
    ck.save(tmp_path / "bad.ckpt")
    with pytest.raises(ValueError):
        Checkpoint.load(tmp_path / "bad.ckpt")
