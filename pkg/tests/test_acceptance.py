"""Acceptance criteria 1-9, one PASS/FAIL line each (also listed in the terminal summary)."""

import math
import time

import numpy as np
import pytest
from conftest import ACCEPTANCE_LINES
from helpers import model_grad_error
from oracles import naive_conv3d, naive_maxpool3d, pairwise_auc, scalar_lstm

import golden_cases as gc
from vcfseq import nn
from vcfseq.detector import (
    DetectorParams,
    DetectorTrainConfig,
    box_iou,
    detect_slices,
    sample_training_slices,
    train_detector,
)
from vcfseq.experiment import EXPERIMENT_VARIANTS, REFERENCE_TUNE_AUC, evaluate, run_aggregation_experiment, select_ensemble
from vcfseq.metrics import roc_auc
from vcfseq.model import Checkpoint, ModelConfig, predict_series
from vcfseq.phantom import read_centerline
from vcfseq.pipeline import DESK_PREP, PrepConfig, load_items, prepare_volume
from vcfseq.representation import fourier_resample, tile_starts
from vcfseq.training import DESK_SCHEDULE, TrainConfig, train
from vcfseq.volume import Volume, decode_volume, encode_volume, load_volume

CLINICAL_SECONDS_PER_CASE = 61.36  # full clinical pipeline, reference only


def report(n, ok, detail):
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def lstm_params(r, d, h):
    return {"w_x": r.standard_normal((4 * h, d)) * 0.5, "w_h": r.standard_normal((4 * h, h)) * 0.5,
            "b": r.standard_normal(4 * h) * 0.5}


# ------------------------------------------------------------------------ 1


def layer_checks(r):
    """``(name, fn, params)`` for every layer type, float64."""
    checks = []

    g_conv = {}
    def conv(p):
        out, cc = nn.conv3d(p["x"], p["w"], p["b"], stride=p.get("stride", 1), padding=1)
        g = g_conv.setdefault(out.shape, r.standard_normal(out.shape))
        dx, dw, db = nn.conv3d_backward(g, cc)
        return float((out * g).sum()), {"x": dx, "w": dw, "b": db}
    checks.append(("conv3d", conv, {"x": r.standard_normal((2, 2, 5, 4, 3)), "w": r.standard_normal((3, 2, 3, 3, 3)),
                                    "b": r.standard_normal(3)}))

    g_pool = {}
    def pool(p):
        out, pc = nn.maxpool3d(p["x"], 2)
        g = g_pool.setdefault(out.shape, r.standard_normal(out.shape))
        return float((out * g).sum()), {"x": nn.maxpool3d_backward(g, pc)}, pc.argmax.tobytes()
    checks.append(("maxpool3d", pool, {"x": r.standard_normal((2, 2, 4, 4, 6))}))

    g_relu = r.standard_normal(40)
    def relu(p):
        y, mask = nn.relu(p["x"])
        return float((y * g_relu).sum()), {"x": nn.relu_backward(g_relu, mask)}, mask.tobytes()
    checks.append(("relu", relu, {"x": r.standard_normal(40)}))

    x_dense, y_dense = r.standard_normal((6, 5)), (r.random(6) > 0.5).astype(float)
    def dense_sig_bce(p):
        z, cache = nn.dense(x_dense, p["w"], p["b"])
        s = nn.sigmoid(z[:, 0])
        dz = nn.sigmoid_backward(nn.bce_loss_grad(s, y_dense), s)[:, None]
        _, dw, db = nn.dense_backward(dz, cache)
        return nn.bce_loss(s, y_dense), {"w": dw, "b": db}
    checks.append(("dense+sigmoid+bce", dense_sig_bce, {"w": r.standard_normal((1, 5)), "b": r.standard_normal(1)}))

    for direction in ("forward", "bidirectional"):
        width = 4 if direction == "bidirectional" else 2
        g_lstm = r.standard_normal((5, width))
        def lstm(p, direction=direction, g_lstm=g_lstm):
            pf = {k: p[f"f_{k}"] for k in ("w_x", "w_h", "b")}
            pr = {k: p[f"r_{k}"] for k in ("w_x", "w_h", "b")}
            h, cache = nn.lstm_sequence(p["x"], pf, direction, pr)
            dx, cells = nn.lstm_sequence_backward(g_lstm, cache)
            grads = {"x": dx}
            for prefix, cg in zip(("f", "r"), cells):
                grads.update({f"{prefix}_{k}": v for k, v in cg.items()})
            for k in ("w_x", "w_h", "b"):
                grads.setdefault(f"r_{k}", np.zeros_like(p[f"r_{k}"]))
            return float((h * g_lstm).sum()), grads
        params = {"x": r.standard_normal((5, 3))}
        params.update({f"f_{k}": v for k, v in lstm_params(r, 3, 2).items()})
        params.update({f"r_{k}": v for k, v in lstm_params(r, 3, 2).items()})
        checks.append((f"lstm-{direction}", lstm, params))
    return checks


def test_criterion_1_gradient_fidelity():
    t0 = time.perf_counter()
    errors = {}
    for name, fn, params in layer_checks(np.random.default_rng(1)):
        errors[name] = nn.grad_check(fn, params, probes=100)
    for variant in ("max_prob", "max_prob_with_location", "lstm", "bilstm"):
        for k in (1, 3, 7):
            errors[f"total_loss/{variant}/k={k}"] = model_grad_error(variant, k, probes=100)
    worst_name = max(errors, key=errors.get)
    elapsed = time.perf_counter() - t0
    report(1, errors[worst_name] < 1e-4 and elapsed < 300,
           f"{len(errors)} checks x 100 probes, max rel err {errors[worst_name]:.2e} ({worst_name}) < 1e-4, {elapsed:.0f}s < 300s")


# ------------------------------------------------------------------------ 2


def test_criterion_2_oracle_equivalence():
    r = np.random.default_rng(2)
    t0 = time.perf_counter()
    conv_err = pool_err = lstm_err = 0.0
    for _ in range(200):
        c_in, c_out = int(r.integers(1, 3)), int(r.integers(1, 3))
        shape = tuple(int(v) for v in r.integers(3, 6, 3))
        stride = int(r.integers(1, 3))
        pad = int(r.integers(0, 2))
        x = r.standard_normal((c_in, *shape))
        w = r.standard_normal((c_out, c_in, 3, 3, 3))
        b = r.standard_normal(c_out)
        if any((s + 2 * pad - 3) % stride for s in shape):
            stride = 1
        out, _ = nn.conv3d(x, w, b, stride=stride, padding=pad)
        ref = naive_conv3d(x, w, b, (stride,) * 3, (pad,) * 3)
        conv_err = max(conv_err, float(np.max(np.abs(out - ref) / np.maximum(np.abs(ref), 1))))

        xp = r.standard_normal((2, *(2 * r.integers(1, 4, 3))))
        pooled, _ = nn.maxpool3d(xp, 2)
        pool_err = max(pool_err, float(np.max(np.abs(pooled - naive_maxpool3d(xp, (2, 2, 2), (2, 2, 2))))))

        d, h, k = int(r.integers(1, 4)), int(r.integers(1, 4)), int(r.integers(1, 6))
        p = lstm_params(r, d, h)
        xs = r.standard_normal((k, d))
        hs, _ = nn.lstm_sequence(xs, p, "forward")
        lstm_err = max(lstm_err, float(np.max(np.abs(hs - scalar_lstm(xs, p["w_x"], p["w_h"], p["b"])))))
    elapsed = time.perf_counter() - t0
    report(2, conv_err < 1e-6 and pool_err == 0.0 and lstm_err < 1e-10 and elapsed < 120,
           f"200 instances: conv {conv_err:.1e} < 1e-6, pool {pool_err:.1e} == 0, lstm {lstm_err:.1e} < 1e-10, {elapsed:.1f}s")


# ------------------------------------------------------------------------ 3


def test_criterion_3_tiling():
    r = np.random.default_rng(3)
    t0 = time.perf_counter()
    bad = 0
    for _ in range(1000):
        length, tile = int(r.integers(1, 5000)), int(r.integers(1, 400))
        starts = tile_starts(length, tile)
        k = len(starts)
        covered = np.zeros(length, dtype=bool)
        for s in starts:
            covered[s : s + tile] = True
        ok = covered.all() and k == math.ceil(length / tile) and (k - 1) * tile < length
        bad += not ok
    elapsed = time.perf_counter() - t0
    report(3, bad == 0 and elapsed < 1.0, f"1000 (L, p) pairs, {bad} violations, {elapsed:.3f}s < 1s")


# ------------------------------------------------------------------------ 4


def test_criterion_4_fourier():
    r = np.random.default_rng(4)
    t0 = time.perf_counter()
    band = const = ident = 0.0
    for _ in range(500):
        n = int(r.integers(2, 64))
        m = int(r.integers(n, 4 * n + 1))
        lim = (n - 1) // 2
        t_in, t_out = np.arange(n) / n, np.arange(m) / m
        c = r.standard_normal()
        x, expected = np.full(n, c), np.full(m, c)
        for f in range(1, lim + 1):
            a, ph = r.standard_normal(), r.uniform(0, 2 * np.pi)
            x = x + a * np.cos(2 * np.pi * f * t_in + ph)
            expected = expected + a * np.cos(2 * np.pi * f * t_out + ph)
        band = max(band, float(np.max(np.abs(fourier_resample(x, m) - expected))))
        const = max(const, float(np.max(np.abs(fourier_resample(np.full(n, c), m) - c))))
        ident = max(ident, float(np.max(np.abs(fourier_resample(x, n) - x))))
    elapsed = time.perf_counter() - t0
    report(4, band < 1e-9 and const < 1e-12 and ident < 1e-12 and elapsed < 10,
           f"band-limited {band:.1e} < 1e-9, constant {const:.1e}, identity {ident:.1e} < 1e-12, {elapsed:.2f}s")


# ------------------------------------------------------------------------ 5


def test_criterion_5_auc_oracle():
    r = np.random.default_rng(5)
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(1000):
        n = int(r.integers(2, 40))
        labels = r.integers(0, 2, n)
        labels[:2] = [1, 0]
        scores = r.integers(0, 5, n) / 4 if i % 2 else r.random(n)  # half the instances heavy in ties
        worst = max(worst, abs(roc_auc(scores, labels).auc - pairwise_auc(scores, labels)))
    elapsed = time.perf_counter() - t0
    report(5, worst < 1e-12 and elapsed < 10, f"1000 instances (with ties), max |trapezoid - pairwise| {worst:.1e} < 1e-12, {elapsed:.2f}s")


# -------------------------------------------------------------- 6, 7 shared


def slice_pool(manifest, records):
    pool = []
    for rec in records:
        centerline, radius = read_centerline(manifest.label_path(rec))
        pool.append((load_volume(manifest.volume_path(rec)), centerline, radius))
    return pool


@pytest.fixture(scope="module")
def detector42(bench42):
    rng = np.random.default_rng(0)
    images, boxes = sample_training_slices(slice_pool(bench42, bench42.partition("train")), 300, rng)
    t0 = time.perf_counter()
    det, _ = train_detector(images, boxes, config=DetectorTrainConfig(epochs=30))
    return det, time.perf_counter() - t0


def test_criterion_7_detector(bench42, detector42):
    det, train_s = detector42
    held_out = bench42.partition("tune") + bench42.partition("test")
    images, boxes = sample_training_slices(slice_pool(bench42, held_out), 200, np.random.default_rng(1))
    t0 = time.perf_counter()
    found = detect_slices(images, det)
    ious = np.array([box_iou((*d.center, *d.size), tuple(b)) for d, b in zip(found, boxes)])
    agree = float(np.mean(ious >= 0.5))
    elapsed = train_s + time.perf_counter() - t0
    report(7, agree >= 0.95 and elapsed < 600,
           f"trained on 300 slices, IoU>=0.5 on {agree:.1%} of 200 held-out slices (>= 95%), "
           f"median IoU {np.median(ious):.3f}, {elapsed:.0f}s < 600s")


# ------------------------------------------------------------------------ 6


@pytest.fixture(scope="module")
def benchmark(bench42, detector42):
    det, _ = detector42
    t0 = time.perf_counter()
    items = {p: load_items(bench42, bench42.partition(p), DESK_PREP, det) for p in ("train", "tune", "test")}
    base = ModelConfig(patch_size=DESK_PREP.patch_size)
    report_ = run_aggregation_experiment(items["train"], items["tune"], base, DESK_SCHEDULE, EXPERIMENT_VARIANTS,
                                         DESK_PREP, log=print)
    pool = [r.checkpoint for r in report_.results]
    choice = select_ensemble(pool, items["tune"], size=3)
    members = [pool[i] for i in choice.members]
    metrics, mean_s = evaluate(items["test"], members, choice.ttas)
    return dict(items=items, report=report_, choice=choice, metrics=metrics, seconds=time.perf_counter() - t0)


@pytest.mark.slow
def test_criterion_6_end_to_end(benchmark):
    rep, metrics, choice = benchmark["report"], benchmark["metrics"], benchmark["choice"]
    n_tune = len(benchmark["items"]["tune"])
    variant_aucs = {r.variant: r.metrics.auc for r in rep.results}
    structure = len(rep.results) == 3 and all(
        len(r.metrics.fpr) == len(np.unique(r.metrics.scores)) + 1 <= n_tune + 1 for r in rep.results)
    text = rep.to_text()
    print(text)
    ok = metrics.auc >= 0.90 and all(a > 0.5 for a in variant_aucs.values()) and structure
    report(6, ok,
           f"200 phantoms (seed 42), desk schedule, detector tracks; 3-model ensemble "
           f"{choice.ttas} held-out AUC {metrics.auc:.3f} >= 0.90 (sens {metrics.sensitivity:.2f}, "
           f"spec {metrics.specificity:.2f}); tuning AUC per variant "
           + ", ".join(f"{v}={a:.3f}" for v, a in variant_aucs.items())
           + f" > 0.5 (clinical reference {REFERENCE_TUNE_AUC}); {benchmark['seconds'] / 60:.1f} min on 1 core")


@pytest.mark.slow
def test_localisation_on_severe_fracture(benchmark, bench42):
    """A positive test series with one severe fracture: the argmax patch holds that vertebra's centre."""
    ck = benchmark["report"].variant("max_prob").checkpoint
    hits, total = 0, 0
    for rec, it in zip(bench42.partition("test"), benchmark["items"]["test"]):
        fractured = [v for v in rec.vertebrae if v.fractured]
        if len(fractured) != 1 or fractured[0].grade != "severe":
            continue
        v = fractured[0]
        pred = predict_series(it.patches, ck)
        lo, hi = it.patches.intervals_mm[pred.argmax_patch]
        hits += lo <= (v.top_mm + v.bottom_mm) / 2 <= hi
        total += 1
    print(f"localisation: {hits}/{total} single-severe test series")
    assert total == 0 or hits / total >= 0.5


# ------------------------------------------------------------------------ 8


def test_criterion_8_determinism_and_goldens(bench42, tmp_path):
    from helpers import tiny_config
    from vcfseq.pipeline import SeriesItem
    from vcfseq.representation import sequence_labels

    prep = PrepConfig(patch_size=(8, 8, 8), tile_length=32)
    items = []
    for rec in bench42.partition("train")[:4]:
        prepared = prepare_volume(load_volume(bench42.volume_path(rec)), read_centerline(bench42.label_path(rec))[0], prep)
        items.append(SeriesItem(rec.series_id, prepared.patches, int(rec.positive),
                                sequence_labels(prepared.patches, rec.vertebrae)))
    if len({it.label for it in items}) < 2:
        items.append(next(it for it in load_items(bench42, bench42.partition("train"), prep) if it.label != items[0].label))
    config = TrainConfig(lr=1e-3, batch_size=2, epochs=2, iters_per_epoch=3, seed=11)
    a = train(tiny_config(), items, items, config, prep).checkpoint.to_bytes()
    b = train(tiny_config(), items, items, config, prep).checkpoint.to_bytes()
    deterministic = a == b

    rng = np.random.default_rng(8)
    vol = Volume(rng.integers(-1024, 3072, size=(5, 6, 7)).astype(np.int16), (2.5, 0.7, 0.7))
    vol_rt = encode_volume(decode_volume(encode_volume(vol))) == encode_volume(vol)
    (tmp_path / "a.ckpt").write_bytes(a)
    ckpt_rt = Checkpoint.load(tmp_path / "a.ckpt").to_bytes() == a

    goldens = {
        "volume": gc.volume_bytes() == (gc.GOLDEN / "volume.vsq").read_bytes(),
        "manifest": gc.manifest_bytes(bench42.root) == (gc.GOLDEN / "manifest_seed42.tsv").read_bytes(),
        "checkpoint": gc.checkpoint_bytes() == (gc.GOLDEN / "tiny_seed0.ckpt").read_bytes(),
        "overlay": gc.overlay_bytes(bench42) == (gc.GOLDEN / "overlay_phantom0.pgm").read_bytes(),
    }
    ok = deterministic and vol_rt and ckpt_rt and all(goldens.values())
    report(8, ok, f"seeded training bitwise={deterministic}, volume round-trip={vol_rt}, checkpoint round-trip={ckpt_rt}, "
                  + ", ".join(f"golden {k}={v}" for k, v in goldens.items()))


# ------------------------------------------------------------------------ 9


def test_criterion_9_inference_time(bench42, detector42):
    det, _ = detector42
    prep = PrepConfig()  # default patch (32, 32, 16)
    ck = Checkpoint.initial(ModelConfig(patch_size=prep.patch_size), seed=0)
    times = []
    for rec in bench42.partition("test")[:5]:
        volume = load_volume(bench42.volume_path(rec))
        t0 = time.perf_counter()
        prepared = prepare_volume(volume, det, prep)
        predict_series(prepared.patches, ck, sagittal_shape=prepared.sagittal.data.shape[1:])
        times.append(time.perf_counter() - t0)
    worst = max(times)
    report(9, worst < 5.0, f"patch {prep.patch_size}, one model, cord detection + reslice + tile + predict: "
                           f"max {worst:.2f}s, mean {np.mean(times):.2f}s per series < 5s on one core "
                           f"(clinical full-pipeline reference {CLINICAL_SECONDS_PER_CASE}s)")
