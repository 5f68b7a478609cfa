"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

Run with `pytest tests/test_acceptance.py -v -s` to see the lines as they
complete. Tolerances are pinned here, not configurable.
"""

import os
import time

import numpy as np
import pytest
from conftest import central_diff, grad_match_fraction

from vertseg import autodiff as ad
from vertseg.autodiff import Tensor
from vertseg.blocks import (ASPP, PSA, ConvBlock, RandomFeatureParams,
                            SpatialAttention, SqueezeExciteRF)
from vertseg.cli import cli
from vertseg.data import (AugmentationConfig, Volume, augment_with_trace,
                          extract_slices, make_synthetic_dataset,
                          normalize_intensity, resample_to_unit_spacing,
                          sample_rng)
from vertseg.evaluation import (ConfusionCounts, confusion_counts, evaluate,
                                metrics_from_counts, run_ablation)
from vertseg.network import (ModelConfig, build_doubleunet_baseline,
                             build_doubleunet_pp, count_parameters)
from vertseg.training import TrainConfig, bce_dice_loss, lr_at, train, \
    warmup_end_epoch

pytestmark = pytest.mark.filterwarnings("ignore:ASPP dilation")

_param_counts = {}


def _report(name, ok, detail):
    print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, f"{name}: {detail}"


# -- criterion 1: shape / range / softmax invariants ---------------------------------


def _check_blocks_at(size, rng):
    x = Tensor(rng.normal(size=(1, 8, size, size)))
    with ad.no_grad():
        out = ConvBlock(8, 12, np.random.default_rng(0))(x)
        assert out.shape == (1, 12, size, size) and out.data.min() >= 0.0

        out = ASPP(8, 8, np.random.default_rng(1))(x)
        assert out.shape == (1, 8, size, size)
        assert np.isfinite(out.data).all()

        refined, amap = SpatialAttention(np.random.default_rng(2))(x)
        assert refined.shape == x.shape and amap.shape == (1, 1, size, size)
        assert (amap.data > 0.0).all() and (amap.data < 1.0).all()

        psa = PSA(8, 4, (3, 5, 7, 9), 4, np.random.default_rng(3))
        _, attn = psa.group_attention(x)
        assert psa(x).shape == x.shape
        np.testing.assert_allclose(attn.data.sum(axis=1), 1.0, atol=1e-6)

        params = RandomFeatureParams.draw(8, 16, seed=4)
        se = SqueezeExciteRF(8, params, 2, np.random.default_rng(5))
        w = se.channel_weights(x).data
        assert se(x).shape == x.shape
        assert (w > 0.0).all() and (w < 1.0).all()


def test_criterion_01_shape_range_suite():
    t0 = time.monotonic()
    rng = np.random.default_rng(0)
    for size in (64, 256):
        _check_blocks_at(size, rng)

    for builder, key in ((build_doubleunet_pp, "plusplus"),
                         (build_doubleunet_baseline, "baseline")):
        for cfg, size in ((ModelConfig.desk(), 64), (ModelConfig.full(), 256)):
            model = builder(cfg).eval()
            out = model.predict(rng.normal(size=(1, size, size)))
            for mask in (out.mask1, out.mask2):
                assert mask.shape == (1, size, size)
                assert (mask > 0.0).all() and (mask < 1.0).all()
            if cfg.scale == "full":
                _param_counts[key] = count_parameters(model)
            del model
    elapsed = time.monotonic() - t0
    _report("criterion-1 shape/range suite", elapsed < 60.0,
            f"blocks and both networks at 64/256 px in {elapsed:.1f}s (< 60s)")


# -- criterion 2: gradient suite -------------------------------------------------------


def test_criterion_02_gradient_suite():
    t0 = time.monotonic()
    rng = np.random.default_rng(1)
    results = {}

    block = ConvBlock(4, 4, np.random.default_rng(10))
    results["conv_block"] = grad_match_fraction(
        lambda t: block(t).sum(), rng.normal(size=(1, 4, 6, 6)))

    sa = SpatialAttention(np.random.default_rng(11))
    results["spatial_attention"] = grad_match_fraction(
        lambda t: (lambda pair: pair[0].sum() + pair[1].sum())(sa(t)),
        rng.normal(size=(1, 4, 7, 7)))

    psa = PSA(8, 2, (3, 5), 2, np.random.default_rng(12))
    results["psa"] = grad_match_fraction(
        lambda t: psa(t).sum(), rng.normal(size=(1, 8, 6, 6)))

    se = SqueezeExciteRF(8, RandomFeatureParams.draw(8, 16, seed=6), 2,
                         np.random.default_rng(13))
    results["squeeze_excite_rf"] = grad_match_fraction(
        lambda t: se(t).sum(), rng.normal(size=(1, 8, 6, 6)))

    target = (rng.random((2, 8, 8)) > 0.6).astype(float)
    pred0 = rng.uniform(0.05, 0.95, (2, 8, 8))
    t = Tensor(pred0.copy(), requires_grad=True)
    bce_dice_loss(t, target).backward()
    numeric = central_diff(
        lambda p: float(bce_dice_loss(Tensor(p), target).data), pred0, 1e-4)
    err = np.abs(t.grad - numeric) <= 1e-3 * np.maximum(
        np.abs(t.grad), np.abs(numeric)) + 1e-7
    results["bce_dice_loss"] = float(err.mean())

    elapsed = time.monotonic() - t0
    ok = all(v >= 0.95 for v in results.values()) and elapsed < 300.0
    detail = ", ".join(f"{k}={v:.3f}" for k, v in results.items())
    _report("criterion-2 gradient suite", ok,
            f"match fractions [{detail}] in {elapsed:.1f}s (< 5 min)")


# -- criterion 3: metric oracle --------------------------------------------------------


def _brute_force(pred, gt, threshold=0.5):
    tp = fp = tn = fn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p = pred[i, j] >= threshold
            g = gt[i, j] == 1
            tp += p and g
            fp += p and not g
            fn += (not p) and g
            tn += (not p) and (not g)
    return int(tp), int(fp), int(tn), int(fn)


def test_criterion_03_metric_oracle():
    rng = np.random.default_rng(2)
    for _ in range(1000):
        pred = rng.random((16, 16))
        gt = (rng.random((16, 16)) > rng.random()).astype(int)
        c = confusion_counts(pred, gt)
        assert (c.tp, c.fp, c.tn, c.fn) == _brute_force(pred, gt)
        p, r, f1 = metrics_from_counts(c)
        bp, br, bf = _ratio_reference(c)
        assert abs(p - bp) < 1e-12 and abs(r - br) < 1e-12 and abs(f1 - bf) < 1e-12
    hand = metrics_from_counts(ConfusionCounts(1, 1, 1, 1))
    assert hand == (0.5, 0.5, 0.5)
    _report("criterion-3 metric oracle", True,
            "1000 random 16x16 pairs equal brute-force enumeration exactly; "
            "(1,1,1,1) -> (0.5,0.5,0.5)")


def _ratio_reference(c):
    p = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    r = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f = 2 * c.tp / (2 * c.tp + c.fp + c.fn) if 2 * c.tp + c.fp + c.fn else 0.0
    return p, r, f


# -- criterion 4: learning-rate anchors -------------------------------------------------


def test_criterion_04_lr_anchors():
    cfg = TrainConfig()  # published defaults: 160 epochs
    we = warmup_end_epoch(cfg)
    anchors_ok = (lr_at(0, cfg) == 1e-5 and lr_at(we, cfg) == 4.8e-4
                  and lr_at(cfg.epochs - 1, cfg) == 1.52e-4)
    values = [lr_at(e, cfg) for e in range(cfg.epochs)]
    mono_ok = all(a <= b for a, b in zip(values[:we], values[1:we + 1])) and \
        all(a >= b for a, b in zip(values[we:], values[we + 1:])) and \
        max(values) == cfg.lr_peak
    _report("criterion-4 lr anchors", anchors_ok and mono_ok,
            f"lr(0)=1e-5, lr({we})=4.8e-4, lr(159)=1.52e-4 exactly; "
            "piecewise monotone")


# -- criterion 5: preprocessing ----------------------------------------------------------


def test_criterion_05_preprocessing():
    rng = np.random.default_rng(3)
    ok = True
    for i in range(10_000):
        raw = rng.uniform(-4096, 8192, size=(16, 16))
        out = normalize_intensity(raw, mode="train",
                                  rng=sample_rng(5, "vol", i))
        if out.min() < -1.0 or out.max() > 1.0:
            ok = False
            break
    vol = Volume(rng.normal(size=(10, 10, 10)), spacing=(2.0, 2.0, 2.0))
    resampled = resample_to_unit_spacing(vol)
    extent_ok = resampled.shape == (20, 20, 20) and \
        resampled.spacing == (1.0, 1.0, 1.0)
    _report("criterion-5 preprocessing", ok and extent_ok,
            "10,000 train-mode samples stayed in [-1,1]; spacing-2 volume "
            "doubled to 20^3")


# -- criterion 6: augmentation probability and consistency --------------------------------


def test_criterion_06_augmentation():
    cfg = AugmentationConfig()
    rng = np.random.default_rng(4)
    img = np.clip(rng.normal(0, 0.4, (16, 16)), -1, 1)
    mask = np.zeros((16, 16), dtype=np.uint8)
    mask[4:9, 5:10] = 1
    from vertseg.data import SliceSample
    s = SliceSample(image=img, mask=mask, plane="sagittal", volume_id="v",
                    slice_index=0)
    hits = 0
    n = 10_000
    consistent = True
    for i in range(n):
        out, trace = augment_with_trace(s, cfg, sample_rng(11, "v", i))
        hits += trace.set_used == 1
        replay = (trace.apply_geometric(s.mask, order=0) > 0.5).astype(np.uint8)
        if not np.array_equal(out.mask, replay):
            consistent = False
            break
    freq = hits / n
    ok = 0.58 <= freq <= 0.62 and consistent
    _report("criterion-6 augmentation", ok,
            f"set-1 frequency {freq:.4f} in [0.58, 0.62]; image/mask geometric "
            "consistency held on every draw")


# -- criterion 7: overfit oracle ----------------------------------------------------------


def test_criterion_07_overfit_oracle():
    t0 = time.monotonic()
    img, mask = make_synthetic_dataset(1, seed=7)[0]
    slices = extract_slices(img, mask, "sagittal", volume_id="p0", size=64)
    mid = len(slices) // 2
    samples = slices[mid - 2:mid + 2]
    assert len(samples) == 4

    model = build_doubleunet_pp(ModelConfig.desk(seed=0))
    # hotter anchors than the 160-epoch defaults: 200 optimiser steps total
    cfg = TrainConfig(epochs=200, batch_size=4, seed=0,
                      lr_start=2e-4, lr_peak=3e-3, lr_final=1e-3)
    model, hist = train(model, {"train": samples}, cfg)
    f1 = hist.rows[-1]["train_f1"]
    losses = [r["train_loss"] for r in hist.rows]
    loss_drops = np.mean(losses[40:50]) < np.mean(losses[0:10])
    elapsed = time.monotonic() - t0
    ok = f1 >= 0.95 and elapsed < 600.0 and loss_drops
    _report("criterion-7 overfit oracle", ok,
            f"train F1 {f1:.3f} >= 0.95 after {cfg.epochs} steps "
            f"(<= 300) in {elapsed:.0f}s (< 10 min); loss fell over the "
            "first 50 steps")


# -- criterion 8: parameter ordering --------------------------------------------------------


def test_criterion_08_parameter_ordering():
    if "plusplus" not in _param_counts:
        _param_counts["plusplus"] = count_parameters(
            build_doubleunet_pp(ModelConfig.full()))
    if "baseline" not in _param_counts:
        _param_counts["baseline"] = count_parameters(
            build_doubleunet_baseline(ModelConfig.full()))
    npp, nb = _param_counts["plusplus"], _param_counts["baseline"]
    _report("criterion-8 parameter ordering", npp < nb,
            f"full improved model {npp:,} < full baseline {nb:,} "
            "(exact counts reported, ordering asserted)")


# -- criterion 9: ablation direction ---------------------------------------------------------


def test_criterion_09_ablation_direction(tmp_path):
    # train on sagittal slices of ONE phantom; validate on the middle slice
    # of EVERY plane of three unseen phantoms. The un-augmented runs overfit
    # the training geometry, which the geometric augmentations cover.
    size = 32
    vols = make_synthetic_dataset(4, seed=11, shape=(40, 40, 40))

    def slices_of(i, phase, plane, n=None):
        img, mask = vols[i]
        sl = extract_slices(img, mask, plane, volume_id=f"p{i}",
                            phase=phase, size=size)
        if n is None:
            return [sl[len(sl) // 2]]
        step = max(1, len(sl) // n)
        return sl[::step][:n]

    valid = []
    for i in (1, 2, 3):
        for plane in ("sagittal", "coronal", "axial"):
            valid += slices_of(i, "valid", plane)
    data = {"train": slices_of(0, "train", "sagittal", n=4)[:4],
            "valid": valid, "test": []}
    cfg = TrainConfig(epochs=120, batch_size=4, seed=0,
                      lr_start=2e-4, lr_peak=2.5e-3, lr_final=8e-4)
    result = run_ablation(ModelConfig.desk(input_size=(size, size)), data,
                          cfg, AugmentationConfig(), seeds=(0, 1, 2),
                          out_dir=tmp_path)
    assert len(result.rows) == 36  # 2 models x 2 aug x 3 planes x 3 seeds
    details = []
    ok = True
    for model in ("doubleunet", "doubleunet_pp"):
        on = result.mean_f1(model, "on")
        off = result.mean_f1(model, "off")
        ok &= on >= off
        details.append(f"{model}: aug {on:.2f} vs no-aug {off:.2f}")
    assert os.path.exists(tmp_path / "ablation.csv")
    assert os.path.exists(tmp_path / "ablation_plot.png")
    _report("criterion-9 ablation direction", ok,
            "mean valid F1 over 3 seeds x 3 planes, " + "; ".join(details))


# -- criterion 10: end-to-end smoke ------------------------------------------------------------


def test_criterion_10_end_to_end_smoke(tmp_path, capsys):
    data_dir = str(tmp_path / "d")
    cache_dir = str(tmp_path / "cache")
    run_dir = str(tmp_path / "run")
    metrics = str(tmp_path / "metrics.csv")
    report_md = str(tmp_path / "report.md")

    steps = [
        ["synth", "--n", "3", "--seed", "7", "--out", data_dir,
         "--size", "24", "24", "24"],
        ["preprocess", "--in", data_dir, "--out", cache_dir, "--plane", "all",
         "--size", "32", "--seed", "0"],
        ["train", "--cache", cache_dir, "--out", run_dir, "--scale", "desk",
         "--epochs", "2", "--batch-size", "8", "--seed", "0"],
        ["evaluate", "--cache", cache_dir, "--weights",
         os.path.join(run_dir, "weights_final.vsw"), "--plane", "all",
         "--phase", "both", "--out", metrics],
        ["report", "--metrics", metrics, "--out", report_md],
    ]
    codes = [cli(argv) for argv in steps]
    capsys.readouterr()
    ok = codes == [0] * 5
    table = open(report_md).read()
    header_ok = ("| Plane | Model | Phase | Precision (%) | Recall (%) "
                 "| F1-score (%) |") in table
    planes_ok = all(p in table for p in ("Sagittal", "Coronal", "Axial"))
    history_ok = os.path.exists(os.path.join(run_dir, "history.csv"))
    ok = ok and header_ok and planes_ok and history_ok
    _report("criterion-10 end-to-end smoke", ok,
            f"exit codes {codes}; report covers all three planes in the "
            "published table layout")
