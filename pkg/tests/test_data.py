"""Data pipeline contracts: NIfTI round trips, resampling arithmetic,
slice extraction, normalisation ranges, the dual augmentation sets, the
phantom generator, splitting, and the slice cache."""

import numpy as np
import pytest

from vertseg.data import (AugmentationConfig, SliceSample, Volume, augment,
                          augment_with_trace, extract_slices,
                          list_dataset_dir, load_dataset_pair, load_slice_cache,
                          load_volume, make_synthetic_dataset,
                          normalize_intensity, resample_to_unit_spacing,
                          sample_rng, save_slice_cache, save_volume,
                          split_dataset, stack_slices, write_dataset_dir)
from vertseg.nifti import read_nifti, write_nifti

RNG = np.random.default_rng(11)


# -- volume IO ----------------------------------------------------------------


def test_nifti_round_trip(tmp_path):
    data = RNG.normal(size=(5, 6, 7)) * 100
    affine = np.diag([0.8, 0.8, 1.2, 1.0])
    path = tmp_path / "vol.nii.gz"
    write_nifti(path, data, affine)
    back, affine2 = read_nifti(path)
    np.testing.assert_allclose(back, data.astype(np.float32), rtol=1e-6)
    np.testing.assert_allclose(affine2, affine, atol=1e-6)


def test_volume_round_trip_and_spacing_passthrough(tmp_path):
    vol = Volume(RNG.normal(size=(4, 5, 6)), spacing=(0.8, 0.8, 1.2))
    path = tmp_path / "v.nii.gz"
    save_volume(path, vol, dtype=np.float64)
    loaded = load_volume(path)
    np.testing.assert_allclose(loaded.data, vol.data)
    assert loaded.spacing == (0.8, 0.8, 1.2)
    assert loaded.axes == vol.axes


def test_load_volume_missing_file():
    with pytest.raises(FileNotFoundError):
        load_volume("/nonexistent/vol.nii.gz")


def test_load_volume_rejects_oblique(tmp_path):
    c = np.cos(np.pi / 4)
    affine = np.array([[c, -c, 0, 0], [c, c, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1.0]])
    path = tmp_path / "oblique.nii"
    write_nifti(path, np.zeros((3, 3, 3)), affine)
    with pytest.raises(ValueError, match="oblique"):
        load_volume(path)


def test_volume_rejects_bad_spacing():
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), spacing=(1.0, 0.0, 1.0))


# -- resampling ----------------------------------------------------------------


def test_resample_identity_at_unit_spacing():
    vol = Volume(RNG.normal(size=(6, 6, 6)), spacing=(1.0, 1.0, 1.0))
    out = resample_to_unit_spacing(vol)
    np.testing.assert_array_equal(out.data, vol.data)
    assert out.spacing == (1.0, 1.0, 1.0)


def test_resample_doubles_extent_for_spacing_two():
    vol = Volume(RNG.normal(size=(10, 10, 10)), spacing=(2.0, 2.0, 2.0))
    out = resample_to_unit_spacing(vol)
    assert out.shape == (20, 20, 20)
    assert out.spacing == (1.0, 1.0, 1.0)


def test_resample_preserves_constants():
    vol = Volume(np.full((7, 9, 5), 3.5), spacing=(1.7, 0.6, 2.3))
    out = resample_to_unit_spacing(vol)
    np.testing.assert_allclose(out.data, 3.5)


def test_resample_mask_stays_binary():
    mask = (RNG.random((8, 8, 8)) > 0.7).astype(float)
    out = resample_to_unit_spacing(Volume(mask, spacing=(1.5, 1.5, 1.5)),
                                   is_mask=True)
    assert set(np.unique(out.data)) <= {0.0, 1.0}


# -- slice extraction -------------------------------------------------------------


def _vol_pair(shape, mask_value=1.0):
    img = Volume(RNG.normal(size=shape))
    mask = Volume(np.full(shape, mask_value))
    return img, mask


def test_extract_one_sample_per_index_along_normal():
    img, mask = _vol_pair((32, 40, 48))
    out = extract_slices(img, mask, "axial", keep_empty=True, size=64)
    assert len(out) == 48
    assert all(s.plane == "axial" for s in out)
    out_sag = extract_slices(img, mask, "sagittal", keep_empty=True, size=64)
    assert len(out_sag) == 32


def test_extract_drops_empty_slices_by_default():
    img, mask = _vol_pair((8, 8, 8), mask_value=0.0)
    assert extract_slices(img, mask, "axial") == []
    kept = extract_slices(img, mask, "axial", keep_empty=True, size=32)
    assert len(kept) == 8


def test_extract_masks_stay_binary_after_resize():
    img = Volume(RNG.normal(size=(9, 11, 13)))
    mask = Volume((RNG.random((9, 11, 13)) > 0.5).astype(float))
    for s in extract_slices(img, mask, "coronal", size=32):
        assert set(np.unique(s.mask)) <= {0, 1}


def test_extract_rejects_shape_mismatch():
    img = Volume(np.zeros((4, 4, 4)))
    mask = Volume(np.zeros((4, 4, 5)))
    with pytest.raises(ValueError, match="mismatch"):
        extract_slices(img, mask, "axial")


def test_slices_stack_back_to_volume():
    img = Volume(RNG.normal(size=(6, 7, 8)))
    mask = Volume((RNG.random((6, 7, 8)) > 0.4).astype(float))
    for plane, axis in (("sagittal", 0), ("coronal", 1), ("axial", 2)):
        samples = extract_slices(img, mask, plane, keep_empty=True, size=None)
        rebuilt = stack_slices(samples, axis=axis)
        np.testing.assert_array_equal(rebuilt, img.data)


# -- normalisation ------------------------------------------------------------------


def test_normalize_zero_fixed_point():
    assert normalize_intensity(np.array([0.0]))[0] == 0.0


def test_normalize_clips_high_intensity():
    # 4096 / 2048 = 2, clipped to 1
    assert normalize_intensity(np.array([4096.0]))[0] == 1.0


def test_normalize_train_mode_stays_in_unit_interval():
    rng = np.random.default_rng(3)
    for _ in range(50):
        raw = rng.uniform(-3000, 4000, size=(16, 16))
        out = normalize_intensity(raw, mode="train", rng=rng)
        assert out.min() >= -1.0 and out.max() <= 1.0


def test_normalize_eval_idempotent():
    raw = RNG.uniform(-2048, 2048, size=(8, 8))
    once = normalize_intensity(raw)
    twice = np.clip(once, -1.0, 1.0)
    np.testing.assert_array_equal(once, twice)


def test_normalize_train_requires_rng():
    with pytest.raises(ValueError):
        normalize_intensity(np.zeros(3), mode="train")


def test_normalize_literal_scale_range_can_invert():
    rng = np.random.default_rng(0)
    raw = np.full((4, 4), 1000.0)
    seen_negative = False
    for _ in range(40):
        out = normalize_intensity(raw, mode="train", rng=rng,
                                  literal_scale_range=True)
        seen_negative |= (out < 0).any()
    assert seen_negative


# -- augmentation --------------------------------------------------------------------


def _sample(size=32, seed=0):
    rng = np.random.default_rng(seed)
    img = np.clip(rng.normal(0, 0.4, (size, size)), -1, 1)
    mask = np.zeros((size, size), dtype=np.uint8)
    mask[size // 4:size // 2, size // 3:size // 2] = 1
    return SliceSample(image=img, mask=mask, plane="sagittal",
                       volume_id="v0", slice_index=0)


def test_flip_augment_is_involution():
    cfg = AugmentationConfig(p_set1=1.0, per_op_prob=1.0, set1_ops=("flip_lr",))
    s = _sample()
    once = augment(s, cfg, np.random.default_rng(0))
    twice = augment(once, cfg, np.random.default_rng(1))
    np.testing.assert_array_equal(twice.image, s.image)
    np.testing.assert_array_equal(twice.mask, s.mask)


def test_set_selection_frequency_matches_probability():
    cfg = AugmentationConfig()
    s = _sample(size=16)
    hits = 0
    n = 10_000
    for i in range(n):
        _, trace = augment_with_trace(s, cfg, sample_rng(123, "v0", i))
        hits += trace.set_used == 1
    assert 0.58 <= hits / n <= 0.62


def test_geometric_consistency_on_every_draw():
    cfg = AugmentationConfig()
    s = _sample()
    for i in range(200):
        out, trace = augment_with_trace(s, cfg, sample_rng(7, "v0", i))
        replayed = (trace.apply_geometric(s.mask, order=0) > 0.5).astype(np.uint8)
        np.testing.assert_array_equal(out.mask, replayed)
        assert set(np.unique(out.mask)) <= {0, 1}
        assert out.image.min() >= -1.0 and out.image.max() <= 1.0
        assert out.image.shape == s.image.shape


def test_photometric_ops_leave_mask_alone():
    cfg = AugmentationConfig(p_set1=1.0, per_op_prob=1.0,
                             set1_ops=("random_contrast", "random_brightness"))
    s = _sample()
    out = augment(s, cfg, np.random.default_rng(5))
    np.testing.assert_array_equal(out.mask, s.mask)
    assert not np.array_equal(out.image, s.image)


def test_augmentation_independent_of_draw_order():
    cfg = AugmentationConfig()
    s = _sample()
    indices = list(range(30))
    first = [augment(s, cfg, sample_rng(9, "v0", i, epoch=2)).image
             for i in indices]
    second = [augment(s, cfg, sample_rng(9, "v0", i, epoch=2)).image
              for i in reversed(indices)]
    for img_a, img_b in zip(first, reversed(second)):
        np.testing.assert_array_equal(img_a, img_b)


def test_augmentation_config_validation():
    with pytest.raises(ValueError):
        AugmentationConfig(p_set1=1.5)
    with pytest.raises(ValueError):
        AugmentationConfig(crop_min_area=0.0)


# -- synthetic phantoms -----------------------------------------------------------


def test_phantoms_deterministic_per_seed():
    a = make_synthetic_dataset(2, seed=7)
    b = make_synthetic_dataset(2, seed=7)
    for (ia, ma), (ib, mb) in zip(a, b):
        np.testing.assert_array_equal(ia.data, ib.data)
        np.testing.assert_array_equal(ma.data, mb.data)
    c = make_synthetic_dataset(1, seed=8)
    assert not np.array_equal(a[0][0].data, c[0][0].data)


def test_phantom_foreground_fraction_and_range():
    for img, mask in make_synthetic_dataset(4, seed=3):
        frac = mask.data.mean()
        assert 0.01 < frac < 0.30
        assert img.data.min() >= -1024.0 and img.data.max() <= 3072.0
        assert set(np.unique(mask.data)) == {0.0, 1.0}


def test_phantom_rejects_zero_volumes():
    with pytest.raises(ValueError):
        make_synthetic_dataset(0, seed=0)


# -- splitting ---------------------------------------------------------------------


def test_split_paper_counts():
    ids = [f"v{i}" for i in range(319)]
    split = split_dataset(ids, (113 / 319, 103 / 319, 103 / 319), seed=0)
    assert (len(split["train"]), len(split["valid"]), len(split["test"])) == \
        (113, 103, 103)
    assert sorted(split["train"] + split["valid"] + split["test"]) == sorted(ids)


def test_split_three_volumes_equal_fractions():
    split = split_dataset(["a", "b", "c"], (1 / 3, 1 / 3, 1 / 3), seed=1)
    assert all(len(split[p]) == 1 for p in ("train", "valid", "test"))


def test_split_deterministic():
    ids = [f"v{i}" for i in range(20)]
    a = split_dataset(ids, (0.5, 0.25, 0.25), seed=42)
    b = split_dataset(ids, (0.5, 0.25, 0.25), seed=42)
    assert a == b


def test_split_errors():
    with pytest.raises(ValueError, match="sum to 1"):
        split_dataset(["a", "b", "c"], (0.5, 0.2, 0.2), seed=0)
    with pytest.raises(ValueError, match="cannot cover"):
        split_dataset(["a", "b"], (1 / 3, 1 / 3, 1 / 3), seed=0)


# -- slice cache --------------------------------------------------------------------


def test_slice_cache_round_trip(tmp_path):
    img = Volume(RNG.normal(size=(6, 8, 8)) * 500)
    mask = Volume((RNG.random((6, 8, 8)) > 0.5).astype(float))
    samples = extract_slices(img, mask, "sagittal", volume_id="v1",
                             phase="valid", keep_empty=True, size=16)
    cache = tmp_path / "cache"
    save_slice_cache(samples, cache)
    loaded = load_slice_cache(cache, plane="sagittal", phase="valid")
    assert len(loaded) == len(samples)
    for a, b in zip(samples, loaded):
        np.testing.assert_allclose(b.image, a.image.astype(np.float32), rtol=1e-6)
        np.testing.assert_array_equal(b.mask, a.mask)
        assert (b.volume_id, b.plane, b.slice_index, b.phase) == \
            (a.volume_id, a.plane, a.slice_index, a.phase)
    assert load_slice_cache(cache, phase="test") == []


def test_dataset_dir_round_trip(tmp_path):
    pairs = make_synthetic_dataset(2, seed=5, shape=(16, 16, 16))
    root = tmp_path / "data"
    ids = write_dataset_dir(pairs, root)
    assert list_dataset_dir(root) == sorted(ids)
    img, mask = load_dataset_pair(root, ids[0])
    np.testing.assert_allclose(img.data, pairs[0][0].data.astype(np.float32),
                               rtol=1e-5, atol=2e-3)
    np.testing.assert_array_equal(mask.data, pairs[0][1].data)
