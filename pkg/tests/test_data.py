import numpy as np
import pytest
from scipy import ndimage

from hmmen.data import (SamplePair, SynthConfig, augment_train,
                        generate_synthetic, load_dataset, save_dataset, split,
                        weather_corrupt)
from hmmen.errors import ContractViolation, DataError


def toy_pair(sid="p0", size=32, seed=0):
    rng = np.random.default_rng(seed)
    rgb = rng.random((3, size, size)).astype(np.float32)
    ir = rng.random((1, size, size)).astype(np.float32)
    gt = (rng.random((1, size, size)) > 0.9).astype(np.uint8)
    return SamplePair(sid, rgb, ir, gt)


class TestDiskRoundTrip:
    def test_values_survive_to_8bit_precision(self, tmp_path):
        pairs = [toy_pair("a"), toy_pair("b", seed=1)]
        save_dataset(pairs, tmp_path, manifest={"note": 1})
        loaded = load_dataset(tmp_path)
        assert [p.id for p in loaded] == ["a", "b"]
        for orig, back in zip(pairs, loaded):
            assert np.abs(orig.rgb - back.rgb).max() <= 0.5 / 255 + 1e-6
            assert np.abs(orig.ir - back.ir).max() <= 0.5 / 255 + 1e-6
            assert np.array_equal(orig.gt, back.gt)
        assert (tmp_path / "manifest.json").exists()

    def test_orphan_triplet_detected(self, tmp_path):
        save_dataset([toy_pair("a")], tmp_path)
        (tmp_path / "ir" / "a.png").unlink()
        with pytest.raises(DataError, match="incomplete"):
            load_dataset(tmp_path)

    def test_missing_directory_detected(self, tmp_path):
        with pytest.raises(DataError, match="missing"):
            load_dataset(tmp_path)


class TestSplit:
    def test_sizes_400(self):
        pairs = [toy_pair(f"p{i}", size=32) for i in range(8)]
        # size arithmetic only needs ids, so fake a large list by reuse
        big = pairs * 50
        tr, va, te = split(big)
        assert (len(tr), len(va), len(te)) == (280, 40, 80)

    def test_sizes_10_train_absorbs_remainder(self):
        tr, va, te = split([toy_pair(f"p{i}") for i in range(10)])
        assert (len(tr), len(va), len(te)) == (7, 1, 2)

    def test_partition_is_disjoint_and_complete(self):
        pairs = [toy_pair(f"p{i}") for i in range(23)]
        tr, va, te = split(pairs, seed=3)
        ids = [p.id for p in tr + va + te]
        assert sorted(ids) == sorted(p.id for p in pairs)
        assert len(set(ids)) == len(ids)

    def test_seed_controls_assignment(self):
        pairs = [toy_pair(f"p{i}") for i in range(20)]
        a = [p.id for p in split(pairs, seed=0)[0]]
        b = [p.id for p in split(pairs, seed=0)[0]]
        c = [p.id for p in split(pairs, seed=1)[0]]
        assert a == b
        assert a != c

    def test_invalid_inputs(self):
        with pytest.raises(ContractViolation):
            split([])
        with pytest.raises(ContractViolation):
            split([toy_pair()], fractions=(0.5, 0.2, 0.2))


class TestAugment:
    def test_flip_is_joint_across_all_three(self):
        pair = toy_pair(seed=2)
        # find a seed whose first draw triggers the flip
        rng = np.random.default_rng(2)
        assert rng.random() < 0.5
        out = augment_train(pair, np.random.default_rng(2))
        assert np.array_equal(out.gt, pair.gt[:, :, ::-1])
        assert np.array_equal(out.ir, pair.ir[:, :, ::-1])

    def test_no_flip_leaves_ir_and_gt_untouched(self):
        pair = toy_pair(seed=3)
        rng = np.random.default_rng(0)
        assert rng.random() >= 0.5
        out = augment_train(pair, np.random.default_rng(0))
        assert np.array_equal(out.ir, pair.ir)
        assert np.array_equal(out.gt, pair.gt)
        # photometric jitter must touch only the RGB view
        assert not np.array_equal(out.rgb, pair.rgb)

    def test_rgb_stays_in_unit_range(self):
        pair = toy_pair(seed=4)
        for s in range(20):
            out = augment_train(pair, np.random.default_rng(s))
            assert out.rgb.min() >= 0.0 and out.rgb.max() <= 1.0


class TestWeather:
    def test_day_is_identity(self):
        rgb = np.random.default_rng(0).random((3, 8, 8)).astype(np.float32)
        out = weather_corrupt(rgb, "day", 0.7, np.random.default_rng(0))
        assert np.array_equal(out, rgb)

    def test_fog_blends_toward_white(self):
        rgb = np.full((3, 4, 4), 0.8, dtype=np.float32)
        out = weather_corrupt(rgb, "fog", 0.2, np.random.default_rng(0))
        # alpha = 0.3 + 0.5*0.2 = 0.4 -> 0.6*0.8 + 0.4 = 0.88
        assert np.allclose(out, 0.88, atol=1e-6)
        heavier = weather_corrupt(rgb, "fog", 0.8, np.random.default_rng(0))
        assert heavier.mean() > out.mean()

    def test_night_darkens_with_gamma(self):
        rgb = np.full((3, 4, 4), 0.8, dtype=np.float32)
        out = weather_corrupt(rgb, "night", 0.5, np.random.default_rng(0))
        # gamma = 2, scale = 0.75 -> 0.64 * 0.75 = 0.48
        assert np.allclose(out, 0.48, atol=1e-6)

    def test_snow_adds_white_specks_scaling_with_severity(self):
        rgb = np.zeros((3, 64, 64), dtype=np.float32)
        light = weather_corrupt(rgb, "snow", 0.0, np.random.default_rng(0))
        heavy = weather_corrupt(rgb, "snow", 1.0, np.random.default_rng(0))
        assert (light == 1.0).any()
        assert (heavy == 1.0).sum() > (light == 1.0).sum()
        assert not np.shares_memory(light, rgb)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ContractViolation):
            weather_corrupt(np.zeros((3, 4, 4)), "hail", 0.5,
                            np.random.default_rng(0))


class TestGenerator:
    def test_output_contracts(self):
        pairs, manifest = generate_synthetic(SynthConfig(num_images=4,
                                                         image_size=64, seed=2))
        assert len(pairs) == 4
        for p in pairs:
            assert p.rgb.shape == (3, 64, 64) and p.rgb.dtype == np.float32
            assert p.ir.shape == (1, 64, 64) and p.ir.dtype == np.float32
            assert p.gt.shape == (1, 64, 64) and p.gt.dtype == np.uint8
            assert p.rgb.min() >= 0 and p.rgb.max() <= 1
            assert p.ir.min() >= 0 and p.ir.max() <= 1
            assert set(np.unique(p.gt)) <= {0, 1}
        assert set(manifest["images"]) == {p.id for p in pairs}

    def test_positive_fraction_is_plausible_for_thin_lines(self):
        pairs, _ = generate_synthetic(SynthConfig(num_images=12, seed=1))
        for p in pairs:
            frac = float(p.gt.mean())
            assert 0.001 <= frac <= 0.08, f"{p.id}: positive fraction {frac}"

    def test_component_count_bounded_by_drawn_lines(self):
        pairs, manifest = generate_synthetic(SynthConfig(num_images=8, seed=3))
        for p in pairs:
            n_lines = manifest["images"][p.id]["num_lines"]
            assert 1 <= n_lines <= 4
            _, count = ndimage.label(p.gt[0], structure=np.ones((3, 3), int))
            assert 1 <= count <= n_lines  # curves can merge but not split

    def test_thermal_view_recovers_mask(self):
        # bright-line thermal rendering: a fixed threshold on the aligned IR
        # image must reproduce the ground truth closely
        cfg = SynthConfig(num_images=6, image_size=128, weather=("day",),
                          ir_misalignment_px=(0.0, 0.0),
                          line_width_px=(2.0, 3.0), seed=5)
        pairs, _ = generate_synthetic(cfg)
        for p in pairs:
            pred = p.ir[0] > 0.55
            gt = p.gt[0].astype(bool)
            iou = (pred & gt).sum() / (pred | gt).sum()
            assert iou >= 0.8, f"{p.id}: thermal/mask IoU {iou}"

    def test_manifest_draws_respect_config(self):
        cfg = SynthConfig(num_images=10, image_size=64,
                          ir_misalignment_px=(1.0, 3.0),
                          weather=("fog", "night"), seed=7)
        _, manifest = generate_synthetic(cfg)
        for rec in manifest["images"].values():
            assert rec["weather"] in ("fog", "night")
            assert 0.2 <= rec["severity"] <= 0.8
            mag = float(np.hypot(*rec["misalignment"]))
            assert 1.0 - 1e-9 <= mag <= 3.0 + 1e-9

    def test_deterministic_and_order_independent(self):
        cfg5 = SynthConfig(num_images=5, image_size=64, seed=11)
        cfg3 = SynthConfig(num_images=3, image_size=64, seed=11)
        a, _ = generate_synthetic(cfg5)
        b, _ = generate_synthetic(cfg5)
        c, _ = generate_synthetic(cfg3)
        for x, y in zip(a, b):
            assert np.array_equal(x.rgb, y.rgb)
            assert np.array_equal(x.ir, y.ir)
            assert np.array_equal(x.gt, y.gt)
        # per-image streams: the first 3 images do not depend on num_images
        for x, z in zip(a, c):
            assert np.array_equal(x.rgb, z.rgb)

    def test_config_validation(self):
        with pytest.raises(ContractViolation):
            SynthConfig(image_size=100)
        with pytest.raises(ContractViolation):
            SynthConfig(ir_misalignment_px=(-1.0, 2.0))
        with pytest.raises(ContractViolation):
            SynthConfig(weather=("day", "hail"))
