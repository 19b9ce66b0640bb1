import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvrct.errors import ConfigError, InvariantError, VolumeFormatError
from pvrct.preprocess import (
    PreprocessConfig,
    clip_intensities,
    crop_to_masks,
    desk_config,
    map_mask_to_grid,
    normalize_unit,
    normalize_values,
    pad_or_crop,
    preprocess_pipeline,
    resample_isotropic,
)
from pvrct.synthgen import desk_spec, generate_phantom
from pvrct.volume_io import MaskVolume, Volume


def hu(data, spacing=(1.0, 1.0, 1.0)):
    return Volume.from_array(np.asarray(data, dtype=np.float32), spacing, unit="HU", dtype="f32")


def centers(n, s):
    return (np.arange(n) + 0.5) * s


class TestResample:
    def test_identity_spacing_is_voxel_exact(self):
        data = np.random.default_rng(0).normal(0, 300, size=(7, 5, 6)).astype(np.float32)
        out = resample_isotropic(hu(data, (0.625,) * 3), 0.625)
        assert out.shape == data.shape
        assert np.array_equal(out.voxels, data)

    def test_constant_volume(self):
        out = resample_isotropic(hu(np.full((9, 7, 5), 400.0), (0.5, 0.8, 1.25)), 0.625)
        assert np.all(out.voxels == 400.0)

    def test_output_shape_rounds(self):
        out = resample_isotropic(hu(np.zeros((10, 10, 5)), (0.5, 0.5, 0.625)), 0.625)
        assert out.shape == (8, 8, 5)
        assert out.spacing == (0.625, 0.625, 0.625)

    def test_ramp_downsample_2x(self):
        s = 1.0
        x = centers(20, s)
        data = np.broadcast_to(x[:, None, None], (20, 6, 6))
        out = resample_isotropic(hu(data, (s, s, s)), 2.0)
        expected = centers(10, 2.0)
        # samples at 1.0/3.0/... mm fall strictly between source centers
        np.testing.assert_allclose(out.voxels[1:-1, 2, 2], expected[1:-1], rtol=1e-4)

    @settings(max_examples=30, deadline=None)
    @given(
        st.tuples(*[st.floats(0.4, 2.0)] * 3),
        st.floats(0.3, 2.5),
        st.tuples(*[st.floats(-50, 50)] * 4),
    )
    def test_affine_field_reproduced_in_interior(self, spacing, target, coef):
        shape = (12, 10, 11)
        x, y, z = np.meshgrid(*[centers(n, s) for n, s in zip(shape, spacing)], indexing="ij")
        a, b, c, d = coef
        field = 1000.0 + a + b * x + c * y + d * z
        out = resample_isotropic(hu(field, spacing), target)
        ox, oy, oz = np.meshgrid(*[centers(n, target) for n in out.shape], indexing="ij")
        expect = 1000.0 + a + b * ox + c * oy + d * oz
        ext = [n * s for n, s in zip(shape, spacing)]
        inside = np.ones(out.shape, dtype=bool)
        for coord, e, s in zip((ox, oy, oz), ext, spacing):
            inside &= (coord >= 0.5 * s) & (coord <= e - 0.5 * s)
        if inside.any():
            rel = np.abs(out.voxels[inside] - expect[inside]) / np.abs(expect[inside])
            assert rel.max() <= 1e-4

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.3, 3.0))
    def test_bounds_preserved(self, seed, target):
        data = np.random.default_rng(seed).uniform(-1000, 2000, size=(6, 5, 7))
        out = resample_isotropic(hu(data, (1.0, 1.3, 0.7)), target).voxels
        assert out.min() >= np.float32(data.min()) and out.max() <= np.float32(data.max())

    def test_bad_target(self):
        with pytest.raises(ConfigError):
            resample_isotropic(hu(np.zeros((2, 2, 2))), 0.0)


class TestClipNormalize:
    def test_clip(self):
        out = clip_intensities(hu(np.array([3000, -1200, 500]).reshape(3, 1, 1)))
        assert out.voxels.ravel().tolist() == [2000, -1000, 500]

    def test_clip_idempotent(self):
        v = hu(np.random.default_rng(1).uniform(-3000, 4000, size=(4, 4, 4)))
        once = clip_intensities(v)
        assert np.array_equal(clip_intensities(once).voxels, once.voxels)

    def test_clip_bad_range(self):
        with pytest.raises(ConfigError):
            clip_intensities(hu(np.zeros((1, 1, 1))), 10, 10)

    def test_normalize_values(self):
        out = normalize_values(np.array([-1000.0, 2000.0, 500.0, 0.0]))
        assert out[0] == 0.0 and out[1] == 1.0 and out[2] == 0.5
        assert abs(out[3] - 1.0 / 3.0) <= 1e-9

    def test_normalize_volume(self):
        out = normalize_unit(hu(np.array([-1000.0, 2000.0, 500.0]).reshape(3, 1, 1)))
        assert out.unit == "normalized"
        assert out.voxels.ravel().tolist() == [0.0, 1.0, 0.5]

    def test_normalize_rejects_unclipped(self):
        with pytest.raises(InvariantError):
            normalize_unit(hu(np.full((1, 1, 1), 2500.0)))


class TestPadCrop:
    def test_crop_300_to_256(self):
        data = np.arange(300, dtype=np.float32)[:, None, None] * np.ones((1, 3, 3), np.float32)
        out = pad_or_crop(hu(data), (256, 3, 3), -1000)
        assert out.voxels[0, 0, 0] == 22 and out.voxels[-1, 0, 0] == 277

    def test_pad_200_to_256(self):
        out = pad_or_crop(hu(np.ones((200, 1, 1))), (256, 1, 1), -1000.0).voxels[:, 0, 0]
        assert np.all(out[:28] == -1000) and np.all(out[-28:] == -1000)
        assert np.all(out[28:228] == 1)

    def test_identity(self):
        data = np.random.default_rng(0).normal(size=(3, 4, 5))
        assert np.array_equal(pad_or_crop(hu(data), (3, 4, 5), 0).voxels, data.astype(np.float32))

    @settings(max_examples=40, deadline=None)
    @given(st.tuples(*[st.integers(1, 6)] * 3), st.tuples(*[st.integers(0, 5)] * 3))
    def test_pad_then_crop_back(self, shape, extra):
        data = np.random.default_rng(0).normal(size=shape).astype(np.float32)
        big = tuple(n + e for n, e in zip(shape, extra))
        back = pad_or_crop(pad_or_crop(hu(data), big, -5.0), shape, 0.0)
        assert np.array_equal(back.voxels, data)


class TestCropToMasks:
    def _mask(self, shape, idx):
        m = np.zeros(shape, dtype=bool)
        m[idx] = True
        return MaskVolume.from_bool(m, (1.0, 1.0, 1.0))

    def test_full_mask_identity(self):
        v = hu(np.random.default_rng(0).normal(size=(4, 5, 6)))
        out = crop_to_masks(v, [self._mask((4, 5, 6), (slice(None),) * 3)], margin_mm=0)
        assert np.array_equal(out.voxels, v.voxels)

    def test_single_voxel(self):
        v = hu(np.arange(60).reshape(3, 4, 5))
        out = crop_to_masks(v, [self._mask((3, 4, 5), (1, 2, 3))], margin_mm=0)
        assert out.shape == (1, 1, 1) and out.voxels.item() == v.voxels[1, 2, 3]

    def test_union_hull_and_margin(self):
        v = hu(np.zeros((10, 10, 10)))
        a = self._mask((10, 10, 10), (2, 2, 2))
        b = self._mask((10, 10, 10), (5, 6, 7))
        assert crop_to_masks(v, [a, b], margin_mm=0).shape == (4, 5, 6)
        # 1.5 mm at 1 mm spacing -> 2 voxels per side, clamped at the high end
        assert crop_to_masks(v, [a, b], margin_mm=1.5).shape == (8, 9, 10)

    def test_errors(self):
        v = hu(np.zeros((3, 3, 3)))
        with pytest.raises(InvariantError):
            crop_to_masks(v, [MaskVolume.from_bool(np.zeros((3, 3, 3), bool), (1, 1, 1))])
        with pytest.raises(VolumeFormatError):
            crop_to_masks(v, [MaskVolume.from_bool(np.ones((3, 3, 2), bool), (1, 1, 1))])


class TestPipeline:
    def test_phantom_desk(self):
        vol, heart, aorta, _ = generate_phantom(desk_spec(seed=3))
        out = preprocess_pipeline(vol, desk_config())
        assert out.shape == (32, 32, 32) and out.unit == "normalized"
        assert 0.0 <= out.voxels.min() and out.voxels.max() <= 1.0
        cropped = preprocess_pipeline(vol, desk_config(), masks=[heart, aorta])
        assert cropped.shape == (32, 32, 32)

    def test_paper_profile_shape(self):
        vol = hu(np.zeros((40, 40, 32)), (4.0, 4.0, 5.0))
        out = preprocess_pipeline(vol, PreprocessConfig())
        assert out.shape == (256, 256, 256)
        assert out.voxels.min() >= 0 and out.voxels.max() <= 1

    def test_fixpoint(self):
        data = np.random.default_rng(0).uniform(-1000, 2000, size=(32, 32, 32))
        v = hu(data, (5.0, 5.0, 5.0))
        out = preprocess_pipeline(v, desk_config())
        assert np.array_equal(out.voxels, normalize_unit(v).voxels)

    def test_deterministic(self):
        vol, *_ = generate_phantom(desk_spec(seed=1))
        a = preprocess_pipeline(vol, desk_config())
        b = preprocess_pipeline(vol, desk_config())
        assert a.voxels.tobytes() == b.voxels.tobytes()

    def test_padding_is_normalized_air(self):
        out = preprocess_pipeline(hu(np.full((2, 2, 2), 2000.0), (5, 5, 5)), desk_config())
        assert out.voxels[0, 0, 0] == 0.0 and out.voxels[16, 16, 16] == 1.0

    def test_rejects_normalized_input(self):
        v = Volume.from_array(np.zeros((2, 2, 2), np.float32), (1, 1, 1), unit="normalized")
        with pytest.raises(InvariantError):
            preprocess_pipeline(v, desk_config())

    def test_config_validation(self):
        with pytest.raises(ConfigError, match="hu_low"):
            PreprocessConfig(hu_low=5, hu_high=5).validate()
        with pytest.raises(ConfigError, match="target_shape"):
            PreprocessConfig(target_shape=(0, 1, 1)).validate()

    def test_mask_mapping_follows_geometry(self):
        m = np.zeros((40, 40, 32), bool)
        m[10:20, 10:20, 8:16] = True
        grid = map_mask_to_grid(MaskVolume.from_bool(m, (4, 4, 5)), desk_config())
        idx = np.argwhere(grid)
        # 40..80 mm -> 5 mm voxels 8..15
        assert idx[:, 0].min() == 8 and idx[:, 0].max() == 15
