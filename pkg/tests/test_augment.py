import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvrct.augment import (
    AugmentConfig,
    RotationSpec,
    apply_rotation,
    augment_array,
    rotate_array,
    rotation_matrix,
    sample_rotation,
)
from pvrct.errors import ConfigError
from pvrct.preprocess import resample_isotropic
from pvrct.volume_io import Volume


def blob(n=24, sigma=4.0):
    g = np.indices((n, n, n)) - (n - 1) / 2.0
    return np.exp(-(g ** 2).sum(0) / (2 * sigma ** 2)) * 1000.0


class TestSampling:
    def test_defaults_cover_range_signs_axes(self):
        rng = np.random.default_rng(0)
        specs = [sample_rotation(rng, AugmentConfig()) for _ in range(1000)]
        mags = np.abs([s.angle_deg for s in specs])
        assert mags.min() >= 10 and mags.max() <= 20
        assert {s.axis for s in specs} == {"x", "y", "z"}
        assert any(s.angle_deg > 0 for s in specs) and any(s.angle_deg < 0 for s in specs)

    def test_degenerate_interval(self):
        rng = np.random.default_rng(1)
        cfg = AugmentConfig(15, 15)
        assert all(abs(sample_rotation(rng, cfg).angle_deg) == 15 for _ in range(50))

    def test_same_seed_same_sequence(self):
        a = [sample_rotation(np.random.default_rng(5), AugmentConfig()) for _ in range(1)]
        b = [sample_rotation(np.random.default_rng(5), AugmentConfig()) for _ in range(1)]
        assert a == b

    def test_axis_frequencies_uniform(self):
        rng = np.random.default_rng(2)
        n = 10_000
        axes = [sample_rotation(rng, AugmentConfig()).axis for _ in range(n)]
        sigma = np.sqrt(n * (1 / 3) * (2 / 3))
        for a in "xyz":
            assert abs(axes.count(a) - n / 3) < 3 * sigma

    def test_validation(self):
        with pytest.raises(ConfigError):
            AugmentConfig(20, 10).validate()


class TestRotation:
    def test_zero_angle_identity(self):
        v = Volume.from_array(np.random.default_rng(0).uniform(size=(4, 5, 6)).astype(np.float32), (1, 1, 1), "normalized")
        out = apply_rotation(v, RotationSpec("z", 0.0), 0.0)
        assert np.array_equal(out.voxels, v.voxels)

    @pytest.mark.parametrize("axis", ["x", "y", "z"])
    @pytest.mark.parametrize("turns", [1, 2, 3])
    def test_quarter_turns_match_index_permutation(self, axis, turns):
        rng = np.random.default_rng(turns)
        n = 7
        data = rng.normal(size=(n, n, n))
        out = rotate_array(data, (1, 1, 1), rotation_matrix(axis, 90 * turns), fill_value=-9.0)
        # rot90 in the plane of the two other axes, from first to second
        plane = {"x": (1, 2), "y": (2, 0), "z": (0, 1)}[axis]
        assert np.array_equal(out, np.rot90(data, turns, axes=plane))

    def test_single_hot_voxel_moves(self):
        data = np.zeros((5, 5, 5))
        data[3, 1, 2] = 1.0
        out = rotate_array(data, (1, 1, 1), rotation_matrix("z", 90), 0.0)
        # about center (2, 2): (x, y) = (1, -1) -> (1, 1)
        assert out[3, 3, 2] == 1.0 and out.sum() == 1.0

    def test_round_trip_error_below_two_resampling_passes(self):
        b = blob()
        inner = (slice(4, -4),) * 3
        v = Volume.from_array(b.astype(np.float32), (1, 1, 1))
        twice = resample_isotropic(resample_isotropic(v, 1.5), 1.0).voxels
        reference = np.abs(twice - b)[inner].mean()
        for axis in "xyz":
            there = rotate_array(b, (1, 1, 1), rotation_matrix(axis, 15), 0.0)
            back = rotate_array(there, (1, 1, 1), rotation_matrix(axis, -15), 0.0)
            assert np.abs(back - b)[inner].mean() < 2 * reference

    def test_out_of_domain_takes_fill(self):
        data = np.ones((9, 9, 3))
        out = rotate_array(data, (1, 1, 1), rotation_matrix("x", 20), fill_value=-7.0)
        assert np.any(out == -7.0)
        assert set(np.unique(out)) <= {-7.0} | set(np.unique(out[(out != -7.0)]))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from("xyz"), st.floats(-30, 30), st.floats(-2, 2))
    def test_convexity(self, seed, axis, angle, fill):
        data = np.random.default_rng(seed).uniform(-1, 1, size=(6, 7, 5))
        out = rotate_array(data, (1.0, 0.8, 1.5), rotation_matrix(axis, angle), fill)
        assert out.min() >= min(data.min(), fill) - 1e-12
        assert out.max() <= max(data.max(), fill) + 1e-12

    def test_shape_spacing_kept(self):
        v = Volume.from_array(np.zeros((4, 6, 8), np.float32), (0.5, 1, 2), "normalized")
        out = apply_rotation(v, RotationSpec("y", 12.0), 0.0)
        assert out.shape == v.shape and out.spacing == v.spacing

    def test_bad_axis(self):
        with pytest.raises(ValueError):
            rotation_matrix("w", 10)

    def test_matrix_orthonormal(self):
        for axis in "xyz":
            r = rotation_matrix(axis, 17.0)
            np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-14)
            assert np.linalg.det(r) == pytest.approx(1.0)


class TestAugmentArray:
    def test_disabled_returns_input(self):
        data = np.ones((4, 4, 4), np.float32)
        assert augment_array(data, (1, 1, 1), np.random.default_rng(0), AugmentConfig(enabled=False)) is data

    def test_deterministic(self):
        data = blob(12).astype(np.float32)
        a = augment_array(data, (1, 1, 1), np.random.default_rng(3), AugmentConfig())
        b = augment_array(data, (1, 1, 1), np.random.default_rng(3), AugmentConfig())
        assert a.tobytes() == b.tobytes() and a.dtype == np.float32

    def test_multi_axis(self):
        data = blob(12).astype(np.float32)
        out = augment_array(data, (1, 1, 1), np.random.default_rng(3), AugmentConfig(multi_axis=True))
        assert out.shape == data.shape and not np.array_equal(out, data)
