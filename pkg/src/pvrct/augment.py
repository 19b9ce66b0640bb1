"""Random small rotations of training volumes."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .volume_io import Volume

AXES = ("x", "y", "z")


@dataclass
class AugmentConfig:
    angle_min_deg: float = 10.0
    angle_max_deg: float = 20.0
    fill_value: float = 0.0
    enabled: bool = True
    # one random principal axis per sample; True composes rotations about all three
    multi_axis: bool = False

    def validate(self, prefix="augment"):
        if not (0 <= self.angle_min_deg <= self.angle_max_deg):
            raise ConfigError(f"{prefix}.angle_min_deg", "need 0 <= angle_min_deg <= angle_max_deg")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class RotationSpec:
    axis: str
    angle_deg: float
    # None means the geometric center of whatever volume it is applied to
    center: tuple = None


def sample_rotation(rng: np.random.Generator, config: AugmentConfig) -> RotationSpec:
    """Uniform axis, uniform magnitude in [min, max], uniform sign."""
    axis = AXES[int(rng.integers(3))]
    mag = float(rng.uniform(config.angle_min_deg, config.angle_max_deg))
    sign = 1.0 if rng.integers(2) else -1.0
    return RotationSpec(axis, sign * mag)


def rotation_matrix(axis: str, angle_deg: float) -> np.ndarray:
    """Right-handed rotation about a principal axis.

    Entries within 1e-12 of -1, 0 or 1 are snapped so quarter turns are exact.
    """
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    t = np.deg2rad(angle_deg)
    c, s = np.cos(t), np.sin(t)
    if axis == "x":
        r = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    elif axis == "y":
        r = np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])
    else:
        r = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])
    r = np.asarray(r, dtype=np.float64)
    for v in (-1.0, 0.0, 1.0):
        r[np.abs(r - v) < 1e-12] = v
    return r


def rotate_array(data, spacing, matrix, fill_value, center=None):
    """Inverse-map resampling of ``data`` under rotation ``matrix`` (physical mm).

    Output voxel p samples the input at ``R^T (p - c) + c``. Samples whose
    preimage falls outside the input grid take ``fill_value``.
    """
    data = np.asarray(data, dtype=np.float64)
    shape = np.array(data.shape)
    spacing = np.asarray(spacing, dtype=np.float64)
    c_idx = (shape - 1) / 2.0 if center is None else np.asarray(center, dtype=np.float64)
    grid = np.indices(data.shape, dtype=np.float64).reshape(3, -1)
    phys = (grid - c_idx[:, None]) * spacing[:, None]
    src = (matrix.T @ phys) / spacing[:, None] + c_idx[:, None]
    near = np.rint(src)
    snap = np.abs(src - near) < 1e-9
    src[snap] = near[snap]
    out = ndimage.map_coordinates(data, src, order=1, mode="nearest", prefilter=False)
    outside = np.any((src < 0) | (src > (shape - 1)[:, None]), axis=0)
    out[outside] = fill_value
    return out.reshape(data.shape)


def apply_rotation(volume: Volume, spec: RotationSpec, fill_value: float) -> Volume:
    if spec.angle_deg == 0:
        return volume.with_data(volume.voxels.copy(), dtype=volume.header.dtype)
    r = rotation_matrix(spec.axis, spec.angle_deg)
    out = rotate_array(volume.voxels, volume.spacing, r, fill_value, spec.center)
    if volume.unit == "normalized":
        out = np.clip(out, 0.0, 1.0)
    return volume.with_data(out.astype(np.float32), dtype="f32")


def sample_multi_rotation(rng, config):
    """Three rotations (x, y, z) with independently sampled signed angles."""
    specs = []
    for axis in AXES:
        mag = float(rng.uniform(config.angle_min_deg, config.angle_max_deg))
        sign = 1.0 if rng.integers(2) else -1.0
        specs.append(RotationSpec(axis, sign * mag))
    return specs


def augment_array(data, spacing, rng, config: AugmentConfig):
    """Augment one training grid; returns it unchanged when disabled."""
    if not config.enabled:
        return data
    if config.multi_axis:
        m = np.eye(3)
        for spec in sample_multi_rotation(rng, config):
            m = rotation_matrix(spec.axis, spec.angle_deg) @ m
    else:
        spec = sample_rotation(rng, config)
        m = rotation_matrix(spec.axis, spec.angle_deg)
    out = rotate_array(data, spacing, m, config.fill_value)
    return out.astype(data.dtype)
