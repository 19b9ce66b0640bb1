"""HU volume -> fixed-grid unit-range tensor.

Pipeline order is fixed: optional mask crop, isotropic resampling, HU
clipping, normalization to [0, 1], centered pad/crop.

Geometry convention: voxel ``i`` along an axis with spacing ``s`` covers
``[i*s, (i+1)*s)`` mm, so its center sits at ``(i + 0.5) * s``. Resampling
keeps the grid origin (the low corner) fixed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, InvariantError, VolumeFormatError
from .volume_io import MaskVolume, Volume


@dataclass
class PreprocessConfig:
    target_spacing_mm: float = 0.625
    target_shape: tuple = (256, 256, 256)
    hu_low: float = -1000.0
    hu_high: float = 2000.0
    fill_value: float = None
    margin_mm: float = 10.0

    def __post_init__(self):
        self.target_shape = tuple(int(s) for s in self.target_shape)
        if self.fill_value is None:
            self.fill_value = self.hu_low

    def validate(self, prefix="preprocess"):
        if not (self.target_spacing_mm > 0):
            raise ConfigError(f"{prefix}.target_spacing_mm", "must be > 0")
        if len(self.target_shape) != 3 or any(s < 1 for s in self.target_shape):
            raise ConfigError(f"{prefix}.target_shape", "must be 3 integers >= 1")
        if not (self.hu_low < self.hu_high):
            raise ConfigError(f"{prefix}.hu_low", "hu_low must be < hu_high")
        if self.margin_mm < 0:
            raise ConfigError(f"{prefix}.margin_mm", "must be >= 0")

    def to_dict(self):
        d = asdict(self)
        d["target_shape"] = list(self.target_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def desk_config(**overrides):
    """32^3 grid at 5 mm; every test and demo runs on CPU in seconds."""
    kw = dict(target_spacing_mm=5.0, target_shape=(32, 32, 32))
    kw.update(overrides)
    return PreprocessConfig(**kw)


def paper_config(**overrides):
    return PreprocessConfig(**overrides)


PROFILES = {"desk": desk_config, "paper": paper_config}


# -- interpolation -----------------------------------------------------------

def _interp_axis(data, coords, axis):
    """Linear interpolation along one axis at fractional indices, edge-clamped."""
    n = data.shape[axis]
    c = np.clip(np.asarray(coords, dtype=np.float64), 0.0, n - 1)
    i0 = np.floor(c).astype(np.intp)
    i1 = np.minimum(i0 + 1, n - 1)
    w = c - i0
    shape = [1] * data.ndim
    shape[axis] = -1
    w = w.reshape(shape)
    lo = np.take(data, i0, axis=axis)
    hi = np.take(data, i1, axis=axis)
    return lo * (1.0 - w) + hi * w


def resample_separable(data, coords_per_axis):
    """Trilinear resampling on a tensor-product grid of source indices.

    ``coords_per_axis`` holds one 1-D array of (fractional) source indices
    per axis. Applying 1-D linear interpolation axis by axis is exactly
    trilinear interpolation. Out-of-range coordinates clamp to the edge.
    """
    out = np.asarray(data, dtype=np.float64)
    for axis, coords in enumerate(coords_per_axis):
        out = _interp_axis(out, coords, axis)
    return out


def source_indices(n_out, out_spacing, in_spacing):
    """Fractional source indices of output voxel centers (shared origin)."""
    j = np.arange(n_out, dtype=np.float64)
    return (j + 0.5) * out_spacing / in_spacing - 0.5


def _round_half_up(x):
    return int(math.floor(x + 0.5))


def resample_isotropic(volume: Volume, target_spacing_mm: float) -> Volume:
    t = float(target_spacing_mm)
    if not (t > 0):
        raise ConfigError("target_spacing_mm", "must be > 0")
    shape = tuple(
        max(1, _round_half_up(n * s / t)) for n, s in zip(volume.shape, volume.spacing)
    )
    coords = [source_indices(m, t, s) for m, s in zip(shape, volume.spacing)]
    out = resample_separable(volume.voxels, coords)
    return volume.with_data(out.astype(np.float32), spacing=(t, t, t), dtype="f32")


def clip_intensities(volume: Volume, hu_low=-1000.0, hu_high=2000.0) -> Volume:
    if not hu_low < hu_high:
        raise ConfigError("hu_low", f"hu_low ({hu_low}) must be < hu_high ({hu_high})")
    if volume.unit != "HU":
        raise InvariantError("clip_intensities expects a HU volume", field="unit")
    out = np.clip(volume.voxels.astype(np.float32), hu_low, hu_high)
    return volume.with_data(out, dtype="f32")


def normalize_values(values, hu_low=-1000.0, hu_high=2000.0):
    """``(v - lo) / (hi - lo)`` in float64; raises if any value is outside [lo, hi]."""
    v = np.asarray(values, dtype=np.float64)
    if not hu_low < hu_high:
        raise ConfigError("hu_low", f"hu_low ({hu_low}) must be < hu_high ({hu_high})")
    if v.size and (v.min() < hu_low or v.max() > hu_high):
        raise InvariantError(
            f"values outside clip range [{hu_low}, {hu_high}]; clip before normalizing",
            field="voxels",
        )
    return (v - hu_low) / (hu_high - hu_low)


def normalize_unit(volume: Volume, hu_low=-1000.0, hu_high=2000.0) -> Volume:
    if volume.unit != "HU":
        raise InvariantError("normalize_unit expects a HU volume", field="unit")
    out = normalize_values(volume.voxels, hu_low, hu_high)
    return volume.with_data(np.clip(out, 0.0, 1.0).astype(np.float32), unit="normalized", dtype="f32")


def center_window(n_in, n_out):
    """``(src_start, dst_start, length)`` of the centered overlap along one axis."""
    if n_in >= n_out:
        return (n_in - n_out) // 2, 0, n_out
    return 0, (n_out - n_in) // 2, n_in


def pad_or_crop_array(data, target_shape, fill_value):
    target_shape = tuple(int(s) for s in target_shape)
    out = np.full(target_shape, fill_value, dtype=data.dtype)
    src, dst = [], []
    for n_in, n_out in zip(data.shape, target_shape):
        s0, d0, length = center_window(n_in, n_out)
        src.append(slice(s0, s0 + length))
        dst.append(slice(d0, d0 + length))
    out[tuple(dst)] = data[tuple(src)]
    return out


def pad_or_crop(volume: Volume, target_shape, fill_value) -> Volume:
    """Centered crop/pad: the low side gets ``floor(excess / 2)``."""
    if len(tuple(target_shape)) != 3 or any(int(s) < 1 for s in target_shape):
        raise ConfigError("target_shape", "must be 3 integers >= 1")
    out = pad_or_crop_array(volume.voxels, target_shape, fill_value)
    return volume.with_data(out, dtype=volume.header.dtype)


def mask_bbox(mask):
    """Inclusive-exclusive bounding box ``[(lo, hi), ...]`` of a boolean grid."""
    idx = np.nonzero(mask)
    if idx[0].size == 0:
        raise InvariantError("mask union is empty", field="masks")
    return [(int(i.min()), int(i.max()) + 1) for i in idx]


def crop_to_masks(volume: Volume, masks, margin_mm: float = 10.0) -> Volume:
    """Crop to the union bounding box of the masks plus a margin, clamped."""
    if not masks:
        raise InvariantError("crop_to_masks needs at least one mask", field="masks")
    union = np.zeros(volume.shape, dtype=bool)
    for m in masks:
        if tuple(m.shape) != tuple(volume.shape) or not np.allclose(m.spacing, volume.spacing):
            raise VolumeFormatError(
                f"mask grid {m.shape} @ {m.spacing} does not match volume grid "
                f"{volume.shape} @ {volume.spacing}",
                field="masks",
            )
        union |= m.voxels.astype(bool)
    box = mask_bbox(union)
    sl = []
    for (lo, hi), n, s in zip(box, volume.shape, volume.spacing):
        pad = math.ceil(margin_mm / s - 1e-9) if margin_mm > 0 else 0
        sl.append(slice(max(0, lo - pad), min(n, hi + pad)))
    return volume.with_data(volume.voxels[tuple(sl)].copy(), dtype=volume.header.dtype)


def preprocess_pipeline(volume: Volume, config: PreprocessConfig, masks=None) -> Volume:
    """crop (if masks) -> resample -> clip -> normalize -> pad/crop."""
    config.validate()
    if volume.unit != "HU":
        raise InvariantError("preprocess_pipeline expects a HU volume", field="unit")
    v = volume
    if masks:
        v = crop_to_masks(v, masks, config.margin_mm)
    v = resample_isotropic(v, config.target_spacing_mm)
    v = clip_intensities(v, config.hu_low, config.hu_high)
    v = normalize_unit(v, config.hu_low, config.hu_high)
    fill = float(normalize_values(
        np.clip(config.fill_value, config.hu_low, config.hu_high), config.hu_low, config.hu_high
    ))
    return pad_or_crop(v, config.target_shape, fill)


def map_mask_to_grid(mask: MaskVolume, config: PreprocessConfig, crop_masks=None) -> np.ndarray:
    """Carry a mask through the pipeline geometry; returns a boolean grid.

    Used to locate known structures (e.g. a phantom lesion) in preprocessed
    coordinates. Interpolated occupancy is thresholded at 0.5.
    """
    field = Volume.from_array(mask.voxels.astype(np.float32), mask.spacing)
    if crop_masks:
        field = crop_to_masks(field, crop_masks, config.margin_mm)
    field = resample_isotropic(field, config.target_spacing_mm)
    out = pad_or_crop_array(field.voxels, config.target_shape, 0.0)
    return out >= 0.5
