"""3D Grad-CAM heatmaps and slice exports.

The score differentiated is the raw logit of the single-output head.
Channel weights are the spatial mean of the logit gradient; the map is
``ReLU(sum_k w_k A_k)`` at the layer's resolution, trilinearly upsampled to
the input grid (voxel-center aligned, edge-clamped) and min-max scaled.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .nn import Conv3d
from .preprocess import resample_separable, source_indices
from .volume_io import Volume, write_volume


@dataclass
class Heatmap:
    grid: np.ndarray
    source_layer: str
    layer_map: np.ndarray = None
    logit: float = None

    @property
    def shape(self):
        return self.grid.shape


def upsample_map(layer_map, out_shape):
    """Trilinear upsampling with voxel centers aligned across the two grids."""
    coords = [source_indices(n_out, n_in / n_out, 1.0) for n_in, n_out in zip(layer_map.shape, out_shape)]
    return resample_separable(layer_map, coords)


def minmax_normalize(m):
    """Scale to [0, 1]; an identically-zero (or constant) map becomes all zeros."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = float(m.min()), float(m.max())
    if not np.isfinite(hi) or hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return np.zeros_like(m)
    return (m - lo) / (hi - lo)


def cam_from_activations(activation, gradient):
    """Layer-resolution Grad-CAM map from ``(K, d, h, w)`` activation and gradient."""
    if activation.ndim != 4:
        raise ValueError("activation must be (channels, d, h, w)")
    weights = gradient.reshape(gradient.shape[0], -1).mean(axis=1)
    cam = np.tensordot(weights, activation.astype(np.float64), axes=([0], [0]))
    return np.maximum(cam, 0.0)


def gradcam3d(model, volume, layer_id=None) -> Heatmap:
    """Grad-CAM for one input grid (``(D, H, W)`` array, ``(1, 1, D, H, W)`` or Volume)."""
    data = volume.voxels if isinstance(volume, Volume) else np.asarray(volume)
    x = np.asarray(data, dtype=np.float32).reshape((1, 1) + tuple(model.config.input_shape))
    layer_id = layer_id or model.default_cam_layer
    try:
        layer = model.get_module(layer_id)
    except KeyError:
        raise KeyError(f"unknown layer_id {layer_id!r}; conv layers: {model.conv_layer_names()}") from None
    if not isinstance(layer, Conv3d):
        raise ValueError(f"layer {layer_id!r} is not a convolutional layer")
    layer.retain = True
    try:
        model.eval()
        logit = model.forward(x)
        model.zero_grad()
        model.backward(np.ones_like(logit))
        act, grad = layer.retained_output[0], layer.retained_grad[0]
    finally:
        layer.retain = False
        layer.retained_output = layer.retained_grad = None
    if act.shape[1:] == (1, 1, 1) and min(x.shape[2:]) > 1:
        raise ValueError(f"layer {layer_id!r} has no spatial extent")
    cam = cam_from_activations(act, grad)
    up = np.maximum(upsample_map(cam, x.shape[2:]), 0.0)
    return Heatmap(minmax_normalize(up), layer_id, cam, float(logit[0, 0]))


def to_uint8(values, lo, hi):
    v = (np.asarray(values, dtype=np.float64) - lo) / (hi - lo)
    return np.clip(np.rint(v * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, image_u8):
    """Binary 8-bit grayscale PGM (``P5``)."""
    Image.fromarray(np.ascontiguousarray(image_u8), mode="L").save(path, format="PPM")


def export_overlay(volume: Volume, heatmap: Heatmap, out_dir, slice_stride: int = 8):
    """Write every ``slice_stride``-th axial slice as a (CT, heatmap) PGM pair
    plus the full heatmap as a normalized volume. Returns the written paths."""
    if tuple(volume.shape) != tuple(heatmap.shape):
        raise ValueError(f"volume shape {volume.shape} != heatmap shape {heatmap.shape}")
    if slice_stride < 1:
        raise ValueError("slice_stride must be >= 1")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    lo, hi = (0.0, 1.0) if volume.unit == "normalized" else (-1000.0, 2000.0)
    written = []
    nz = volume.shape[2]
    width = max(3, len(str(nz - 1)))
    for z in range(0, nz, slice_stride):
        # rows = y, columns = x
        ct = to_uint8(volume.voxels[:, :, z].T, lo, hi)
        cam = to_uint8(heatmap.grid[:, :, z].T, 0.0, 1.0)
        for tag, img in (("ct", ct), ("cam", cam)):
            p = out_dir / f"slice_{z:0{width}d}_{tag}.pgm"
            write_pgm(p, img)
            written.append(p)
    hv = Volume.from_array(np.clip(heatmap.grid, 0, 1).astype(np.float32), volume.spacing, unit="normalized")
    written.append(write_volume(hv, out_dir / "heatmap"))
    return written
