"""Labeled synthetic thoracic phantoms.

Each phantom is an air background with a soft-tissue thorax, an ellipsoidal
heart (myocardium around a contrast blood pool), and a cylindrical aorta
rising from the top of the heart. An annulus ring sits where the aorta
meets the heart. Calcification on the ring is either one contiguous arc on
one side (eccentric, label 1), the same total arc split into four evenly
spaced segments (symmetric, label 0), or absent (label 0).

All geometry is drawn in millimetres from the phantom's own seed, in a fixed
order that does not depend on the lesion settings, so a phantom and its
lesion-free twin share every nuisance parameter.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .volume_io import (
    DatasetManifest,
    MaskVolume,
    PatientRecord,
    Volume,
    write_manifest,
    write_volume,
)

HU_MIN, HU_MAX = -1000.0, 2000.0
RING_HALF_WIDTH_MM = 5.0
RING_HALF_HEIGHT_MM = 7.5
COLLAR_MM = 4.0
SYMMETRIC_SEGMENTS = 4


@dataclass(frozen=True)
class LesionSpec:
    present: bool = True
    arc_extent_deg: float = 180.0
    # > 0.5: one contiguous arc; <= 0.5: split into symmetric segments
    eccentricity: float = 1.0

    @property
    def eccentric(self):
        return self.present and self.eccentricity > 0.5


@dataclass(frozen=True)
class PhantomSpec:
    shape: tuple = (40, 40, 32)
    spacing: tuple = (4.0, 4.0, 5.0)
    background_hu: float = -1000.0
    soft_tissue_hu: float = 40.0
    blood_pool_hu: float = 300.0
    calcification_hu: float = 700.0
    noise_sigma_hu: float = 20.0
    lesion: LesionSpec = field(default_factory=LesionSpec)
    seed: int = 0

    def __post_init__(self):
        for name in ("background_hu", "soft_tissue_hu", "blood_pool_hu", "calcification_hu"):
            v = getattr(self, name)
            if not HU_MIN <= v <= HU_MAX:
                raise ValueError(f"{name}={v} outside [{HU_MIN}, {HU_MAX}]")

    @property
    def label(self):
        return int(self.lesion.eccentric)


def desk_spec(**kw):
    """Raw grid 40x40x32 at 4x4x5 mm (160 mm cube) -> 32^3 at 5 mm."""
    return PhantomSpec(**kw)


def paper_spec(**kw):
    """Raw grid 320x320x256 at 0.5x0.5x0.625 mm -> 256^3 at 0.625 mm."""
    kw.setdefault("shape", (320, 320, 256))
    kw.setdefault("spacing", (0.5, 0.5, 0.625))
    return PhantomSpec(**kw)


def noncontrast(spec: PhantomSpec) -> PhantomSpec:
    """Blood pool at soft-tissue density, as in non-gated calcium-scoring scans."""
    return replace(spec, blood_pool_hu=spec.soft_tissue_hu)


@dataclass(frozen=True)
class Layout:
    extent: tuple
    body_center: tuple
    body_axes: tuple
    heart_center: tuple
    heart_axes: tuple
    aorta_xy: tuple
    aorta_radius: float
    junction_z: float
    lesion_angle_deg: float
    blood_offset_hu: float


def phantom_layout(spec: PhantomSpec, rng=None) -> Layout:
    """Draw the nuisance geometry (mm). Uses ``spec.seed`` when ``rng`` is None."""
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    ext = tuple(n * s for n, s in zip(spec.shape, spec.spacing))
    scale = min(ext) / 160.0
    c = np.array(ext) / 2.0
    body_axes = np.array([70.0, 58.0, 78.0]) * scale * rng.uniform(0.9, 1.0, size=3)
    heart_axes = rng.uniform(30.0, 42.0, size=3) * scale
    heart_center = c + np.array([rng.uniform(-8, 8), rng.uniform(-8, 8), rng.uniform(-25, -15)]) * scale
    aorta_radius = float(rng.uniform(26.0, 32.0) * scale)
    aorta_xy = heart_center[:2] + rng.uniform(-4, 4, size=2) * scale
    junction_z = float(heart_center[2] + 0.6 * heart_axes[2])
    lesion_angle = float(rng.uniform(0.0, 360.0))
    blood_offset = float(rng.uniform(-80.0, 80.0))
    return Layout(
        extent=ext,
        body_center=tuple(c),
        body_axes=tuple(body_axes),
        heart_center=tuple(heart_center),
        heart_axes=tuple(heart_axes),
        aorta_xy=tuple(aorta_xy),
        aorta_radius=aorta_radius,
        junction_z=junction_z,
        lesion_angle_deg=lesion_angle,
        blood_offset_hu=blood_offset,
    )


def _coords(spec):
    axes = [(np.arange(n) + 0.5) * s for n, s in zip(spec.shape, spec.spacing)]
    return np.meshgrid(*axes, indexing="ij")


def _ellipsoid(x, y, z, center, axes, shrink=1.0):
    return (
        ((x - center[0]) / (axes[0] * shrink)) ** 2
        + ((y - center[1]) / (axes[1] * shrink)) ** 2
        + ((z - center[2]) / (axes[2] * shrink)) ** 2
    ) <= 1.0


def _ring_geometry(x, y, z, lay):
    dx, dy = x - lay.aorta_xy[0], y - lay.aorta_xy[1]
    r = np.hypot(dx, dy)
    theta = np.degrees(np.arctan2(dy, dx)) % 360.0
    band = (np.abs(r - lay.aorta_radius) <= RING_HALF_WIDTH_MM) & (
        np.abs(z - lay.junction_z) <= RING_HALF_HEIGHT_MM
    )
    return band, theta


def _angular_segments(lesion: LesionSpec, start_deg):
    if lesion.eccentric:
        return [(start_deg, lesion.arc_extent_deg)]
    width = lesion.arc_extent_deg / SYMMETRIC_SEGMENTS
    step = 360.0 / SYMMETRIC_SEGMENTS
    return [(start_deg + k * step, width) for k in range(SYMMETRIC_SEGMENTS)]


def _in_segments(theta, segments):
    hit = np.zeros(theta.shape, dtype=bool)
    for start, width in segments:
        hit |= ((theta - start) % 360.0) <= width
    return hit


def annulus_mask(spec: PhantomSpec, layout: Layout = None) -> np.ndarray:
    """Boolean grid of the full annulus ring band."""
    lay = layout or phantom_layout(spec)
    band, _ = _ring_geometry(*_coords(spec), lay)
    return band


def lesion_mask(spec: PhantomSpec, layout: Layout = None) -> MaskVolume:
    """Calcified voxels of the phantom (empty when the lesion is absent)."""
    lay = layout or phantom_layout(spec)
    x, y, z = _coords(spec)
    band, theta = _ring_geometry(x, y, z, lay)
    if not spec.lesion.present or spec.lesion.arc_extent_deg <= 0:
        calc = np.zeros(spec.shape, dtype=bool)
    else:
        calc = band & _in_segments(theta, _angular_segments(spec.lesion, lay.lesion_angle_deg))
    return MaskVolume.from_bool(calc, spec.spacing)


def generate_phantom(spec: PhantomSpec, rng=None):
    """Return ``(volume, heart_mask, aorta_mask, label)``.

    ``rng`` defaults to a generator seeded with ``spec.seed``; the first
    draws fix the layout, the remainder drive the noise.
    """
    rng = np.random.default_rng(spec.seed) if rng is None else rng
    lay = phantom_layout(spec, rng)
    x, y, z = _coords(spec)

    vol = np.full(spec.shape, spec.background_hu, dtype=np.float64)
    body = _ellipsoid(x, y, z, lay.body_center, lay.body_axes)
    vol[body] = spec.soft_tissue_hu

    # the heart ends at the junction plane; the aorta starts a collar below it
    below = z <= lay.junction_z
    heart = _ellipsoid(x, y, z, lay.heart_center, lay.heart_axes) & below
    blood = spec.blood_pool_hu + (lay.blood_offset_hu if spec.blood_pool_hu != spec.soft_tissue_hu else 0.0)
    vol[heart] = spec.soft_tissue_hu + 20.0
    vol[_ellipsoid(x, y, z, lay.heart_center, lay.heart_axes, shrink=0.75) & below] = blood

    r = np.hypot(x - lay.aorta_xy[0], y - lay.aorta_xy[1])
    aorta = (r <= lay.aorta_radius) & (z >= lay.junction_z - COLLAR_MM)
    lumen = (r <= lay.aorta_radius - 2.0) & (z >= lay.junction_z - COLLAR_MM)
    vol[aorta] = spec.soft_tissue_hu + 20.0
    vol[lumen] = blood

    calc = lesion_mask(spec, lay).as_bool()
    vol[calc] = spec.calcification_hu

    vol = np.clip(vol, HU_MIN, HU_MAX)
    vol += rng.normal(0.0, spec.noise_sigma_hu, size=spec.shape)
    vol = np.clip(np.rint(vol), HU_MIN, HU_MAX).astype(np.int16)

    volume = Volume.from_array(vol, spec.spacing, unit="HU", dtype="i16")
    return (
        volume,
        MaskVolume.from_bool(heart, spec.spacing),
        MaskVolume.from_bool(aorta, spec.spacing),
        spec.label,
    )


def dataset_specs(n, positive_fraction, spec_template: PhantomSpec = None, seed=0):
    """Per-phantom specs with exactly ``round(n * fraction)`` positives."""
    if n < 2:
        raise ValueError("n must be >= 2")
    if not 0 < positive_fraction < 1:
        raise ValueError("positive_fraction must lie in (0, 1)")
    template = spec_template or PhantomSpec()
    n_pos = int(math.floor(n * positive_fraction + 0.5))
    rng = np.random.default_rng(seed)
    labels = np.zeros(n, dtype=int)
    labels[:n_pos] = 1
    labels = labels[rng.permutation(n)]
    child_seeds = np.random.SeedSequence(seed).generate_state(n, dtype=np.uint32)
    specs = []
    base = template.lesion.arc_extent_deg
    for i in range(n):
        prng = np.random.default_rng(int(child_seeds[i]) + 1)
        extent = float(base * prng.uniform(0.8, 1.2))
        if labels[i] == 1:
            lesion = LesionSpec(True, extent, 1.0)
        elif prng.uniform() < 0.5:
            lesion = LesionSpec(True, extent, 0.0)
        else:
            lesion = LesionSpec(False, extent, 0.0)
        specs.append(replace(template, lesion=lesion, seed=int(child_seeds[i])))
    return specs


def pretext_specs(n, spec_template: PhantomSpec = None, seed=0):
    """Non-contrast phantoms with widely varying calcium burden."""
    template = noncontrast(spec_template or PhantomSpec())
    child_seeds = np.random.SeedSequence([seed, 7]).generate_state(n, dtype=np.uint32)
    specs = []
    for i in range(n):
        prng = np.random.default_rng(int(child_seeds[i]) + 1)
        present = prng.uniform() < 0.85
        extent = float(prng.uniform(20.0, 330.0))
        ecc = float(prng.uniform())
        specs.append(replace(template, lesion=LesionSpec(present, extent, ecc), seed=int(child_seeds[i])))
    return specs


def write_phantoms(specs, out_dir, prefix="P"):
    """Write phantoms, masks and ``manifest.csv`` under ``out_dir``."""
    out_dir = Path(out_dir)
    vol_dir = out_dir / "volumes"
    records = []
    width = max(4, len(str(len(specs) - 1)))
    for i, spec in enumerate(specs):
        pid = f"{prefix}{i:0{width}d}"
        volume, heart, aorta, label = generate_phantom(spec)
        write_volume(volume, vol_dir / pid)
        write_volume(heart, vol_dir / f"{pid}_heart")
        write_volume(aorta, vol_dir / f"{pid}_aorta")
        records.append(PatientRecord(
            patient_id=pid,
            volume_path=f"volumes/{pid}.mvol.json",
            heart_mask_path=f"volumes/{pid}_heart.mvol.json",
            aorta_mask_path=f"volumes/{pid}_aorta.mvol.json",
            label=label,
        ))
    manifest = DatasetManifest(records, out_dir)
    write_manifest(manifest, out_dir / "manifest.csv")
    return manifest


def generate_dataset(n, positive_fraction, spec_template=None, seed=0, out_dir="."):
    return write_phantoms(dataset_specs(n, positive_fraction, spec_template, seed), out_dir)


def calcium_burden_target(volume: Volume, threshold_hu: float = 130.0) -> float:
    """``log(1 + #voxels above threshold)``: the pretext regression target."""
    count = int(np.count_nonzero(np.asarray(volume.voxels) > threshold_hu))
    return float(np.log1p(count))
