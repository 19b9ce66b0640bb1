"""Volume container and dataset manifest I/O.

A volume is stored as two files sharing a stem::

    <stem>.mvol.json   {"shape": [nx, ny, nz], "spacing_mm": [sx, sy, sz],
                        "unit": "HU" | "normalized", "dtype": "i16" | "f32"}
    <stem>.mvol.raw    little-endian payload, x fastest

In memory the voxel grid is a numpy array indexed ``[x, y, z]`` with shape
``(nx, ny, nz)``; the on-disk order is therefore Fortran order.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvariantError, VolumeFormatError

UNITS = ("HU", "normalized")
DTYPES = {"i16": np.dtype("<i2"), "f32": np.dtype("<f4")}
MANIFEST_COLUMNS = ("patient_id", "volume", "heart_mask", "aorta_mask", "label")


@dataclass(frozen=True)
class VolumeHeader:
    shape: tuple
    spacing: tuple
    unit: str = "HU"
    dtype: str = "f32"

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        self.validate()

    def validate(self):
        if len(self.shape) != 3 or any(s < 1 for s in self.shape):
            raise VolumeFormatError(f"shape must be 3 integers >= 1, got {self.shape}", field="shape")
        if len(self.spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in self.spacing):
            raise VolumeFormatError(f"spacing must be 3 reals > 0, got {self.spacing}", field="spacing_mm")
        if self.unit not in UNITS:
            raise VolumeFormatError(f"unit must be one of {UNITS}, got {self.unit!r}", field="unit")
        if self.dtype not in DTYPES:
            raise VolumeFormatError(f"dtype must be one of {tuple(DTYPES)}, got {self.dtype!r}", field="dtype")
        if self.dtype == "i16" and self.unit != "HU":
            raise VolumeFormatError("dtype i16 is only allowed with unit HU", field="dtype")

    @property
    def voxel_count(self):
        return int(np.prod(self.shape))

    @property
    def nbytes(self):
        return self.voxel_count * DTYPES[self.dtype].itemsize

    def to_json(self):
        return {
            "shape": list(self.shape),
            "spacing_mm": list(self.spacing),
            "unit": self.unit,
            "dtype": self.dtype,
        }


@dataclass
class Volume:
    header: VolumeHeader
    voxels: np.ndarray

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=DTYPES[self.header.dtype].newbyteorder("="))
        self.validate()

    def validate(self):
        if tuple(self.voxels.shape) != self.header.shape:
            raise InvariantError(
                f"voxel grid {self.voxels.shape} does not match header shape {self.header.shape}",
                field="shape",
            )
        if self.header.unit == "normalized":
            v = self.voxels
            if not np.all(np.isfinite(v)) or v.min() < 0 or v.max() > 1:
                raise InvariantError("normalized volume has values outside [0, 1]", field="unit")

    @property
    def shape(self):
        return self.header.shape

    @property
    def spacing(self):
        return self.header.spacing

    @property
    def unit(self):
        return self.header.unit

    @classmethod
    def from_array(cls, data, spacing, unit="HU", dtype=None):
        data = np.asarray(data)
        if dtype is None:
            dtype = "i16" if data.dtype == np.int16 else "f32"
        return cls(VolumeHeader(data.shape, spacing, unit, dtype), data)

    def with_data(self, data, spacing=None, unit=None, dtype=None):
        """New volume with the same metadata except what is overridden."""
        data = np.asarray(data)
        header = VolumeHeader(
            data.shape,
            self.spacing if spacing is None else spacing,
            self.unit if unit is None else unit,
            (dtype or ("i16" if data.dtype == np.int16 else "f32")),
        )
        return Volume(header, data)


@dataclass
class MaskVolume(Volume):
    """Binary grid; values are 0 or 1 only."""

    def __post_init__(self):
        super().__post_init__()
        if not np.all((self.voxels == 0) | (self.voxels == 1)):
            raise InvariantError("mask values must be 0 or 1", field="voxels")

    @classmethod
    def from_bool(cls, mask, spacing):
        m = np.asarray(mask, dtype=bool).astype(np.int16)
        return cls(VolumeHeader(m.shape, spacing, "HU", "i16"), m)

    def as_bool(self):
        return self.voxels.astype(bool)


def volume_paths(path):
    """``(json_path, raw_path)`` for a stem or either container file."""
    path = Path(path)
    name = path.name
    for suffix in (".mvol.json", ".mvol.raw"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
            break
    return path.with_name(name + ".mvol.json"), path.with_name(name + ".mvol.raw")


def _parse_header(meta, source):
    if not isinstance(meta, dict):
        raise VolumeFormatError(f"{source}: header must be a JSON object", field="header")
    for key in ("shape", "spacing_mm", "unit", "dtype"):
        if key not in meta:
            raise VolumeFormatError(f"{source}: missing header field {key!r}", field=key)
    shape, spacing = meta["shape"], meta["spacing_mm"]
    if not isinstance(shape, list) or len(shape) != 3 or not all(
        isinstance(s, int) and not isinstance(s, bool) for s in shape
    ):
        raise VolumeFormatError(f"{source}: shape must be a list of 3 integers", field="shape")
    if not isinstance(spacing, list) or len(spacing) != 3 or not all(
        isinstance(s, (int, float)) and not isinstance(s, bool) for s in spacing
    ):
        raise VolumeFormatError(f"{source}: spacing_mm must be a list of 3 numbers", field="spacing_mm")
    return VolumeHeader(tuple(shape), tuple(spacing), meta["unit"], meta["dtype"])


def read_header(path) -> VolumeHeader:
    jpath, _ = volume_paths(path)
    if not jpath.exists():
        raise FileNotFoundError(f"volume header not found: {jpath}")
    try:
        meta = json.loads(jpath.read_text())
    except json.JSONDecodeError as exc:
        raise VolumeFormatError(f"{jpath}: invalid JSON ({exc})", field="header") from exc
    return _parse_header(meta, jpath)


def read_volume(path, mask: bool = False) -> Volume:
    """Load a volume (or, with ``mask=True``, a :class:`MaskVolume`)."""
    header = read_header(path)
    jpath, rpath = volume_paths(path)
    if not rpath.exists():
        raise FileNotFoundError(f"volume payload not found: {rpath}")
    raw = rpath.read_bytes()
    if len(raw) != header.nbytes:
        raise VolumeFormatError(
            f"{rpath}: payload is {len(raw)} bytes, header implies "
            f"{header.voxel_count} x {DTYPES[header.dtype].itemsize} = {header.nbytes}",
            field="shape",
        )
    flat = np.frombuffer(raw, dtype=DTYPES[header.dtype])
    voxels = flat.reshape(header.shape, order="F").astype(DTYPES[header.dtype].newbyteorder("="))
    cls = MaskVolume if mask else Volume
    return cls(header, voxels)


def read_mask(path) -> MaskVolume:
    return read_volume(path, mask=True)


def write_volume(volume: Volume, path):
    """Write header sidecar and payload; returns the JSON path."""
    volume.header.validate()
    volume.validate()
    jpath, rpath = volume_paths(path)
    payload = np.asarray(volume.voxels, dtype=DTYPES[volume.header.dtype]).tobytes(order="F")
    text = json.dumps(volume.header.to_json(), separators=(", ", ": ")) + "\n"
    jpath.parent.mkdir(parents=True, exist_ok=True)
    rpath.write_bytes(payload)
    jpath.write_text(text)
    return jpath


# -- manifests ---------------------------------------------------------------

@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    volume_path: str
    heart_mask_path: Optional[str] = None
    aorta_mask_path: Optional[str] = None
    label: int = 0

    @property
    def mask_paths(self):
        return [p for p in (self.heart_mask_path, self.aorta_mask_path) if p]


@dataclass
class DatasetManifest:
    records: list
    root: Path = field(default_factory=Path)

    def __post_init__(self):
        self.root = Path(self.root)
        if not self.records:
            raise VolumeFormatError("manifest has no records", field="records")
        seen = set()
        for r in self.records:
            if r.patient_id in seen:
                raise VolumeFormatError(f"duplicate patient_id {r.patient_id!r}", field="patient_id")
            seen.add(r.patient_id)
            if r.label not in (0, 1):
                raise VolumeFormatError(
                    f"label for {r.patient_id!r} must be 0 or 1, got {r.label!r}", field="label"
                )

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def labels(self):
        return np.array([r.label for r in self.records], dtype=np.int64)

    @property
    def patient_ids(self):
        return [r.patient_id for r in self.records]

    def resolve(self, rel):
        """Resolve a path cell relative to the manifest's directory."""
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def subset(self, ids):
        wanted = set(ids)
        return DatasetManifest([r for r in self.records if r.patient_id in wanted], self.root)

    def relocated(self, root):
        """Same records with paths rewritten relative to ``root``."""
        root = Path(root)

        def rel(p):
            if not p:
                return p
            return _relpath(self.resolve(p), root)

        recs = [
            replace(r, volume_path=rel(r.volume_path), heart_mask_path=rel(r.heart_mask_path),
                    aorta_mask_path=rel(r.aorta_mask_path))
            for r in self.records
        ]
        return DatasetManifest(recs, root)


def _relpath(path, root):
    import os

    return Path(os.path.relpath(Path(path).resolve(), Path(root).resolve())).as_posix()


def _parse_label(text, pid):
    try:
        value = int(text.strip())
    except (ValueError, AttributeError):
        raise VolumeFormatError(f"label for {pid!r} must be 0 or 1, got {text!r}", field="label") from None
    if value not in (0, 1) or text.strip() not in ("0", "1"):
        raise VolumeFormatError(f"label for {pid!r} must be 0 or 1, got {text!r}", field="label")
    return value


def parse_manifest(text, root=".") -> DatasetManifest:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        raise VolumeFormatError("manifest is empty (header row required)", field="header")
    missing = [c for c in MANIFEST_COLUMNS if c not in reader.fieldnames]
    if missing:
        raise VolumeFormatError(f"manifest missing required column(s): {', '.join(missing)}", field=missing[0])
    records = []
    for row in reader:
        pid = (row["patient_id"] or "").strip()
        if not pid:
            raise VolumeFormatError("empty patient_id", field="patient_id")
        records.append(PatientRecord(
            patient_id=pid,
            volume_path=(row["volume"] or "").strip(),
            heart_mask_path=(row["heart_mask"] or "").strip() or None,
            aorta_mask_path=(row["aorta_mask"] or "").strip() or None,
            label=_parse_label(row["label"], pid),
        ))
    return DatasetManifest(records, root)


def read_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    return parse_manifest(path.read_text(), root=path.parent)


def format_manifest(manifest: DatasetManifest) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(MANIFEST_COLUMNS)
    for r in manifest.records:
        writer.writerow([r.patient_id, r.volume_path, r.heart_mask_path or "",
                         r.aorta_mask_path or "", r.label])
    return buf.getvalue()


def write_manifest(manifest: DatasetManifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(format_manifest(manifest))
    return path
