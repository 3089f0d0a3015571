"""Domain types, portable volume I/O and preprocessing for longitudinal CT pairs.

Volumes are stored in a two-file container: a UTF-8 JSON header
(``<name>.vol.json``) next to a raw little-endian payload (``<name>.vol.raw``).
Image volumes use dtype ``f32le``, masks use ``u8``. Round trips are
bit-identical.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

HU = "HU"
NORMALIZED = "normalized"

# Standard lung window applied before min-max normalization of HU volumes.
DEFAULT_HU_CLIP = (-1024.0, 600.0)

DEFAULT_CROP_MARGIN = 2

HEADER_SUFFIX = ".vol.json"
RAW_SUFFIX = ".vol.raw"


class VolumeFormatError(ValueError):
    """Raised for malformed volume containers (header or payload)."""


@dataclass
class Volume3D:
    """Scalar CT-like volume, C-order float32 voxels indexed [z, y, x]."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    intensity_unit: str = HU

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.float32)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"voxels must be a 3D array with all dims >= 1, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing components must be > 0, got {self.spacing}")
        if self.intensity_unit not in (HU, NORMALIZED):
            raise ValueError(f"intensity_unit must be '{HU}' or '{NORMALIZED}', got {self.intensity_unit!r}")
        if not np.isfinite(self.voxels).all():
            raise ValueError("voxels contain non-finite values")
        if self.intensity_unit == NORMALIZED:
            lo, hi = float(self.voxels.min()), float(self.voxels.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"voxels of a normalized volume must lie in [0, 1], got range [{lo}, {hi}]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


@dataclass
class BinaryMask3D:
    """Per-voxel {0, 1} mask, shape-compatible with its paired volume."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.ascontiguousarray(self.voxels, dtype=np.uint8)
        if self.voxels.ndim != 3 or min(self.voxels.shape) < 1:
            raise ValueError(f"mask must be a 3D array with all dims >= 1, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if not np.isin(self.voxels, (0, 1)).all():
            raise ValueError("binary mask voxels must be 0 or 1")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape


SEG_BACKGROUND = 0
SEG_HEALTHY = 1
SEG_GGO = 2
SEG_CONS = 3
SEG_LABELS = (SEG_BACKGROUND, SEG_HEALTHY, SEG_GGO, SEG_CONS)


@dataclass
class SegMask3D:
    """Per-voxel labels: 0 background, 1 healthy lung, 2 GGO, 3 consolidation."""

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 3 or min(self.labels.shape) < 1:
            raise ValueError(f"labels must be a 3D array with all dims >= 1, got shape {self.labels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if self.labels.max(initial=0) > SEG_CONS:
            raise ValueError(f"label values must lie in {set(SEG_LABELS)}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass(frozen=True)
class PathologyLabels:
    """Slice-level presence of the two pathology classes."""

    ggo_present: bool
    cons_present: bool

    @classmethod
    def from_seg_slice(cls, seg_slice: np.ndarray) -> "PathologyLabels":
        return cls(
            ggo_present=bool((seg_slice == SEG_GGO).any()),
            cons_present=bool((seg_slice == SEG_CONS).any()),
        )


@dataclass
class LongitudinalSlicePair:
    """Registered (reference, target) 2D slice pair, the network input."""

    reference: np.ndarray
    target: np.ndarray
    patient_id: str
    slice_index: int
    ref_time: int
    tar_time: int
    target_seg: Optional[np.ndarray] = None
    target_labels: Optional[PathologyLabels] = None

    def __post_init__(self):
        self.reference = np.asarray(self.reference, dtype=np.float32)
        self.target = np.asarray(self.target, dtype=np.float32)
        if self.reference.shape != self.target.shape:
            raise ValueError(
                f"reference/target shapes differ: {self.reference.shape} vs {self.target.shape}"
            )
        if not self.ref_time < self.tar_time:
            raise ValueError(f"ref_time must precede tar_time, got {self.ref_time} >= {self.tar_time}")
        if self.target_seg is not None and self.target_labels is None:
            self.target_labels = PathologyLabels.from_seg_slice(self.target_seg)


@dataclass(frozen=True)
class CropBox:
    """Half-open voxel box [lo, hi) per axis, recorded for provenance."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(a, b) for a, b in zip(self.lo, self.hi))

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(b - a for a, b in zip(self.lo, self.hi))

    def to_json(self) -> dict:
        return {"lo": list(self.lo), "hi": list(self.hi)}

    @classmethod
    def from_json(cls, d: dict) -> "CropBox":
        return cls(lo=tuple(d["lo"]), hi=tuple(d["hi"]))


# ---------------------------------------------------------------------------
# Portable container I/O
# ---------------------------------------------------------------------------


def _header_raw_paths(path) -> tuple[Path, Path]:
    p = Path(path)
    name = p.name
    if not name.endswith(HEADER_SUFFIX):
        raise VolumeFormatError(f"volume path must end with '{HEADER_SUFFIX}', got {p}")
    return p, p.with_name(name[: -len(HEADER_SUFFIX)] + RAW_SUFFIX)


def _write_container(path, arr: np.ndarray, dtype_tag: str, header_extra: dict) -> None:
    header_path, raw_path = _header_raw_paths(path)
    header = {
        "shape": list(arr.shape),
        "dtype": dtype_tag,
        "order": "zyx",
    }
    header.update(header_extra)
    header_path.parent.mkdir(parents=True, exist_ok=True)
    header_path.write_text(json.dumps(header, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    raw_path.write_bytes(np.ascontiguousarray(arr).tobytes())


def _read_container(path, expect_dtype: str) -> tuple[np.ndarray, dict]:
    header_path, raw_path = _header_raw_paths(path)
    if not header_path.exists():
        raise VolumeFormatError(f"missing header file {header_path}")
    if not raw_path.exists():
        raise VolumeFormatError(f"missing raw payload {raw_path}")
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise VolumeFormatError(f"malformed header {header_path}: {e}") from e
    for key in ("shape", "dtype", "order"):
        if key not in header:
            raise VolumeFormatError(f"header field '{key}' missing in {header_path}")
    if header["order"] != "zyx":
        raise VolumeFormatError(f"header field 'order' must be 'zyx', got {header['order']!r}")
    if header["dtype"] != expect_dtype:
        raise VolumeFormatError(f"header field 'dtype' is {header['dtype']!r}, expected {expect_dtype!r}")
    shape = header["shape"]
    if (
        not isinstance(shape, list)
        or len(shape) != 3
        or not all(isinstance(v, int) and v >= 1 for v in shape)
    ):
        raise VolumeFormatError(f"header field 'shape' must be three ints >= 1, got {shape!r}")
    np_dtype = np.dtype("<f4") if expect_dtype == "f32le" else np.dtype("u1")
    payload = raw_path.read_bytes()
    expected_bytes = int(np.prod(shape)) * np_dtype.itemsize
    if len(payload) != expected_bytes:
        raise VolumeFormatError(
            f"shape/byte-count mismatch in {raw_path}: header shape {tuple(shape)} needs "
            f"{expected_bytes} bytes, payload has {len(payload)}"
        )
    arr = np.frombuffer(payload, dtype=np_dtype).reshape(shape)
    return arr, header


def save_volume(volume: Volume3D, path) -> None:
    """Write a volume as header + raw float32 LE payload; round-trips bit-identically."""
    _write_container(
        path,
        volume.voxels.astype("<f4", copy=False),
        "f32le",
        {"spacing": list(volume.spacing), "intensity_unit": volume.intensity_unit},
    )


def load_volume(path) -> Volume3D:
    arr, header = _read_container(path, "f32le")
    if "spacing" not in header or "intensity_unit" not in header:
        missing = "spacing" if "spacing" not in header else "intensity_unit"
        raise VolumeFormatError(f"header field '{missing}' missing in {path}")
    arr = arr.astype(np.float32)
    if not np.isfinite(arr).all():
        raise VolumeFormatError(f"voxels contain non-finite values in {path}")
    return Volume3D(voxels=arr, spacing=tuple(header["spacing"]), intensity_unit=header["intensity_unit"])


def save_binary_mask(mask: BinaryMask3D, path) -> None:
    _write_container(path, mask.voxels, "u8", {"spacing": list(mask.spacing), "kind": "binary"})


def load_binary_mask(path) -> BinaryMask3D:
    arr, header = _read_container(path, "u8")
    return BinaryMask3D(voxels=arr, spacing=tuple(header.get("spacing", (1.0, 1.0, 1.0))))


def save_seg_mask(mask: SegMask3D, path) -> None:
    _write_container(path, mask.labels, "u8", {"spacing": list(mask.spacing), "kind": "labels"})


def load_seg_mask(path) -> SegMask3D:
    arr, header = _read_container(path, "u8")
    return SegMask3D(labels=arr, spacing=tuple(header.get("spacing", (1.0, 1.0, 1.0))))


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------


def crop_to_lung(
    volume: Volume3D, lung_mask: BinaryMask3D, margin_vox: int = DEFAULT_CROP_MARGIN
) -> tuple[Volume3D, CropBox]:
    """Crop to the bounding box of mask=1 voxels expanded by ``margin_vox``, clamped to bounds."""
    if volume.shape != lung_mask.shape:
        raise ValueError(f"volume shape {volume.shape} does not match mask shape {lung_mask.shape}")
    box = lung_bounding_box(lung_mask, margin_vox)
    cropped = volume.voxels[box.slices]
    return Volume3D(cropped, spacing=volume.spacing, intensity_unit=volume.intensity_unit), box


def lung_bounding_box(lung_mask: BinaryMask3D, margin_vox: int = DEFAULT_CROP_MARGIN) -> CropBox:
    nz = np.nonzero(lung_mask.voxels)
    if nz[0].size == 0:
        raise ValueError("empty lung mask")
    lo = tuple(max(0, int(idx.min()) - margin_vox) for idx in nz)
    hi = tuple(
        min(dim, int(idx.max()) + 1 + margin_vox) for idx, dim in zip(nz, lung_mask.shape)
    )
    return CropBox(lo=lo, hi=hi)


def min_max_normalize(volume: Volume3D, clip_range: Optional[tuple[float, float]] = None) -> Volume3D:
    """Linearly map voxel intensities so min -> 0 and max -> 1, optionally clipping first."""
    vox = volume.voxels
    if clip_range is not None:
        lo, hi = float(clip_range[0]), float(clip_range[1])
        if not lo < hi:
            raise ValueError(f"clip_range must be increasing, got {clip_range}")
        vox = np.clip(vox, lo, hi)
    vmin = float(vox.min())
    vmax = float(vox.max())
    if vmax <= vmin:
        raise ValueError("degenerate intensity range: volume is constant after clipping")
    out = (vox - vmin) / np.float32(vmax - vmin)
    out = np.clip(out, 0.0, 1.0)
    return Volume3D(out, spacing=volume.spacing, intensity_unit=NORMALIZED)


def resize_inplane(arr: np.ndarray, out_hw: tuple[int, int], order: int) -> np.ndarray:
    """Resize the (y, x) plane of a [z, y, x] array; order 0 for labels, 1 for intensities."""
    z, y, x = arr.shape
    if (y, x) == tuple(out_hw):
        return arr.copy()
    factors = (1.0, out_hw[0] / y, out_hw[1] / x)
    out = ndimage.zoom(arr.astype(np.float32), factors, order=order, mode="nearest", grid_mode=True)
    # grid_mode zoom can be off by one pixel on exact size; crop/pad defensively
    out = out[:, : out_hw[0], : out_hw[1]]
    if out.shape[1:] != tuple(out_hw):
        pad = ((0, 0), (0, out_hw[0] - out.shape[1]), (0, out_hw[1] - out.shape[2]))
        out = np.pad(out, pad, mode="edge")
    return out


def resize_volume_inplane(volume: Volume3D, out_hw: tuple[int, int]) -> Volume3D:
    z, y, x = volume.shape
    out = resize_inplane(volume.voxels, out_hw, order=1)
    if volume.intensity_unit == NORMALIZED:
        out = np.clip(out, 0.0, 1.0)
    sz, sy, sx = volume.spacing
    spacing = (sz, sy * y / out_hw[0], sx * x / out_hw[1])
    return Volume3D(out, spacing=spacing, intensity_unit=volume.intensity_unit)


def resize_mask_inplane(mask, out_hw: tuple[int, int]):
    z, y, x = mask.shape
    sz, sy, sx = mask.spacing
    spacing = (sz, sy * y / out_hw[0], sx * x / out_hw[1])
    if isinstance(mask, BinaryMask3D):
        out = resize_inplane(mask.voxels, out_hw, order=0)
        return BinaryMask3D(out.astype(np.uint8), spacing=spacing)
    if isinstance(mask, SegMask3D):
        out = resize_inplane(mask.labels, out_hw, order=0)
        return SegMask3D(out.astype(np.uint8), spacing=spacing)
    raise TypeError(f"unsupported mask type {type(mask)!r}")


# ---------------------------------------------------------------------------
# Dataset manifest
# ---------------------------------------------------------------------------

SPLITS = ("train", "val", "test")


@dataclass
class TimepointRecord:
    time: int
    volume: str
    lung_mask: str
    seg_mask: Optional[str] = None


@dataclass
class PatientRecord:
    patient_id: str
    split: str
    timepoints: list[TimepointRecord] = field(default_factory=list)


@dataclass
class DatasetManifest:
    """Patients with ordered timepoints; file paths are relative to ``root``."""

    patients: list[PatientRecord]
    root: Path

    def patient(self, patient_id: str) -> PatientRecord:
        for p in self.patients:
            if p.patient_id == patient_id:
                return p
        raise KeyError(f"unknown patient {patient_id!r}")

    def patients_in_split(self, split: str) -> list[PatientRecord]:
        if split not in SPLITS:
            raise ValueError(f"split must be one of {SPLITS}, got {split!r}")
        return [p for p in self.patients if p.split == split]

    def resolve(self, relpath: str) -> Path:
        return self.root / relpath

    def validate(self) -> None:
        seen = set()
        for p in self.patients:
            if p.patient_id in seen:
                raise ValueError(f"patient {p.patient_id!r} appears more than once")
            seen.add(p.patient_id)
            if p.split not in SPLITS:
                raise ValueError(f"patient {p.patient_id!r} has invalid split {p.split!r}")
            times = [tp.time for tp in p.timepoints]
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ValueError(f"timepoints of patient {p.patient_id!r} are not strictly ordered: {times}")
            for tp in p.timepoints:
                for rel in (tp.volume, tp.lung_mask, tp.seg_mask):
                    if rel is None:
                        continue
                    if not self.resolve(rel).exists():
                        raise FileNotFoundError(f"manifest references missing file {self.resolve(rel)}")


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "patients": [
            {
                "patient_id": p.patient_id,
                "split": p.split,
                "timepoints": [
                    {
                        "time": tp.time,
                        "volume": tp.volume,
                        "lung_mask": tp.lung_mask,
                        "seg_mask": tp.seg_mask,
                    }
                    for tp in p.timepoints
                ],
            }
            for p in manifest.patients
        ]
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    doc = json.loads(path.read_text(encoding="utf-8"))
    patients = [
        PatientRecord(
            patient_id=p["patient_id"],
            split=p["split"],
            timepoints=[
                TimepointRecord(
                    time=tp["time"],
                    volume=tp["volume"],
                    lung_mask=tp["lung_mask"],
                    seg_mask=tp.get("seg_mask"),
                )
                for tp in p["timepoints"]
            ],
        )
        for p in doc["patients"]
    ]
    return DatasetManifest(patients=patients, root=path.parent)


def enumerate_pairs(manifest: DatasetManifest, patient_id: str) -> list[tuple[int, int]]:
    """All ordered past-to-future timepoint index pairs (i, j) with i < j."""
    patient = manifest.patient(patient_id)
    t = len(patient.timepoints)
    return [(i, j) for i in range(t) for j in range(i + 1, t)]
