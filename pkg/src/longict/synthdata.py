"""Synthetic longitudinal lung phantoms with known ground truth.

Each patient is a sequence of volumes that share their anatomy through a
known smooth control-grid deformation; lesions of the two pathology classes
evolve (grow, shrink, appear) between timepoints. Lesion classes are
intensity-separable by construction: GGO renders as a soft blob with smooth
falloff, consolidation as a dense blob with a sharp boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (
    NORMALIZED,
    BinaryMask3D,
    DatasetManifest,
    PatientRecord,
    SegMask3D,
    TimepointRecord,
    Volume3D,
    save_binary_mask,
    save_manifest,
    save_seg_mask,
    save_volume,
    SEG_GGO,
    SEG_CONS,
    SEG_HEALTHY,
)
from .registration import BSplineTransform, save_transform, warp_array

DEFAULT_SPACING = (3.0, 1.0, 1.0)


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]
    radii: tuple[float, float, float]

    def squared_distance(self, grids) -> np.ndarray:
        zz, yy, xx = grids
        return (
            ((zz - self.center[0]) / self.radii[0]) ** 2
            + ((yy - self.center[1]) / self.radii[1]) ** 2
            + ((xx - self.center[2]) / self.radii[2]) ** 2
        )


@dataclass
class Lesion:
    center: np.ndarray  # (3,) float voxels
    radii: np.ndarray  # (3,) float voxels
    label: int  # SEG_GGO or SEG_CONS
    peak: float


@dataclass
class PhantomParams:
    shape: tuple[int, int, int] = (24, 160, 160)
    background_intensity: float = 0.05
    lung_intensity: float = 0.15
    lungs: Optional[tuple[Ellipsoid, Ellipsoid]] = None
    ggo_count_range: tuple[int, int] = (1, 3)
    cons_count_range: tuple[int, int] = (1, 2)
    ggo_band: tuple[float, float] = (0.35, 0.55)
    cons_band: tuple[float, float] = (0.70, 0.90)
    lesion_radius_range: tuple[float, float] = (4.0, 9.0)
    growth_range: tuple[float, float] = (0.85, 1.30)
    appearance_prob: float = 0.25
    deformation_amplitude: float = 2.0
    gt_control_spacing: float = 12.0
    noise_sigma: float = 0.02
    n_timepoints: int = 2
    seed: int = 0

    def __post_init__(self):
        if len(self.shape) != 3 or min(self.shape) < 8:
            raise ValueError(f"shape must be 3D with all dims >= 8, got {self.shape}")
        if not 0.0 < self.background_intensity < self.lung_intensity < self.ggo_band[0]:
            raise ValueError("intensities must satisfy 0 < background < lung < GGO band")
        if not self.ggo_band[0] < self.ggo_band[1] <= self.cons_band[0] < self.cons_band[1] <= 1.0:
            raise ValueError(
                f"GGO band must lie strictly below the consolidation band, got {self.ggo_band} / {self.cons_band}"
            )
        if self.deformation_amplitude < 0:
            raise ValueError("deformation amplitude must be >= 0")
        if self.deformation_amplitude >= self.gt_control_spacing / 2:
            raise ValueError(
                f"deformation amplitude {self.deformation_amplitude} must stay below half the "
                f"control spacing {self.gt_control_spacing} to keep the warp invertible"
            )
        band_gap = min(
            self.ggo_band[0] - self.lung_intensity, self.cons_band[0] - self.ggo_band[1]
        )
        if self.noise_sigma < 0 or self.noise_sigma > band_gap / 3:
            raise ValueError(
                f"noise sigma must lie in [0, {band_gap / 3:.4f}] to keep class bands separable"
            )
        if self.growth_range[0] <= 0 or self.growth_range[0] > self.growth_range[1]:
            raise ValueError(f"growth range must be positive and increasing, got {self.growth_range}")
        if not 0.0 <= self.appearance_prob <= 1.0:
            raise ValueError("appearance probability must lie in [0, 1]")
        if self.n_timepoints < 1:
            raise ValueError("n_timepoints must be >= 1")
        if self.lungs is None:
            z, y, x = self.shape
            radii = (0.38 * z, 0.30 * y, 0.16 * x)
            self.lungs = (
                Ellipsoid(center=(0.5 * (z - 1), 0.55 * (y - 1), 0.32 * (x - 1)), radii=radii),
                Ellipsoid(center=(0.5 * (z - 1), 0.55 * (y - 1), 0.68 * (x - 1)), radii=radii),
            )


@dataclass
class PhantomPatient:
    volumes: list[Volume3D]
    lung_masks: list[BinaryMask3D]
    seg_masks: list[SegMask3D]
    transforms: list[BSplineTransform] = field(default_factory=list)
    pre_growth_segs: list[SegMask3D] = field(default_factory=list)


def _grids(shape):
    return np.meshgrid(
        np.arange(shape[0], dtype=np.float64),
        np.arange(shape[1], dtype=np.float64),
        np.arange(shape[2], dtype=np.float64),
        indexing="ij",
    )


def _render_lungs(params: PhantomParams):
    grids = _grids(params.shape)
    mask = np.zeros(params.shape, dtype=np.uint8)
    for lung in params.lungs:
        mask |= (lung.squared_distance(grids) <= 1.0).astype(np.uint8)
    clean = np.full(params.shape, params.background_intensity, dtype=np.float32)
    clean[mask == 1] = params.lung_intensity
    return clean, mask


def _sample_lesions(params: PhantomParams, rng: np.random.Generator) -> list[Lesion]:
    lesions = []
    z_scale = max(0.2, params.shape[0] / params.shape[1])
    for label, count_range, band in (
        (SEG_GGO, params.ggo_count_range, params.ggo_band),
        (SEG_CONS, params.cons_count_range, params.cons_band),
    ):
        count = int(rng.integers(count_range[0], count_range[1] + 1))
        for _ in range(count):
            lung = params.lungs[int(rng.integers(0, 2))]
            # keep the lesion center well inside the lung so the blob fits
            unit = rng.uniform(-0.6, 0.6, size=3)
            center = np.array(lung.center) + unit * np.array(lung.radii)
            r_yx = rng.uniform(*params.lesion_radius_range, size=2)
            r_z = max(1.2, float(rng.uniform(*params.lesion_radius_range)) * z_scale)
            lesions.append(
                Lesion(
                    center=center,
                    radii=np.array([r_z, r_yx[0], r_yx[1]]),
                    label=label,
                    peak=float(rng.uniform(*band)),
                )
            )
    return lesions


def _render(params: PhantomParams, lungs_clean: np.ndarray, lung_mask: np.ndarray, lesions):
    """Paint lesions over the clean lung image; labels match intensities exactly."""
    clean = lungs_clean.copy()
    seg = np.where(lung_mask == 1, SEG_HEALTHY, 0).astype(np.uint8)
    grids = _grids(params.shape)
    ordered = [l for l in lesions if l.label == SEG_GGO] + [l for l in lesions if l.label == SEG_CONS]
    for lesion in ordered:
        ell = Ellipsoid(center=tuple(lesion.center), radii=tuple(lesion.radii))
        d2 = ell.squared_distance(grids)
        inside = (d2 < 1.0) & (lung_mask == 1)
        if not inside.any():
            continue
        if lesion.label == SEG_GGO:
            lo = params.ggo_band[0]
            clean[inside] = (lo + (lesion.peak - lo) * (1.0 - d2[inside])).astype(np.float32)
        else:
            clean[inside] = np.float32(lesion.peak)
        seg[inside] = lesion.label
    return clean, seg


def _forward_map(transform: BSplineTransform, points: np.ndarray, iters: int = 12) -> np.ndarray:
    """Solve q + u(q) = p for each column of ``points`` by fixed-point iteration."""
    q = points.copy()
    limit = np.array(transform.domain_shape, dtype=np.float64)[:, None] - 1.0
    for _ in range(iters):
        q = np.clip(points - transform.displacement_at_points(np.clip(q, 0.0, limit)), 0.0, limit)
    return q


def _draw_transform(params: PhantomParams, rng: np.random.Generator) -> BSplineTransform:
    t = BSplineTransform.identity(params.shape, params.gt_control_spacing)
    a = params.deformation_amplitude
    t.coeffs[:] = rng.uniform(-a, a, size=t.coeffs.shape)
    return t


def generate_patient(params: PhantomParams, rng: np.random.Generator) -> PhantomPatient:
    """Generate one longitudinal phantom; same rng state gives bit-identical output."""
    lungs_clean, lung_mask = _render_lungs(params)
    lesions = _sample_lesions(params, rng)
    clean, seg = _render(params, lungs_clean, lung_mask, lesions)

    patient = PhantomPatient(volumes=[], lung_masks=[], seg_masks=[])

    def emit(clean_vol, lung, seg_labels):
        vox = clean_vol
        if params.noise_sigma > 0:
            vox = vox + rng.normal(0.0, params.noise_sigma, size=vox.shape).astype(np.float32)
        vox = np.clip(vox, 0.0, 1.0).astype(np.float32)
        patient.volumes.append(Volume3D(vox, spacing=DEFAULT_SPACING, intensity_unit=NORMALIZED))
        patient.lung_masks.append(BinaryMask3D(lung.astype(np.uint8), spacing=DEFAULT_SPACING))
        patient.seg_masks.append(SegMask3D(seg_labels.astype(np.uint8), spacing=DEFAULT_SPACING))

    emit(clean, lung_mask, seg)

    for _ in range(params.n_timepoints - 1):
        gt = _draw_transform(params, rng)
        identity_step = not np.any(gt.coeffs)
        if identity_step:
            lungs_clean_w = lungs_clean.copy()
            lung_w = lung_mask.copy()
            seg_pre = seg.copy()
        else:
            lungs_clean_w = warp_array(
                lungs_clean, gt, "linear", fill=params.background_intensity
            ).astype(np.float32)
            lung_w = warp_array(lung_mask, gt, "nearest", fill=0).astype(np.uint8)
            seg_pre = warp_array(seg, gt, "nearest", fill=0).astype(np.uint8)

        survivors = []
        if lesions:
            centers = np.stack([l.center for l in lesions], axis=1)
            moved = centers if identity_step else _forward_map(gt, centers)
            for k, lesion in enumerate(lesions):
                growth = float(rng.uniform(*params.growth_range))
                center = moved[:, k]
                radii = lesion.radii * growth
                idx = tuple(np.clip(np.rint(center).astype(int), 0, np.array(params.shape) - 1))
                if lung_w[idx] == 0 or radii.max() < 1.0:
                    continue  # lesion resolved or drifted out of the lung
                survivors.append(Lesion(center=center, radii=radii, label=lesion.label, peak=lesion.peak))
        if rng.random() < params.appearance_prob:
            interior = np.argwhere(lung_w == 1)
            if interior.size:
                pick = interior[int(rng.integers(0, len(interior)))]
                label = SEG_GGO if rng.random() < 0.5 else SEG_CONS
                band = params.ggo_band if label == SEG_GGO else params.cons_band
                z_scale = max(0.2, params.shape[0] / params.shape[1])
                r_yx = rng.uniform(*params.lesion_radius_range, size=2)
                r_z = max(1.2, float(rng.uniform(*params.lesion_radius_range)) * z_scale)
                survivors.append(
                    Lesion(
                        center=pick.astype(np.float64),
                        radii=np.array([r_z, r_yx[0], r_yx[1]]),
                        label=label,
                        peak=float(rng.uniform(*band)),
                    )
                )
        lesions = survivors
        lungs_clean, lung_mask = lungs_clean_w, lung_w
        clean, seg = _render(params, lungs_clean, lung_mask, lesions)
        patient.transforms.append(gt)
        patient.pre_growth_segs.append(SegMask3D(seg_pre, spacing=DEFAULT_SPACING))
        emit(clean, lung_mask, seg)

    return patient


def _split_counts(n_patients: int, split_ratio) -> tuple[int, int, int]:
    ratio = tuple(float(r) for r in split_ratio)
    if len(ratio) != 3 or any(r < 0 for r in ratio):
        raise ValueError(f"split ratio must be three non-negative numbers, got {split_ratio}")
    if abs(sum(ratio) - 1.0) > 1e-6:
        raise ValueError(f"split ratio must sum to 1, got {split_ratio} (sum {sum(ratio)})")
    n_train = round(n_patients * ratio[0])
    n_val = round(n_patients * ratio[1])
    n_test = n_patients - n_train - n_val
    if n_test < 0:
        n_val += n_test
        n_test = 0
    return n_train, n_val, n_test


def generate_dataset(
    params: PhantomParams,
    n_patients: int,
    timepoint_range: tuple[int, int],
    out_dir,
    split_ratio=(0.70, 0.15, 0.15),
) -> DatasetManifest:
    """Write a phantom dataset in the portable container format and return its manifest.

    Patients (never volumes) are assigned to train/val/test; generation is
    deterministic per (params.seed, patient index), so reruns are
    byte-identical and patients may be generated in parallel.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_train, n_val, _ = _split_counts(n_patients, split_ratio)
    records = []
    for i in range(n_patients):
        pid = f"p{i:03d}"
        rng = np.random.default_rng(np.random.SeedSequence([params.seed, i]))
        t_count = int(rng.integers(timepoint_range[0], timepoint_range[1] + 1))
        patient = generate_patient(replace(params, n_timepoints=t_count), rng)
        split = "train" if i < n_train else ("val" if i < n_train + n_val else "test")
        timepoints = []
        pdir = out_dir / pid
        for t in range(t_count):
            vol_rel = f"{pid}/img_t{t}.vol.json"
            lung_rel = f"{pid}/lung_t{t}.vol.json"
            seg_rel = f"{pid}/seg_t{t}.vol.json"
            save_volume(patient.volumes[t], out_dir / vol_rel)
            save_binary_mask(patient.lung_masks[t], out_dir / lung_rel)
            save_seg_mask(patient.seg_masks[t], out_dir / seg_rel)
            timepoints.append(
                TimepointRecord(time=t, volume=vol_rel, lung_mask=lung_rel, seg_mask=seg_rel)
            )
        for t, gt in enumerate(patient.transforms):
            save_transform(gt, pdir / f"gt_{t}_{t + 1}.tfm.json")
        records.append(PatientRecord(patient_id=pid, split=split, timepoints=timepoints))
    manifest = DatasetManifest(patients=records, root=out_dir)
    save_manifest(manifest, out_dir / "manifest.json")
    manifest.validate()
    return manifest
