"""Registered, normalized longitudinal pair cache.

For every past-to-future timepoint pair of a patient the reference volume is
cropped, normalized and registered onto the target; the target itself goes
through the identical crop/normalize path but is never warped. Cached pairs
are resized in-plane to the training slice grid and skipped on rebuild when
their input hash is unchanged.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import core
from .core import (
    HU,
    BinaryMask3D,
    DatasetManifest,
    LongitudinalSlicePair,
    Volume3D,
    enumerate_pairs,
)
from .registration import (
    RegistrationParams,
    apply_transform,
    load_transform,
    register_masks,
    save_transform,
)

CLIP_AUTO = "auto"


@dataclass
class PreprocessConfig:
    slice_size: tuple[int, int] = (128, 128)
    margin_vox: int = core.DEFAULT_CROP_MARGIN
    # "auto": HU volumes get the default lung window, normalized ones no clip
    clip_range: Optional[object] = CLIP_AUTO
    registration: RegistrationParams = field(default_factory=RegistrationParams)

    def resolve_clip(self, intensity_unit: str):
        if self.clip_range == CLIP_AUTO:
            return core.DEFAULT_HU_CLIP if intensity_unit == HU else None
        return self.clip_range


def _binary_dice(a: np.ndarray, b: np.ndarray) -> float:
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def _file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def _pair_input_hash(manifest: DatasetManifest, patient, i: int, j: int, config: PreprocessConfig) -> str:
    h = hashlib.sha256()
    for tp in (patient.timepoints[i], patient.timepoints[j]):
        for rel in (tp.volume, tp.lung_mask, tp.seg_mask):
            if rel is None:
                continue
            head = manifest.resolve(rel)
            raw = head.with_name(head.name.replace(".vol.json", ".vol.raw"))
            h.update(head.read_bytes())
            h.update(raw.read_bytes())
    cfg = {
        "slice_size": list(config.slice_size),
        "margin_vox": config.margin_vox,
        "clip_range": config.clip_range if config.clip_range == CLIP_AUTO else list(config.clip_range or ()),
        "registration": {
            "levels": config.registration.levels,
            "control_spacing": config.registration.control_spacing
            if np.isscalar(config.registration.control_spacing)
            else list(config.registration.control_spacing),
            "step_size": config.registration.step_size,
            "max_iters": config.registration.max_iters,
            "bending_weight": config.registration.bending_weight,
            "tol": config.registration.tol,
            "smoothing_sigma": config.registration.smoothing_sigma,
        },
    }
    h.update(json.dumps(cfg, sort_keys=True).encode())
    return h.hexdigest()


def preprocess_target(
    volume: Volume3D, box: core.CropBox, config: PreprocessConfig
) -> Volume3D:
    """Crop + normalize + resize; the path both pair members share (never warped)."""
    cropped = Volume3D(volume.voxels[box.slices], spacing=volume.spacing, intensity_unit=volume.intensity_unit)
    normalized = core.min_max_normalize(cropped, config.resolve_clip(volume.intensity_unit))
    return core.resize_volume_inplane(normalized, config.slice_size)


def build_pair_cache(
    manifest: DatasetManifest,
    cache_dir,
    config: Optional[PreprocessConfig] = None,
    log: Optional[Callable[[str], None]] = None,
) -> list[dict]:
    """Build (idempotently) the registered pair cache; returns the pair index."""
    config = config or PreprocessConfig()
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    emit = log or (lambda msg: None)
    index = []
    for patient in manifest.patients:
        for i, j in enumerate_pairs(manifest, patient.patient_id):
            pair_name = f"{patient.patient_id}__t{i}__t{j}"
            pair_dir = cache_dir / pair_name
            meta_path = pair_dir / "meta.json"
            input_hash = _pair_input_hash(manifest, patient, i, j, config)
            if meta_path.exists():
                meta = json.loads(meta_path.read_text(encoding="utf-8"))
                if meta.get("input_hash") == input_hash:
                    index.append(meta)
                    emit(f"{pair_name}: up to date, skipped")
                    continue
            meta = _build_pair(manifest, patient, i, j, pair_dir, input_hash, config)
            index.append(meta)
            msg = f"{pair_name}: dice {meta['pre_dice']:.3f} -> {meta['post_dice']:.3f}"
            if meta.get("warning"):
                msg += f" (warning: {meta['warning']})"
            emit(msg)
    (cache_dir / "index.json").write_text(
        json.dumps({"pairs": index}, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    return index


def _build_pair(manifest, patient, i, j, pair_dir: Path, input_hash: str, config: PreprocessConfig) -> dict:
    tp_ref, tp_tar = patient.timepoints[i], patient.timepoints[j]
    vol_ref = core.load_volume(manifest.resolve(tp_ref.volume))
    vol_tar = core.load_volume(manifest.resolve(tp_tar.volume))
    lung_ref = core.load_binary_mask(manifest.resolve(tp_ref.lung_mask))
    lung_tar = core.load_binary_mask(manifest.resolve(tp_tar.lung_mask))
    seg_tar = core.load_seg_mask(manifest.resolve(tp_tar.seg_mask)) if tp_tar.seg_mask else None

    # one crop box from the union of both lung masks keeps the pair on a shared grid
    union = BinaryMask3D(
        (lung_ref.voxels | lung_tar.voxels).astype(np.uint8), spacing=lung_ref.spacing
    )
    box = core.lung_bounding_box(union, config.margin_vox)

    ref_pre = preprocess_target(vol_ref, box, config)
    tar_pre = preprocess_target(vol_tar, box, config)
    lung_ref_c = core.resize_mask_inplane(
        BinaryMask3D(lung_ref.voxels[box.slices], spacing=lung_ref.spacing), config.slice_size
    )
    lung_tar_c = core.resize_mask_inplane(
        BinaryMask3D(lung_tar.voxels[box.slices], spacing=lung_tar.spacing), config.slice_size
    )

    transform = register_masks(lung_ref_c, lung_tar_c, config.registration)
    ref_reg = apply_transform(ref_pre, transform, "linear")
    lung_ref_reg = apply_transform(lung_ref_c, transform, "nearest")

    pre_dice = _binary_dice(lung_ref_c.voxels, lung_tar_c.voxels)
    post_dice = _binary_dice(lung_ref_reg.voxels, lung_tar_c.voxels)

    pair_dir.mkdir(parents=True, exist_ok=True)
    core.save_volume(ref_reg, pair_dir / "ref_reg.vol.json")
    core.save_volume(tar_pre, pair_dir / "tar.vol.json")
    core.save_binary_mask(lung_tar_c, pair_dir / "tar_lung.vol.json")
    if seg_tar is not None:
        seg_c = core.resize_mask_inplane(
            core.SegMask3D(seg_tar.labels[box.slices], spacing=seg_tar.spacing), config.slice_size
        )
        core.save_seg_mask(seg_c, pair_dir / "tar_seg.vol.json")
    save_transform(transform, pair_dir / "transform.tfm.json")

    meta = {
        "pair": pair_dir.name,
        "patient_id": patient.patient_id,
        "split": patient.split,
        "ref_index": i,
        "tar_index": j,
        "ref_time": tp_ref.time,
        "tar_time": tp_tar.time,
        "crop_box": box.to_json(),
        "pre_dice": pre_dice,
        "post_dice": post_dice,
        "has_seg": seg_tar is not None,
        "input_hash": input_hash,
        "warning": transform.metadata.get("warning"),
        "registration_converged": transform.metadata.get("converged"),
    }
    meta_path = pair_dir / "meta.json"
    meta_path.write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    return meta


# ---------------------------------------------------------------------------
# Loading cached pairs as training slices
# ---------------------------------------------------------------------------

MIN_LUNG_FRACTION = 0.01


def load_pair_slices(
    pair_dir,
    min_lung_fraction: float = MIN_LUNG_FRACTION,
    slice_step: int = 1,
) -> list[LongitudinalSlicePair]:
    """Axial slices of one cached pair; near-empty lung slices carry no signal and are dropped."""
    pair_dir = Path(pair_dir)
    meta = json.loads((pair_dir / "meta.json").read_text(encoding="utf-8"))
    ref = core.load_volume(pair_dir / "ref_reg.vol.json").voxels
    tar = core.load_volume(pair_dir / "tar.vol.json").voxels
    lung = core.load_binary_mask(pair_dir / "tar_lung.vol.json").voxels
    seg = None
    if (pair_dir / "tar_seg.vol.json").exists():
        seg = core.load_seg_mask(pair_dir / "tar_seg.vol.json").labels
    out = []
    for z in range(0, ref.shape[0], slice_step):
        if lung[z].mean() <= min_lung_fraction:
            continue
        out.append(
            LongitudinalSlicePair(
                reference=ref[z],
                target=tar[z],
                patient_id=meta["patient_id"],
                slice_index=z,
                ref_time=meta["ref_time"],
                tar_time=meta["tar_time"],
                target_seg=None if seg is None else seg[z],
            )
        )
    return out


def load_split_slices(
    cache_dir,
    split: str,
    min_lung_fraction: float = MIN_LUNG_FRACTION,
    slice_step: int = 1,
) -> list[LongitudinalSlicePair]:
    """All usable slices of a split, in deterministic pair order."""
    cache_dir = Path(cache_dir)
    index = json.loads((cache_dir / "index.json").read_text(encoding="utf-8"))["pairs"]
    slices = []
    for meta in sorted(index, key=lambda m: m["pair"]):
        if meta["split"] != split:
            continue
        slices.extend(load_pair_slices(cache_dir / meta["pair"], min_lung_fraction, slice_step))
    return slices
