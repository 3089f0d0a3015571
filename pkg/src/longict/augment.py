"""Pretext-task corruptions of the target slice.

Both corruptions act on a layout of random, non-overlapping square patches:
black patches zero them out, context disordering swaps the contents of
equal-sized patch pairs (preserving the slice's intensity histogram). The
returned binary mask marks every modified-layout pixel and drives the patch
term of the restoration loss.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import LongitudinalSlicePair

TASK_BLACK = "black"
TASK_DISORDER = "disorder"

DEFAULT_COUNT_RANGE = (16, 25)
REFERENCE_RESOLUTION = 128
REFERENCE_SIDE_RANGE = (8, 16)


class LayoutInfeasibleError(ValueError):
    def __init__(self, message: str, achieved_count: int):
        super().__init__(message)
        self.achieved_count = achieved_count


@dataclass(frozen=True)
class PatchBox:
    top: int
    left: int
    side: int

    def __post_init__(self):
        if self.side < 1:
            raise ValueError(f"patch side must be >= 1, got {self.side}")
        if self.top < 0 or self.left < 0:
            raise ValueError(f"patch origin must be non-negative, got ({self.top}, {self.left})")

    def overlaps(self, other: "PatchBox") -> bool:
        if self.top + self.side <= other.top or other.top + other.side <= self.top:
            return False
        if self.left + self.side <= other.left or other.left + other.side <= self.left:
            return False
        return True

    def inside(self, shape: tuple[int, int]) -> bool:
        return self.top + self.side <= shape[0] and self.left + self.side <= shape[1]


@dataclass
class PatchLayout:
    boxes: list[PatchBox]
    pairing: Optional[list[tuple[int, int]]] = None

    def __post_init__(self):
        for i, a in enumerate(self.boxes):
            for b in self.boxes[i + 1 :]:
                if a.overlaps(b):
                    raise ValueError(f"patch boxes overlap: {a} and {b}")
        if self.pairing is not None:
            used = [i for pair in self.pairing for i in pair]
            if sorted(used) != list(range(len(self.boxes))):
                raise ValueError("pairing must partition all box indices")
            for i, j in self.pairing:
                if self.boxes[i].side != self.boxes[j].side:
                    raise ValueError(f"paired boxes must have equal sides: {self.boxes[i]} vs {self.boxes[j]}")

    def validate_for(self, shape: tuple[int, int]) -> None:
        for box in self.boxes:
            if not box.inside(shape):
                raise ValueError(f"box {box} exceeds image shape {shape}")

    def mask(self, shape: tuple[int, int]) -> np.ndarray:
        """Binary H x W indicator of the box union."""
        self.validate_for(shape)
        m = np.zeros(shape, dtype=np.uint8)
        for box in self.boxes:
            m[box.top : box.top + box.side, box.left : box.left + box.side] = 1
        return m


def default_side_range(image_shape: tuple[int, int]) -> tuple[int, int]:
    """Patch side range of [8, 16] px at 128 px, scaled proportionally with resolution."""
    scale = min(image_shape) / REFERENCE_RESOLUTION
    lo = max(1, round(REFERENCE_SIDE_RANGE[0] * scale))
    hi = max(lo, round(REFERENCE_SIDE_RANGE[1] * scale))
    return lo, hi


def sample_layout(
    rng: np.random.Generator,
    image_shape: tuple[int, int],
    count_range: tuple[int, int] = DEFAULT_COUNT_RANGE,
    side_range: Optional[tuple[int, int]] = None,
    paired: bool = False,
    max_attempts: int = 1000,
) -> PatchLayout:
    """Sample a non-overlapping in-bounds layout by rejection.

    The patch count is drawn uniformly from ``count_range`` (rounded down to
    an even number, minimum 2, when paired); the side of each patch (of each
    pair when paired) is drawn uniformly from ``side_range``. Placement
    failure after ``max_attempts`` rejections per patch raises rather than
    silently shrinking the layout.
    """
    h, w = image_shape
    if side_range is None:
        side_range = default_side_range(image_shape)
    count = int(rng.integers(count_range[0], count_range[1] + 1))
    if paired:
        count = max(2, count - (count % 2))

    boxes: list[PatchBox] = []

    def place(side: int) -> PatchBox:
        if side > h or side > w:
            raise LayoutInfeasibleError(
                f"layout infeasible: side {side} exceeds image {image_shape}; placed {len(boxes)} of {count}",
                achieved_count=len(boxes),
            )
        for _ in range(max_attempts):
            top = int(rng.integers(0, h - side + 1))
            left = int(rng.integers(0, w - side + 1))
            box = PatchBox(top=top, left=left, side=side)
            if not any(box.overlaps(b) for b in boxes):
                return box
        raise LayoutInfeasibleError(
            f"layout infeasible: could not place patch {len(boxes) + 1} of {count} "
            f"(side {side}) within {max_attempts} attempts; placed {len(boxes)}",
            achieved_count=len(boxes),
        )

    if paired:
        pairing = []
        for _ in range(count // 2):
            side = int(rng.integers(side_range[0], side_range[1] + 1))
            first = place(side)
            boxes.append(first)
            second = place(side)
            boxes.append(second)
            pairing.append((len(boxes) - 2, len(boxes) - 1))
        return PatchLayout(boxes=boxes, pairing=pairing)

    for _ in range(count):
        side = int(rng.integers(side_range[0], side_range[1] + 1))
        boxes.append(place(side))
    return PatchLayout(boxes=boxes)


def black_patches(image: np.ndarray, layout: PatchLayout) -> tuple[np.ndarray, np.ndarray]:
    """Zero the layout's pixels (black in normalized space); everything else is untouched."""
    layout.validate_for(image.shape)
    out = image.copy()
    for box in layout.boxes:
        out[box.top : box.top + box.side, box.left : box.left + box.side] = 0.0
    return out, layout.mask(image.shape)


def context_disordering(image: np.ndarray, layout: PatchLayout) -> tuple[np.ndarray, np.ndarray]:
    """Swap the contents of each patch pair; the pixel multiset is exactly preserved."""
    if layout.pairing is None:
        raise ValueError("context disordering requires a paired layout")
    layout.validate_for(image.shape)
    out = image.copy()
    for i, j in layout.pairing:
        a, b = layout.boxes[i], layout.boxes[j]
        patch_a = out[a.top : a.top + a.side, a.left : a.left + a.side].copy()
        out[a.top : a.top + a.side, a.left : a.left + a.side] = out[
            b.top : b.top + b.side, b.left : b.left + b.side
        ]
        out[b.top : b.top + b.side, b.left : b.left + b.side] = patch_a
    return out, layout.mask(image.shape)


def augment_pair(
    pair: LongitudinalSlicePair,
    task: str,
    rng: np.random.Generator,
    count_range: tuple[int, int] = DEFAULT_COUNT_RANGE,
    side_range: Optional[tuple[int, int]] = None,
) -> tuple[LongitudinalSlicePair, np.ndarray]:
    """Corrupt the target slice only; the reference passes through untouched.

    The training tuple is (input=[reference, corrupted target], ground truth =
    original target, mask); the caller keeps the original pair for the truth.
    """
    if task == TASK_BLACK:
        layout = sample_layout(rng, pair.target.shape, count_range, side_range, paired=False)
        target_aug, mask = black_patches(pair.target, layout)
    elif task == TASK_DISORDER:
        layout = sample_layout(rng, pair.target.shape, count_range, side_range, paired=True)
        target_aug, mask = context_disordering(pair.target, layout)
    else:
        raise ValueError(f"task must be '{TASK_BLACK}' or '{TASK_DISORDER}', got {task!r}")
    augmented = LongitudinalSlicePair(
        reference=pair.reference,
        target=target_aug,
        patient_id=pair.patient_id,
        slice_index=pair.slice_index,
        ref_time=pair.ref_time,
        tar_time=pair.tar_time,
        target_seg=pair.target_seg,
        target_labels=pair.target_labels,
    )
    return augmented, mask
