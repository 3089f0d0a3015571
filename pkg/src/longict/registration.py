"""Mask-driven free-form deformation on a cubic B-spline control grid.

The displacement at voxel position p is the tensor-product spline
``u(p) = sum_{l,m,n in 0..3} B_l(u) B_m(v) B_n(w) phi[i+l, j+m, k+n]`` over
the 4x4x4 support of p. Warping is backward: ``output(p) = input(p + u(p))``
with background fill 0. Registration minimizes the mean squared difference of
Gaussian-smoothed masks plus a bending-energy penalty, coarse to fine.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
from scipy import ndimage

from .core import BinaryMask3D, SegMask3D, Volume3D

TFM_HEADER_SUFFIX = ".tfm.json"
TFM_RAW_SUFFIX = ".tfm.raw"


def bspline_weights(u: np.ndarray) -> np.ndarray:
    """The four cubic B-spline basis values at fractional offset u in [0, 1)."""
    u = np.asarray(u, dtype=np.float64)
    u2 = u * u
    u3 = u2 * u
    return np.stack(
        [
            (1.0 - u) ** 3 / 6.0,
            (3.0 * u3 - 6.0 * u2 + 4.0) / 6.0,
            (-3.0 * u3 + 3.0 * u2 + 3.0 * u + 1.0) / 6.0,
            u3 / 6.0,
        ],
        axis=-1,
    )


def _grid_points_needed(size: int, spacing: float) -> int:
    # one control point of padding before the domain plus cubic support after it
    return int(math.floor((size - 1) / spacing)) + 4


@lru_cache(maxsize=256)
def _cached_basis_matrix(size: int, n_points: int, spacing: float, origin: float) -> np.ndarray:
    return basis_matrix(np.arange(size, dtype=np.float64), n_points, spacing, origin)


def basis_matrix(positions: np.ndarray, n_points: int, spacing: float, origin: float) -> np.ndarray:
    """Dense (len(positions), n_points) matrix of cubic B-spline weights."""
    positions = np.asarray(positions, dtype=np.float64)
    tau = (positions - origin) / spacing
    j = np.floor(tau).astype(np.int64)
    w = bspline_weights(tau - j)
    mat = np.zeros((positions.size, n_points), dtype=np.float64)
    rows = np.arange(positions.size)
    for l in range(4):
        cols = j - 1 + l
        if cols.min() < 0 or cols.max() >= n_points:
            raise ValueError(
                f"control grid does not cover position range "
                f"[{positions.min()}, {positions.max()}] with cubic support"
            )
        mat[rows, cols] += w[:, l]
    return mat


@dataclass
class BSplineTransform:
    """Displacement coefficients (voxels) on a regular control grid over a voxel domain."""

    domain_shape: tuple[int, int, int]
    spacing: tuple[float, float, float]
    coeffs: np.ndarray  # (3, nz, ny, nx), displacement vectors per control point
    origin: tuple[float, float, float] = None  # voxel position of control point index 0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.domain_shape = tuple(int(s) for s in self.domain_shape)
        self.spacing = tuple(float(s) for s in self.spacing)
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"control spacing must be positive, got {self.spacing}")
        if self.origin is None:
            self.origin = tuple(-s for s in self.spacing)
        self.origin = tuple(float(o) for o in self.origin)
        self.coeffs = np.ascontiguousarray(self.coeffs, dtype=np.float64)
        if self.coeffs.ndim != 4 or self.coeffs.shape[0] != 3:
            raise ValueError(f"coeffs must have shape (3, nz, ny, nx), got {self.coeffs.shape}")
        if not np.isfinite(self.coeffs).all():
            raise ValueError("coeffs contain non-finite values")
        for ax in range(3):
            size = self.domain_shape[ax]
            n = self.coeffs.shape[1 + ax]
            if self.origin[ax] > -self.spacing[ax] + 1e-9:
                raise ValueError(
                    f"grid must pad the domain by >= 1 control point on axis {ax} "
                    f"(origin {self.origin[ax]} > -spacing)"
                )
            top = self.origin[ax] + (n - 1) * self.spacing[ax]
            if top < size - 1 + self.spacing[ax] - 1e-9:
                raise ValueError(
                    f"grid too small on axis {ax}: top control point at {top}, "
                    f"domain needs coverage past {size - 1 + self.spacing[ax]}"
                )

    @property
    def grid_shape(self) -> tuple[int, int, int]:
        return self.coeffs.shape[1:]

    @classmethod
    def identity(cls, domain_shape, spacing) -> "BSplineTransform":
        """Zero-displacement transform whose grid covers ``domain_shape``."""
        domain_shape = tuple(int(s) for s in domain_shape)
        if np.isscalar(spacing):
            spacing = (float(spacing),) * 3
        spacing = tuple(float(s) for s in spacing)
        grid = tuple(_grid_points_needed(s, d) for s, d in zip(domain_shape, spacing))
        return cls(
            domain_shape=domain_shape,
            spacing=spacing,
            coeffs=np.zeros((3,) + grid, dtype=np.float64),
        )

    def _axis_matrices(self) -> list[np.ndarray]:
        return [
            _cached_basis_matrix(self.domain_shape[ax], self.grid_shape[ax], self.spacing[ax], self.origin[ax])
            for ax in range(3)
        ]

    def displacement_field(self) -> np.ndarray:
        """Dense (3, Z, Y, X) displacement over the whole voxel domain."""
        mz, my, mx = self._axis_matrices()
        return np.einsum("za,yb,xc,vabc->vzyx", mz, my, mx, self.coeffs, optimize=True)

    def displacement_at(self, point: Sequence[float]) -> np.ndarray:
        """Displacement vector at a single voxel-space point inside the domain."""
        point = np.asarray(point, dtype=np.float64)
        if point.shape != (3,):
            raise ValueError(f"point must have 3 components, got shape {point.shape}")
        for ax in range(3):
            if not (0.0 <= point[ax] <= self.domain_shape[ax] - 1):
                raise ValueError(
                    f"point {tuple(point)} outside domain of shape {self.domain_shape} on axis {ax}"
                )
        return self.displacement_at_points(point[:, None])[:, 0]

    def displacement_at_points(self, points: np.ndarray) -> np.ndarray:
        """Displacements at an arbitrary (3, K) batch of in-domain points."""
        points = np.asarray(points, dtype=np.float64)
        mats = [
            basis_matrix(points[ax], self.grid_shape[ax], self.spacing[ax], self.origin[ax])
            for ax in range(3)
        ]
        # contract per point: u[v,k] = sum_{abc} Mz[k,a] My[k,b] Mx[k,c] phi[v,a,b,c]
        t = np.einsum("ka,vabc->vkbc", mats[0], self.coeffs, optimize=True)
        t = np.einsum("kb,vkbc->vkc", mats[1], t, optimize=True)
        return np.einsum("kc,vkc->vk", mats[2], t, optimize=True)


# ---------------------------------------------------------------------------
# Warping
# ---------------------------------------------------------------------------


def trilinear_sample(img: np.ndarray, coords: np.ndarray, fill: float = 0.0, with_grad: bool = False):
    """Sample ``img`` at float coords (3, ...); out-of-bounds corners read ``fill``.

    With ``with_grad`` also returns d(value)/d(coords), shape (3, ...).
    """
    img = np.asarray(img, dtype=np.float64)
    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    shape = img.shape
    val = np.zeros(coords.shape[1:], dtype=np.float64)
    grad = np.zeros_like(coords) if with_grad else None
    for dz in (0, 1):
        for dy in (0, 1):
            for dx in (0, 1):
                idx = [base[0] + dz, base[1] + dy, base[2] + dx]
                valid = (
                    (idx[0] >= 0) & (idx[0] < shape[0])
                    & (idx[1] >= 0) & (idx[1] < shape[1])
                    & (idx[2] >= 0) & (idx[2] < shape[2])
                )
                v = np.where(
                    valid,
                    img[np.clip(idx[0], 0, shape[0] - 1),
                        np.clip(idx[1], 0, shape[1] - 1),
                        np.clip(idx[2], 0, shape[2] - 1)],
                    fill,
                )
                wz = frac[0] if dz else 1.0 - frac[0]
                wy = frac[1] if dy else 1.0 - frac[1]
                wx = frac[2] if dx else 1.0 - frac[2]
                val += wz * wy * wx * v
                if with_grad:
                    grad[0] += (1.0 if dz else -1.0) * wy * wx * v
                    grad[1] += (1.0 if dy else -1.0) * wz * wx * v
                    grad[2] += (1.0 if dx else -1.0) * wz * wy * v
    if with_grad:
        return val, grad
    return val


def nearest_sample(img: np.ndarray, coords: np.ndarray, fill: float = 0.0) -> np.ndarray:
    idx = np.rint(coords).astype(np.int64)
    shape = img.shape
    valid = (
        (idx[0] >= 0) & (idx[0] < shape[0])
        & (idx[1] >= 0) & (idx[1] < shape[1])
        & (idx[2] >= 0) & (idx[2] < shape[2])
    )
    gathered = img[np.clip(idx[0], 0, shape[0] - 1),
                   np.clip(idx[1], 0, shape[1] - 1),
                   np.clip(idx[2], 0, shape[2] - 1)]
    return np.where(valid, gathered, np.asarray(fill, dtype=img.dtype))


def _sample_coords(transform: BSplineTransform) -> np.ndarray:
    zz, yy, xx = np.meshgrid(
        np.arange(transform.domain_shape[0], dtype=np.float64),
        np.arange(transform.domain_shape[1], dtype=np.float64),
        np.arange(transform.domain_shape[2], dtype=np.float64),
        indexing="ij",
    )
    return np.stack([zz, yy, xx]) + transform.displacement_field()


def warp_array(
    arr: np.ndarray, transform: BSplineTransform, interpolation: str = "linear", fill: float = 0.0
) -> np.ndarray:
    """Backward-warp a [z, y, x] array: output(p) = input(p + u(p))."""
    arr = np.asarray(arr)
    if tuple(arr.shape) != transform.domain_shape:
        raise ValueError(f"array shape {arr.shape} does not match transform domain {transform.domain_shape}")
    coords = _sample_coords(transform)
    if interpolation == "linear":
        return trilinear_sample(arr, coords, fill=fill)
    if interpolation == "nearest":
        return nearest_sample(arr, coords, fill=fill)
    raise ValueError(f"interpolation must be 'linear' or 'nearest', got {interpolation!r}")


def apply_transform(image, transform: BSplineTransform, interpolation: str = "linear"):
    """Warp a volume or mask; label masks must use nearest interpolation."""
    if isinstance(image, Volume3D):
        out = warp_array(image.voxels, transform, interpolation, fill=0.0)
        out = out.astype(np.float32)
        if image.intensity_unit == "normalized":
            out = np.clip(out, 0.0, 1.0)
        return Volume3D(out, spacing=image.spacing, intensity_unit=image.intensity_unit)
    if isinstance(image, BinaryMask3D):
        if interpolation != "nearest":
            raise ValueError("label masks must use nearest interpolation")
        out = warp_array(image.voxels, transform, "nearest", fill=0)
        return BinaryMask3D(out.astype(np.uint8), spacing=image.spacing)
    if isinstance(image, SegMask3D):
        if interpolation != "nearest":
            raise ValueError("label masks must use nearest interpolation")
        out = warp_array(image.labels, transform, "nearest", fill=0)
        return SegMask3D(out.astype(np.uint8), spacing=image.spacing)
    if isinstance(image, np.ndarray):
        return warp_array(image, transform, interpolation)
    raise TypeError(f"unsupported image type {type(image)!r}")


# ---------------------------------------------------------------------------
# Registration objective
# ---------------------------------------------------------------------------


def bending_energy(coeffs: np.ndarray, spacing: Sequence[float]) -> tuple[float, np.ndarray]:
    """Thin-plate bending energy of the control grid and its gradient.

    Second derivatives are central differences of the coefficients; the energy
    is the mean of the squared terms with the usual multiplicity 2 for the
    mixed derivatives. Zero for any constant displacement.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    grad = np.zeros_like(coeffs)
    norm = coeffs.size
    total = 0.0

    def pure(axis):
        nonlocal total
        h2 = spacing[axis] ** 2
        n = coeffs.shape[1 + axis]
        if n < 3:
            return
        sl = [slice(None)] * 4
        lo, mid, hi = list(sl), list(sl), list(sl)
        lo[1 + axis] = slice(0, n - 2)
        mid[1 + axis] = slice(1, n - 1)
        hi[1 + axis] = slice(2, n)
        d = (coeffs[tuple(hi)] - 2.0 * coeffs[tuple(mid)] + coeffs[tuple(lo)]) / h2
        total += float((d * d).sum())
        r = 2.0 * d / h2
        grad[tuple(hi)] += r
        grad[tuple(mid)] -= 2.0 * r
        grad[tuple(lo)] += r

    def mixed(ax_a, ax_b):
        nonlocal total
        denom = 4.0 * spacing[ax_a] * spacing[ax_b]
        na, nb = coeffs.shape[1 + ax_a], coeffs.shape[1 + ax_b]
        if na < 3 or nb < 3:
            return
        def sel(da, db):
            sl = [slice(None)] * 4
            sl[1 + ax_a] = slice(1 + da, coeffs.shape[1 + ax_a] - 1 + da)
            sl[1 + ax_b] = slice(1 + db, coeffs.shape[1 + ax_b] - 1 + db)
            return tuple(sl)
        d = (coeffs[sel(1, 1)] - coeffs[sel(1, -1)] - coeffs[sel(-1, 1)] + coeffs[sel(-1, -1)]) / denom
        total += 2.0 * float((d * d).sum())
        r = 4.0 * d / denom
        grad[sel(1, 1)] += r
        grad[sel(1, -1)] -= r
        grad[sel(-1, 1)] -= r
        grad[sel(-1, -1)] += r

    for ax in range(3):
        pure(ax)
    mixed(0, 1)
    mixed(0, 2)
    mixed(1, 2)
    return total / norm, grad / norm


def objective_and_gradient(
    transform: BSplineTransform,
    moving: np.ndarray,
    fixed: np.ndarray,
    bending_weight: float,
) -> tuple[float, np.ndarray]:
    """MSE(warped moving, fixed) + lambda * bending; gradient w.r.t. coefficients."""
    moving = np.asarray(moving, dtype=np.float64)
    fixed = np.asarray(fixed, dtype=np.float64)
    coords = _sample_coords(transform)
    warped, img_grad = trilinear_sample(moving, coords, fill=0.0, with_grad=True)
    resid = warped - fixed
    n = resid.size
    sim = float((resid * resid).sum()) / n
    # chain rule: d(sim)/d(phi[v,a,b,c]) = sum_p (2/n) resid(p) dI/dq_v(p) * Bz[p_z,a] By[p_y,b] Bx[p_x,c]
    weighted = (2.0 / n) * resid * img_grad
    mz, my, mx = transform._axis_matrices()
    grad_sim = np.einsum("za,yb,xc,vzyx->vabc", mz, my, mx, weighted, optimize=True)
    value = sim
    grad = grad_sim
    if bending_weight > 0.0:
        be, gbe = bending_energy(transform.coeffs, transform.spacing)
        value = value + bending_weight * be
        grad = grad + bending_weight * gbe
    return value, grad


# ---------------------------------------------------------------------------
# Mask registration
# ---------------------------------------------------------------------------


@dataclass
class RegistrationParams:
    """Coarse-to-fine settings; control spacing is in that level's voxels."""

    levels: int = 3
    control_spacing: Union[float, tuple] = 8.0
    step_size: float = 1.0  # max coefficient update per iteration, voxels
    max_iters: int = 60
    bending_weight: float = 0.01
    tol: float = 1e-4  # relative loss decrease considered converged
    smoothing_sigma: float = 2.0
    min_level_size: int = 8

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        spacings = self.spacing_per_level()
        if any(s < 4 for s in spacings):
            raise ValueError(f"control spacing must be >= 4 voxels, got {spacings}")
        if self.bending_weight < 0:
            raise ValueError("bending weight must be >= 0")
        if self.step_size <= 0 or self.max_iters < 1:
            raise ValueError("step_size and max_iters must be positive")

    def spacing_per_level(self) -> tuple:
        if np.isscalar(self.control_spacing):
            return (float(self.control_spacing),) * self.levels
        sp = tuple(float(s) for s in self.control_spacing)
        if len(sp) != self.levels:
            raise ValueError(f"control_spacing must have one entry per level, got {sp}")
        return sp


def _as_float_mask(mask) -> np.ndarray:
    if isinstance(mask, BinaryMask3D):
        return mask.voxels.astype(np.float64)
    arr = np.asarray(mask)
    if arr.ndim == 2:
        arr = arr[None]
    return arr.astype(np.float64)


def _prolong(coarse: BSplineTransform, fine_shape, fine_spacing: float, frozen) -> BSplineTransform:
    """Warm-start a finer-level transform by sampling the coarse displacement field."""
    fine = BSplineTransform.identity(fine_shape, fine_spacing)
    scale = np.array(
        [cs / fs for cs, fs in zip(coarse.domain_shape, fine_shape)], dtype=np.float64
    )
    # fine control point positions, mapped into the coarse domain and clamped
    grids = [
        np.clip(
            (fine.origin[ax] + np.arange(fine.grid_shape[ax]) * fine.spacing[ax]) * scale[ax],
            0.0,
            coarse.domain_shape[ax] - 1.0,
        )
        for ax in range(3)
    ]
    pos = np.stack(np.meshgrid(*grids, indexing="ij"))
    pts = pos.reshape(3, -1)
    disp = coarse.displacement_at_points(pts)  # coarse-voxel units
    for ax in range(3):
        fine.coeffs[ax] = (disp[ax] / scale[ax]).reshape(fine.grid_shape)
        if frozen[ax]:
            fine.coeffs[ax] = 0.0
    return fine


def register_masks(moving_mask, fixed_mask, params: Optional[RegistrationParams] = None) -> BSplineTransform:
    """Fit the transform warping ``moving_mask`` onto ``fixed_mask``.

    Never modifies the fixed image. On nonconvergence within the iteration
    budget the best transform so far is returned with ``metadata["converged"]
    = False``.
    """
    params = params or RegistrationParams()
    moving = _as_float_mask(moving_mask)
    fixed = _as_float_mask(fixed_mask)
    if moving.shape != fixed.shape:
        raise ValueError(f"mask shapes differ: {moving.shape} vs {fixed.shape}")
    if moving.sum() == 0 or fixed.sum() == 0:
        raise ValueError("masks must be nonempty")

    moving_s = ndimage.gaussian_filter(moving, params.smoothing_sigma)
    fixed_s = ndimage.gaussian_filter(fixed, params.smoothing_sigma)

    # image pyramid, coarsest first; axes below min_level_size stop shrinking
    pyramid = [(moving_s, fixed_s)]
    for _ in range(params.levels - 1):
        prev_m, prev_f = pyramid[0]
        factors = tuple(0.5 if s >= 2 * params.min_level_size else 1.0 for s in prev_m.shape)
        if all(f == 1.0 for f in factors):
            pyramid.insert(0, (prev_m, prev_f))
            continue
        pyramid.insert(
            0,
            (
                ndimage.zoom(prev_m, factors, order=1),
                ndimage.zoom(prev_f, factors, order=1),
            ),
        )

    frozen = tuple(s == 1 for s in moving.shape)
    spacings = params.spacing_per_level()
    transform = None
    level_losses = []
    converged = True
    for level, (mov, fix) in enumerate(pyramid):
        if transform is None:
            transform = BSplineTransform.identity(mov.shape, spacings[level])
        else:
            transform = _prolong(transform, mov.shape, spacings[level], frozen)
        transform, loss, level_ok = _optimize_level(transform, mov, fix, params, frozen)
        level_losses.append(loss)
        if level == len(pyramid) - 1:
            converged = level_ok
    transform.metadata = {
        "converged": bool(converged),
        "final_loss": float(level_losses[-1]),
        "level_losses": [float(v) for v in level_losses],
    }
    if not converged:
        transform.metadata["warning"] = "registration stopped at iteration budget before convergence"
    return transform


def _optimize_level(transform, moving, fixed, params, frozen):
    phi = transform.coeffs.copy()

    def masked(g):
        for ax in range(3):
            if frozen[ax]:
                g[ax] = 0.0
        return g

    def evaluate(p):
        t = BSplineTransform(
            domain_shape=transform.domain_shape,
            spacing=transform.spacing,
            coeffs=p,
            origin=transform.origin,
        )
        v, g = objective_and_gradient(t, moving, fixed, params.bending_weight)
        return v, masked(g)

    loss, grad = evaluate(phi)
    step = params.step_size
    converged = False
    for _ in range(params.max_iters):
        gmax = float(np.abs(grad).max())
        if gmax == 0.0:
            converged = True
            break
        trial = phi - step * grad / gmax
        trial_loss, trial_grad = evaluate(trial)
        if trial_loss < loss:
            improvement = (loss - trial_loss) / max(loss, 1e-30)
            phi, loss, grad = trial, trial_loss, trial_grad
            step = min(step * 1.2, 4.0 * params.step_size)
            if improvement < params.tol:
                converged = True
                break
        else:
            step *= 0.5
            if step < 1e-3 * params.step_size:
                converged = True
                break
    out = BSplineTransform(
        domain_shape=transform.domain_shape,
        spacing=transform.spacing,
        coeffs=phi,
        origin=transform.origin,
    )
    return out, loss, converged


# ---------------------------------------------------------------------------
# Serialization (same two-file convention as volumes)
# ---------------------------------------------------------------------------


def save_transform(transform: BSplineTransform, path) -> None:
    p = Path(path)
    if not p.name.endswith(TFM_HEADER_SUFFIX):
        raise ValueError(f"transform path must end with '{TFM_HEADER_SUFFIX}', got {p}")
    raw = p.with_name(p.name[: -len(TFM_HEADER_SUFFIX)] + TFM_RAW_SUFFIX)
    header = {
        "grid_shape": list(transform.grid_shape),
        "spacing": list(transform.spacing),
        "origin": list(transform.origin),
        "domain_shape": list(transform.domain_shape),
        "dtype": "f32le",
        "metadata": transform.metadata,
    }
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(header, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    raw.write_bytes(np.ascontiguousarray(transform.coeffs, dtype="<f4").tobytes())


def load_transform(path) -> BSplineTransform:
    p = Path(path)
    if not p.name.endswith(TFM_HEADER_SUFFIX):
        raise ValueError(f"transform path must end with '{TFM_HEADER_SUFFIX}', got {p}")
    raw = p.with_name(p.name[: -len(TFM_HEADER_SUFFIX)] + TFM_RAW_SUFFIX)
    header = json.loads(p.read_text(encoding="utf-8"))
    grid = tuple(header["grid_shape"])
    expected = 3 * int(np.prod(grid)) * 4
    payload = raw.read_bytes()
    if len(payload) != expected:
        raise ValueError(f"coefficient payload of {raw} has {len(payload)} bytes, expected {expected}")
    coeffs = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape((3,) + grid)
    return BSplineTransform(
        domain_shape=tuple(header["domain_shape"]),
        spacing=tuple(header["spacing"]),
        coeffs=coeffs,
        origin=tuple(header["origin"]),
        metadata=header.get("metadata", {}),
    )
