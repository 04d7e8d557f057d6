"""3D voxel grids with world-space geometry: core data types and resampling.

All volumes pair a dense data array with a :class:`Geometry`. Data arrays are
indexed ``[x, y, z]`` and the documented linear ordering of voxels is
x-fastest, i.e. voxel ``(x, y, z)`` has linear index ``x + nx*y + nx*ny*z``.
Volumes are immutable after construction (arrays are marked read-only) and
safe to share across workers.
"""

import math
from dataclasses import dataclass, field

import numpy as np

Triple = tuple[float, float, float]

_AFFINE_TOL = 1e-6


class GeometryMismatchError(ValueError):
    """Raised when an operation requires volumes on the same grid."""


@dataclass(frozen=True)
class Geometry:
    """Voxel grid layout: dimensions, spacing (mm) and a voxel-to-world affine.

    ``affine`` is a 4x4 matrix mapping a voxel index (as a homogeneous column
    vector) to world coordinates in mm. The upper-left 3x3 column norms must
    equal ``spacing``.
    """

    dims: tuple[int, int, int]
    spacing: Triple
    affine: np.ndarray = field(compare=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        affine = np.asarray(self.affine, dtype=np.float64)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError(f"dims must be 3 positive integers, got {self.dims}")
        if len(spacing) != 3 or any(s <= 0 for s in spacing):
            raise ValueError(f"spacing must be 3 positive reals, got {self.spacing}")
        if affine.shape != (4, 4):
            raise ValueError(f"affine must be 4x4, got shape {affine.shape}")
        if abs(np.linalg.det(affine[:3, :3])) < 1e-12:
            raise ValueError("affine is not invertible")
        norms = np.linalg.norm(affine[:3, :3], axis=0)
        if np.any(np.abs(norms - np.asarray(spacing)) > _AFFINE_TOL):
            raise ValueError(
                f"affine column norms {norms} do not match spacing {spacing}"
            )
        affine = affine.copy()
        affine.flags.writeable = False
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "affine", affine)

    @classmethod
    def from_affine(cls, dims, affine) -> "Geometry":
        """Build a geometry deriving the spacing from the affine column norms."""
        affine = np.asarray(affine, dtype=np.float64)
        spacing = tuple(np.linalg.norm(affine[:3, :3], axis=0))
        return cls(tuple(dims), spacing, affine)

    @classmethod
    def isotropic(cls, dims, spacing_mm: float = 1.0) -> "Geometry":
        """Axis-aligned geometry with equal spacing and origin at voxel (0,0,0)."""
        aff = np.diag([spacing_mm, spacing_mm, spacing_mm, 1.0])
        return cls(tuple(dims), (spacing_mm,) * 3, aff)

    @property
    def voxel_volume_mm3(self) -> float:
        return self.spacing[0] * self.spacing[1] * self.spacing[2]

    def voxel_to_world(self, idx: np.ndarray) -> np.ndarray:
        """Map voxel indices, shape (3, n) or (3,), to world mm coordinates."""
        idx = np.asarray(idx, dtype=np.float64)
        single = idx.ndim == 1
        pts = idx.reshape(3, -1)
        out = self.affine[:3, :3] @ pts + self.affine[:3, 3:4]
        return out[:, 0] if single else out

    def world_to_voxel(self, pts: np.ndarray) -> np.ndarray:
        """Map world mm coordinates, shape (3, n) or (3,), to voxel indices."""
        pts = np.asarray(pts, dtype=np.float64)
        single = pts.ndim == 1
        pts = pts.reshape(3, -1)
        inv = np.linalg.inv(self.affine)
        out = inv[:3, :3] @ pts + inv[:3, 3:4]
        return out[:, 0] if single else out

    def world_center(self) -> np.ndarray:
        """World coordinates of the grid center (center of the voxel lattice)."""
        center_idx = (np.asarray(self.dims, dtype=np.float64) - 1.0) / 2.0
        return self.voxel_to_world(center_idx)

    def matches(self, other: "Geometry", tol: float = _AFFINE_TOL) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.affine, other.affine, atol=tol, rtol=0.0)
        )


def _require_same_geometry(a, b, what: str = "volumes"):
    if not a.geom.matches(b.geom):
        raise GeometryMismatchError(f"geometry mismatch between {what}")


class _Volume:
    """Shared plumbing for the three concrete volume types."""

    def __init__(self, geom: Geometry, data: np.ndarray):
        data = np.asarray(data)
        if tuple(data.shape) != geom.dims:
            raise ValueError(
                f"data shape {data.shape} does not match geometry dims {geom.dims}"
            )
        data = self._coerce(data)
        data.flags.writeable = False
        self.geom = geom
        self.data = data

    def _coerce(self, data: np.ndarray) -> np.ndarray:
        return data

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.geom.dims

    @property
    def spacing(self) -> Triple:
        return self.geom.spacing

    @property
    def affine(self) -> np.ndarray:
        return self.geom.affine

    def with_data(self, data: np.ndarray):
        return type(self)(self.geom, data)


class ScalarVolume(_Volume):
    """Real-valued intensity image. Data is float32 or float64, always finite."""

    def _coerce(self, data):
        if data.dtype == np.float32:
            data = np.array(data, dtype=np.float32)
        else:
            data = np.asarray(data, dtype=np.float64).copy()
        if not np.all(np.isfinite(data)):
            raise ValueError("scalar volume contains non-finite values")
        return data


class LabelVolume(_Volume):
    """Integer parcellation with labels in [0, K) and K class names."""

    def __init__(self, geom: Geometry, data: np.ndarray, class_names=None):
        super().__init__(geom, data)
        max_label = int(self.data.max()) if self.data.size else 0
        k = max(2, max_label + 1)
        if class_names is None:
            class_names = [f"class_{i}" for i in range(k)]
        class_names = list(class_names)
        if len(class_names) < k:
            raise ValueError(
                f"{len(class_names)} class names cannot cover labels up to {max_label}"
            )
        self.class_names = class_names

    def _coerce(self, data):
        if not np.issubdtype(data.dtype, np.integer):
            raise ValueError(f"label volume requires integer data, got {data.dtype}")
        if data.size and data.min() < 0:
            raise ValueError("label volume contains negative labels")
        return np.asarray(data, dtype=np.int32).copy()

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def with_data(self, data):
        out = LabelVolume(self.geom, data, None)
        if out.num_classes <= len(self.class_names):
            out.class_names = list(self.class_names)
        return out


class LesionMask(_Volume):
    """Binary foreground mask stored as uint8 {0, 1}."""

    def _coerce(self, data):
        if data.dtype == np.bool_:
            return data.astype(np.uint8)
        if not np.issubdtype(data.dtype, np.integer) and not np.issubdtype(
            data.dtype, np.floating
        ):
            raise ValueError(f"mask requires numeric data, got {data.dtype}")
        arr = np.asarray(data)
        vals = np.unique(arr)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError("mask values must be exactly 0 or 1")
        return arr.astype(np.uint8)

    @classmethod
    def empty(cls, geom: Geometry) -> "LesionMask":
        return cls(geom, np.zeros(geom.dims, dtype=np.uint8))

    @property
    def foreground(self) -> np.ndarray:
        return self.data.astype(bool)

    def foreground_count(self) -> int:
        return int(self.data.sum())

    def volume_mm3(self) -> float:
        return self.foreground_count() * self.geom.voxel_volume_mm3


def as_lesion_mask(vol) -> LesionMask:
    """Interpret a volume whose values are exactly 0/1 as a lesion mask."""
    if isinstance(vol, LesionMask):
        return vol
    return LesionMask(vol.geom, vol.data)


# ---------------------------------------------------------------------------
# reorientation
# ---------------------------------------------------------------------------


def _ras_orientation(affine: np.ndarray):
    """Closest-orthogonal axis assignment of voxel axes to world +x/+y/+z.

    Returns (perm, flip): output world axis i reads input voxel axis perm[i],
    reversed when flip[i]. Assignment is greedy on the largest remaining
    direction-cosine magnitude, which is well defined for oblique grids.
    """
    cols = affine[:3, :3] / np.linalg.norm(affine[:3, :3], axis=0)
    perm = [-1, -1, -1]
    flip = [False, False, False]
    mags = np.abs(cols).copy()
    for _ in range(3):
        world, vox = np.unravel_index(np.argmax(mags), mags.shape)
        perm[world] = int(vox)
        flip[world] = cols[world, vox] < 0
        mags[world, :] = -1.0
        mags[:, vox] = -1.0
    return perm, flip


def reorient_ras(vol):
    """Permute/flip voxel axes so each world axis is dominated by +x/+y/+z.

    World positions of all voxels are preserved; no interpolation happens.
    Already-RAS volumes come back equal.
    """
    perm, flip = _ras_orientation(vol.affine)
    if perm == [0, 1, 2] and not any(flip):
        return vol

    data = np.transpose(vol.data, axes=perm)
    flip_axes = [i for i in range(3) if flip[i]]
    if flip_axes:
        data = np.flip(data, axis=flip_axes)

    # old_index = T @ new_index, so the world map of the new grid is A @ T.
    t = np.zeros((4, 4))
    t[3, 3] = 1.0
    for i in range(3):
        old_axis = perm[i]
        if flip[i]:
            t[old_axis, i] = -1.0
            t[old_axis, 3] = vol.dims[old_axis] - 1
        else:
            t[old_axis, i] = 1.0
    new_affine = vol.affine @ t
    new_dims = tuple(vol.dims[p] for p in perm)
    new_spacing = tuple(vol.spacing[p] for p in perm)
    geom = Geometry(new_dims, new_spacing, new_affine)

    if isinstance(vol, LabelVolume):
        return LabelVolume(geom, np.ascontiguousarray(data), vol.class_names)
    if isinstance(vol, LesionMask):
        return LesionMask(geom, np.ascontiguousarray(data))
    return ScalarVolume(geom, np.ascontiguousarray(data))


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------


def _catmull_rom_weights(frac: np.ndarray) -> np.ndarray:
    """Weights of the 4 Catmull-Rom taps (floor-1..floor+2) for fractions in [0,1)."""
    t = frac
    t2 = t * t
    t3 = t2 * t
    w = np.empty(frac.shape + (4,))
    w[..., 0] = -0.5 * t3 + t2 - 0.5 * t
    w[..., 1] = 1.5 * t3 - 2.5 * t2 + 1.0
    w[..., 2] = -1.5 * t3 + 2.0 * t2 + 0.5 * t
    w[..., 3] = 0.5 * t3 - 0.5 * t2
    return w


def _resample_axis(data: np.ndarray, axis: int, coords: np.ndarray, mode: str):
    """Sample ``data`` along one axis at fractional ``coords``, clamping to edges."""
    n = data.shape[axis]
    if mode == "nearest":
        idx = np.clip(np.floor(coords + 0.5).astype(np.int64), 0, n - 1)
        return np.take(data, idx, axis=axis)
    base = np.floor(coords).astype(np.int64)
    frac = coords - base
    if mode == "trilinear":
        taps = np.stack([base, base + 1])
        weights = np.stack([1.0 - frac, frac])
    elif mode == "tricubic":
        taps = np.stack([base - 1, base, base + 1, base + 2])
        weights = np.moveaxis(_catmull_rom_weights(frac), -1, 0)
    else:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    taps = np.clip(taps, 0, n - 1)
    out = None
    for tap, w in zip(taps, weights):
        contrib = np.take(data, tap, axis=axis) * _expand(w, data.ndim, axis)
        out = contrib if out is None else out + contrib
    return out


def _expand(w: np.ndarray, ndim: int, axis: int) -> np.ndarray:
    shape = [1] * ndim
    shape[axis] = w.size
    return w.reshape(shape)


def resample(vol, target_spacing, mode: str):
    """Resample to a new spacing on the same axes and origin.

    Output size is ``ceil(dims * spacing / target)`` per axis. ``tricubic``
    uses separable Catmull-Rom kernels; sampling beyond the source extent
    clamps to the edge. Label data accepts ``nearest`` only.
    """
    if np.ndim(target_spacing) == 0:
        target = (float(target_spacing),) * 3
    else:
        target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or any(s <= 0 for s in target):
        raise ValueError(f"target spacing must be 3 positive reals, got {target_spacing}")
    if mode not in ("nearest", "trilinear", "tricubic"):
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if mode != "nearest" and isinstance(vol, (LabelVolume, LesionMask)):
        raise ValueError(f"{mode} interpolation is not valid on label data")

    ratios = [t / s for t, s in zip(target, vol.spacing)]
    new_dims = tuple(
        max(1, math.ceil(d * s / t))
        for d, s, t in zip(vol.dims, vol.spacing, target)
    )
    data = vol.data
    if mode != "nearest":
        data = np.asarray(data, dtype=np.float64)
    for axis in range(3):
        coords = np.arange(new_dims[axis], dtype=np.float64) * ratios[axis]
        data = _resample_axis(data, axis, coords, mode)

    scale = np.diag([ratios[0], ratios[1], ratios[2], 1.0])
    geom = Geometry(new_dims, target, vol.affine @ scale)
    if isinstance(vol, LabelVolume):
        return LabelVolume(geom, data, vol.class_names)
    if isinstance(vol, LesionMask):
        return LesionMask(geom, data)
    return ScalarVolume(geom, data)


def sample_at_voxels(data: np.ndarray, pts: np.ndarray, mode: str,
                     oob_fill: float | None = None) -> np.ndarray:
    """Sample a 3D array at fractional voxel coordinates of shape (3, n).

    Coordinates outside the grid clamp to the edge, or take ``oob_fill`` when
    given (a point is out of bounds once it leaves [0, dim-1] on any axis).
    """
    pts = np.asarray(pts, dtype=np.float64)
    dims = data.shape
    if oob_fill is not None:
        inside = np.ones(pts.shape[1], dtype=bool)
        for a in range(3):
            inside &= (pts[a] >= 0) & (pts[a] <= dims[a] - 1)
    if mode == "nearest":
        idx = [np.clip(np.floor(pts[a] + 0.5).astype(np.int64), 0, dims[a] - 1)
               for a in range(3)]
        out = data[idx[0], idx[1], idx[2]]
    elif mode == "trilinear":
        base = [np.clip(np.floor(pts[a]).astype(np.int64), 0, dims[a] - 1)
                for a in range(3)]
        nxt = [np.minimum(base[a] + 1, dims[a] - 1) for a in range(3)]
        frac = [np.clip(pts[a] - np.floor(pts[a]), 0.0, 1.0) for a in range(3)]
        frac = [np.where(pts[a] < 0, 0.0, np.where(pts[a] > dims[a] - 1, 1.0, frac[a]))
                for a in range(3)]
        out = np.zeros(pts.shape[1], dtype=np.float64)
        for dx in (0, 1):
            wx = frac[0] if dx else 1.0 - frac[0]
            ix = nxt[0] if dx else base[0]
            for dy in (0, 1):
                wy = frac[1] if dy else 1.0 - frac[1]
                iy = nxt[1] if dy else base[1]
                for dz in (0, 1):
                    wz = frac[2] if dz else 1.0 - frac[2]
                    iz = nxt[2] if dz else base[2]
                    out += wx * wy * wz * data[ix, iy, iz]
    else:
        raise ValueError(f"unsupported point-sampling mode {mode!r}")
    if oob_fill is not None:
        out = np.where(inside, out, oob_fill)
    return out


def resample_to(vol, target_geom: Geometry, mode: str, oob_fill: float | None = None):
    """Pull a volume onto an arbitrary target grid through world space."""
    if mode != "nearest" and isinstance(vol, (LabelVolume, LesionMask)):
        raise ValueError(f"{mode} interpolation is not valid on label data")
    ix, iy, iz = np.meshgrid(*(np.arange(d) for d in target_geom.dims), indexing="ij")
    idx = np.stack([ix.ravel(), iy.ravel(), iz.ravel()]).astype(np.float64)
    src = vol.geom.world_to_voxel(target_geom.voxel_to_world(idx))
    vals = sample_at_voxels(vol.data, src, mode, oob_fill=oob_fill)
    vals = vals.reshape(target_geom.dims)
    if isinstance(vol, LabelVolume):
        return LabelVolume(target_geom, np.round(vals).astype(np.int32), vol.class_names)
    if isinstance(vol, LesionMask):
        return LesionMask(target_geom, np.round(vals).astype(np.uint8))
    return ScalarVolume(target_geom, vals)


# ---------------------------------------------------------------------------
# intensity normalization
# ---------------------------------------------------------------------------


def zscore_normalize(img: ScalarVolume) -> ScalarVolume:
    """Normalize so the support (nonzero voxels, else all) has mean 0 and SD 1.

    Uses the population (divide-by-n) standard deviation. Every voxel,
    including zero background, is mapped through the same affine transform.
    """
    data = np.asarray(img.data, dtype=np.float64)
    support = data != 0
    if not support.any():
        support = np.ones_like(support)
    vals = data[support]
    mu = float(vals.mean())
    sigma = float(vals.std())
    if sigma == 0.0:
        raise ValueError("degenerate intensity distribution (constant support)")
    return ScalarVolume(img.geom, (data - mu) / sigma)
