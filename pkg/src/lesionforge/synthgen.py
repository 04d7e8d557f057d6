"""Domain-randomized synthetic scan generation from label maps.

The chain: random spatial augmentation (affine + integrated random velocity
field) of the label map, per-class Gaussian intensity sampling, multiplicative
bias field, simulated anisotropic acquisition, intensity clipping, and an
effect-size acceptance test that keeps lesions discernible from white matter.
"""

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .rng import RngStream
from .volume import (
    Geometry,
    LabelVolume,
    ScalarVolume,
    _require_same_geometry,
    _resample_axis,
    sample_at_voxels,
)

Range = tuple[float, float]

_FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


def _check_range(name: str, r: Range) -> Range:
    lo, hi = float(r[0]), float(r[1])
    if lo > hi:
        raise ValueError(f"{name} range must be ordered, got ({lo}, {hi})")
    return (lo, hi)


@dataclass(frozen=True)
class SpatialAugmentConfig:
    """Uniform sampling ranges for the random spatial augmentation."""

    rotation_deg: Range = (-15.0, 15.0)
    scale: Range = (0.8, 1.2)
    shear: Range = (-0.012, 0.012)
    svf_std: Range = (0.0, 4.0)
    svf_grid_divisor: int = 8
    svf_min_grid: int = 4
    svf_squaring_steps: int = 8

    def __post_init__(self):
        for name in ("rotation_deg", "scale", "shear", "svf_std"):
            object.__setattr__(self, name, _check_range(name, getattr(self, name)))

    def to_json(self) -> dict:
        return {
            "rotation_deg": list(self.rotation_deg),
            "scale": list(self.scale),
            "shear": list(self.shear),
            "svf_std": list(self.svf_std),
            "svf_grid_divisor": self.svf_grid_divisor,
            "svf_min_grid": self.svf_min_grid,
            "svf_squaring_steps": self.svf_squaring_steps,
        }

    @classmethod
    def from_json(cls, d: dict) -> "SpatialAugmentConfig":
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kwargs)


@dataclass(frozen=True)
class GmmParams:
    """Per-class intensity mean and standard deviation, indexed by label."""

    means: np.ndarray
    stddevs: np.ndarray

    def __post_init__(self):
        means = np.asarray(self.means, dtype=np.float64)
        stds = np.asarray(self.stddevs, dtype=np.float64)
        if means.shape != stds.shape or means.ndim != 1:
            raise ValueError("means and stddevs must be equal-length 1D arrays")
        if np.any(stds < 0):
            raise ValueError("stddevs must be non-negative")
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stddevs", stds)

    @property
    def num_classes(self) -> int:
        return len(self.means)


@dataclass(frozen=True)
class GmmSynthConfig:
    """All knobs of the synthetic scan generator."""

    spatial: SpatialAugmentConfig = field(default_factory=SpatialAugmentConfig)
    mu_range: Range = (0.0, 250.0)
    sigma_range: Range = (0.0, 30.0)
    bias_std_range: Range = (0.0, 0.3)
    bias_grid: tuple[int, int, int] = (4, 4, 4)
    aniso_prob: float = 0.9
    aniso_max_spacing_mm: float = 5.0
    clip_max: float = 300.0
    ef_percentile: float = 80.0
    ef_include_target_pair: bool = True
    max_retries: int = 50

    def __post_init__(self):
        object.__setattr__(self, "mu_range", _check_range("mu", self.mu_range))
        object.__setattr__(self, "sigma_range", _check_range("sigma", self.sigma_range))
        object.__setattr__(self, "bias_std_range",
                           _check_range("bias_std", self.bias_std_range))
        object.__setattr__(self, "bias_grid", tuple(int(g) for g in self.bias_grid))
        if not 0.0 <= self.aniso_prob <= 1.0:
            raise ValueError(f"aniso_prob must be in [0, 1], got {self.aniso_prob}")
        if self.clip_max <= 0:
            raise ValueError(f"clip_max must be positive, got {self.clip_max}")
        if not 0.0 < self.ef_percentile < 100.0:
            raise ValueError(
                f"ef_percentile must be in (0, 100), got {self.ef_percentile}")
        if self.max_retries < 1:
            raise ValueError(f"max_retries must be >= 1, got {self.max_retries}")

    def to_json(self) -> dict:
        return {
            "spatial": self.spatial.to_json(),
            "mu_range": list(self.mu_range),
            "sigma_range": list(self.sigma_range),
            "bias_std_range": list(self.bias_std_range),
            "bias_grid": list(self.bias_grid),
            "aniso_prob": self.aniso_prob,
            "aniso_max_spacing_mm": self.aniso_max_spacing_mm,
            "clip_max": self.clip_max,
            "ef_percentile": self.ef_percentile,
            "ef_include_target_pair": self.ef_include_target_pair,
            "max_retries": self.max_retries,
        }

    @classmethod
    def from_json(cls, d: dict) -> "GmmSynthConfig":
        d = dict(d)
        spatial = SpatialAugmentConfig.from_json(d.pop("spatial", {}))
        kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(spatial=spatial, **kwargs)


@dataclass
class DeformationField:
    """Dense displacement in mm, shape (3, nx, ny, nz) on the given grid."""

    geom: Geometry
    displacement: np.ndarray

    def __post_init__(self):
        disp = np.asarray(self.displacement, dtype=np.float64)
        if disp.shape != (3, *self.geom.dims):
            raise ValueError(
                f"displacement shape {disp.shape} does not match (3, *{self.geom.dims})")
        if not np.all(np.isfinite(disp)):
            raise ValueError("displacement contains non-finite values")
        self.displacement = disp

    @classmethod
    def zero(cls, geom: Geometry) -> "DeformationField":
        return cls(geom, np.zeros((3, *geom.dims)))


# ---------------------------------------------------------------------------
# spatial augmentation
# ---------------------------------------------------------------------------


def _rotation_matrix(rx: float, ry: float, rz: float) -> np.ndarray:
    cx, sx = math.cos(rx), math.sin(rx)
    cy, sy = math.cos(ry), math.sin(ry)
    cz, sz = math.cos(rz), math.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def sample_affine(cfg: SpatialAugmentConfig, rng: RngStream) -> np.ndarray:
    """Draw a random linear augmentation matrix (4x4, zero translation).

    Composition is rotation @ shear @ scale, with per-axis rotation angles
    applied as Rz Ry Rx and an upper-triangular unit-diagonal shear. The warp
    applies it about the volume center.
    """
    g = rng.gen
    angles = np.radians(g.uniform(*cfg.rotation_deg, size=3))
    scales = g.uniform(*cfg.scale, size=3)
    shears = g.uniform(*cfg.shear, size=3)
    rot = _rotation_matrix(*angles)
    shear = np.array([[1.0, shears[0], shears[1]],
                      [0.0, 1.0, shears[2]],
                      [0.0, 0.0, 1.0]])
    out = np.eye(4)
    out[:3, :3] = rot @ shear @ np.diag(scales)
    return out


def _resize_trilinear(arr: np.ndarray, new_dims) -> np.ndarray:
    """Separable align-corners linear resize of a dense grid."""
    out = np.asarray(arr, dtype=np.float64)
    for axis, nd in enumerate(new_dims):
        n = out.shape[axis]
        if nd == n:
            continue
        coords = (np.linspace(0.0, n - 1.0, nd) if nd > 1
                  else np.zeros(1))
        out = _resample_axis(out, axis, coords, "trilinear")
    return out


def sample_svf_deformation(geom: Geometry, svf_std: float, rng: RngStream,
                           grid_divisor: int = 8, min_grid: int = 4,
                           squaring_steps: int = 8) -> DeformationField:
    """Integrate a random stationary velocity field into a displacement.

    The velocity is i.i.d. Gaussian per control node on a coarse grid
    (dims/grid_divisor, at least min_grid per axis), upsampled trilinearly
    and integrated by scaling and squaring.
    """
    if svf_std < 0:
        raise ValueError(f"svf_std must be >= 0, got {svf_std}")
    dims = geom.dims
    grid = tuple(max(min_grid, d // grid_divisor) for d in dims)
    velocity = rng.gen.normal(0.0, svf_std, size=(3, *grid))
    if svf_std == 0:
        return DeformationField.zero(geom)

    spacing = np.asarray(geom.spacing)
    vox_vel = np.stack([
        _resize_trilinear(velocity[a], dims) / spacing[a] for a in range(3)
    ])
    disp = vox_vel / (2.0 ** squaring_steps)
    base = np.indices(dims, dtype=np.float64)
    for _ in range(squaring_steps):
        coords = base + disp
        warped = np.stack([
            ndimage.map_coordinates(disp[a], coords, order=1, mode="nearest")
            for a in range(3)
        ])
        disp = disp + warped
    return DeformationField(geom, disp * spacing[:, None, None, None])


def warp_labels(parc: LabelVolume, affine: np.ndarray | None,
                deformation: DeformationField | None) -> LabelVolume:
    """Backward-warp a label map: nearest-neighbor lookup, background 0 outside.

    The lookup position of an output voxel is the augmentation matrix applied
    about the volume's world center, plus the local displacement.
    """
    if deformation is not None:
        _require_same_geometry(parc, deformation, "labels and deformation")
    ix, iy, iz = np.meshgrid(*(np.arange(d) for d in parc.dims), indexing="ij")
    idx = np.stack([ix.ravel(), iy.ravel(), iz.ravel()]).astype(np.float64)
    world = parc.geom.voxel_to_world(idx)
    if affine is not None:
        center = parc.geom.world_center()[:, None]
        world = np.asarray(affine)[:3, :3] @ (world - center) + center \
            + np.asarray(affine)[:3, 3:4]
    if deformation is not None:
        world = world + deformation.displacement.reshape(3, -1)
    src = parc.geom.world_to_voxel(world)
    vals = sample_at_voxels(parc.data, src, "nearest", oob_fill=0)
    return LabelVolume(parc.geom, vals.reshape(parc.dims).astype(np.int32),
                       parc.class_names)


# ---------------------------------------------------------------------------
# intensity model
# ---------------------------------------------------------------------------


def sample_gmm_params(cfg: GmmSynthConfig, num_classes: int,
                      rng: RngStream) -> GmmParams:
    """Draw per-class means and stddevs from the configured uniform ranges."""
    g = rng.gen
    means = g.uniform(*cfg.mu_range, size=num_classes)
    stds = g.uniform(*cfg.sigma_range, size=num_classes)
    return GmmParams(means, stds)


def sample_gmm_image(parc: LabelVolume, params: GmmParams,
                     rng: RngStream) -> ScalarVolume:
    """Sample every voxel from Normal(mu_label, sigma_label), independently."""
    labels = parc.data
    max_label = int(labels.max())
    if max_label >= params.num_classes:
        raise ValueError(
            f"missing class parameters: label {max_label} but only "
            f"{params.num_classes} classes parameterized")
    noise = rng.gen.standard_normal(parc.dims)
    data = params.means[labels] + params.stddevs[labels] * noise
    return ScalarVolume(parc.geom, data)


def apply_bias_field(img: ScalarVolume, bias_std: float, grid,
                     rng: RngStream) -> ScalarVolume:
    """Multiply by an exponentiated smooth random field on a coarse grid."""
    if bias_std < 0:
        raise ValueError(f"bias_std must be >= 0, got {bias_std}")
    coeffs = rng.gen.normal(0.0, bias_std, size=tuple(grid))
    if bias_std == 0:
        return img
    log_field = _resize_trilinear(coeffs, img.dims)
    return ScalarVolume(img.geom, np.asarray(img.data, dtype=np.float64)
                        * np.exp(log_field))


def randomize_resolution(img: ScalarVolume, cfg: GmmSynthConfig,
                         rng: RngStream) -> ScalarVolume:
    """Simulate a thick-slice anisotropic acquisition restored to native grid.

    With probability aniso_prob: pick an axis, draw slice spacing s and
    thickness t, blur along the axis with a Gaussian of FWHM t, sample every
    s mm, and linearly restore the original dimensions.
    """
    g = rng.gen
    if g.uniform() >= cfg.aniso_prob:
        return img
    axis = int(g.integers(3))
    native = img.spacing[axis]
    spacing = g.uniform(native, max(native, cfg.aniso_max_spacing_mm))
    thickness = g.uniform(native, spacing)

    data = np.asarray(img.data, dtype=np.float64)
    sigma_vox = thickness * _FWHM_TO_SIGMA / native
    if sigma_vox > 0:
        data = ndimage.gaussian_filter1d(data, sigma_vox, axis=axis, mode="nearest")
    dim = img.dims[axis]
    step = spacing / native
    n_coarse = max(1, math.ceil(dim / step))
    coarse = _resample_axis(data, axis, np.arange(n_coarse) * step, "trilinear")
    restored = _resample_axis(coarse, axis, np.arange(dim) / step, "trilinear")
    return ScalarVolume(img.geom, restored)


def clip_intensity(img: ScalarVolume, max_value: float) -> ScalarVolume:
    """Cap intensities from above; negative values pass through."""
    if max_value <= 0:
        raise ValueError(f"max_value must be positive, got {max_value}")
    return ScalarVolume(img.geom, np.minimum(img.data, max_value))


# ---------------------------------------------------------------------------
# acceptance test
# ---------------------------------------------------------------------------


def _class_moments(img: ScalarVolume, parc: LabelVolume):
    flat = parc.data.ravel()
    vals = np.asarray(img.data, dtype=np.float64).ravel()
    counts = np.bincount(flat)
    sums = np.bincount(flat, weights=vals)
    sumsq = np.bincount(flat, weights=vals * vals)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts
        variances = np.maximum(sumsq / counts - means * means, 0.0)
    return counts, means, np.sqrt(variances)


def _ef(mean_a, std_a, mean_b, std_b) -> float:
    denom = std_a + std_b
    if denom == 0.0:
        return 0.0 if mean_a == mean_b else math.inf
    return abs(mean_a - mean_b) / denom


def effect_size(img: ScalarVolume, parc: LabelVolume,
                class_a: int, class_b: int) -> float:
    """Absolute mean difference over summed standard deviations of two classes.

    Population statistics over each class's voxels. Both classes need at
    least two voxels. Two zero-spread classes give 0 for equal means and
    +inf otherwise.
    """
    _require_same_geometry(img, parc, "image and parcellation")
    counts, means, stds = _class_moments(img, parc)
    for c in (class_a, class_b):
        if c < 0 or c >= len(counts) or counts[c] < 2:
            raise ValueError(f"class {c} is absent or singleton")
    return _ef(means[class_a], stds[class_a], means[class_b], stds[class_b])


@dataclass
class EffectSizeReport:
    """Acceptance-test evidence: the target pair's EF against all-pairs EFs."""

    accepted: bool
    target_ef: float | None
    threshold: float | None
    percentile: float
    pairwise: list[tuple[int, int, float]]


def nearest_rank(sorted_values: np.ndarray, percentile: float) -> float:
    """The ceil(p/100 * n)-th order statistic of an ascending array."""
    n = len(sorted_values)
    rank = max(1, math.ceil(percentile / 100.0 * n))
    return float(sorted_values[rank - 1])


def accept_scan(img: ScalarVolume, parc: LabelVolume, lesion_class: int,
                wm_class: int, ef_percentile: float = 80.0,
                include_target_pair: bool = True) -> tuple[bool, EffectSizeReport]:
    """Accept a scan iff the lesion-WM effect size beats the all-pairs percentile.

    Effect sizes are computed for every unordered pair of classes having at
    least two voxels; the threshold is the nearest-rank percentile of that
    set and acceptance requires a strictly greater target value (ties
    reject). An infinite target accepts.
    """
    _require_same_geometry(img, parc, "image and parcellation")
    counts, means, stds = _class_moments(img, parc)
    eligible = [c for c in range(len(counts)) if counts[c] >= 2]
    for c in (lesion_class, wm_class):
        if c not in eligible:
            raise ValueError(f"class {c} is absent or singleton")
    if len(eligible) < 3:
        raise ValueError("degenerate parcellation for EF percentile "
                         f"({len(eligible)} classes present)")
    pairwise = []
    efs = []
    target = None
    for i, a in enumerate(eligible):
        for b in eligible[i + 1:]:
            ef = _ef(means[a], stds[a], means[b], stds[b])
            pairwise.append((a, b, ef))
            is_target = {a, b} == {lesion_class, wm_class}
            if is_target:
                target = ef
            if include_target_pair or not is_target:
                efs.append(ef)
    threshold = nearest_rank(np.sort(np.asarray(efs)), ef_percentile)
    accepted = math.isinf(target) or target > threshold
    return accepted, EffectSizeReport(accepted, target, threshold,
                                      ef_percentile, pairwise)


# ---------------------------------------------------------------------------
# full scan synthesis
# ---------------------------------------------------------------------------


@dataclass
class ScanReport:
    """Outcome of one synthesize_scan call."""

    attempts: int
    acceptance: EffectSizeReport | None


def synthesize_scan(merged_parc: LabelVolume, cfg: GmmSynthConfig,
                    lesion_class: int, wm_class: int, warp_rng: RngStream,
                    scan_rng: RngStream) -> tuple[ScalarVolume, LabelVolume, ScanReport]:
    """Produce one accepted synthetic scan plus its warped label map.

    The spatial warp is drawn once from warp_rng and shared by image and
    labels. The intensity chain (GMM parameters and noise, bias field,
    resolution simulation) redraws from a fresh scan_rng sub-stream per
    attempt until the effect-size test passes, up to cfg.max_retries.
    Warped label maps without lesion voxels skip the test.
    """
    g = warp_rng.gen
    affine = sample_affine(cfg.spatial, warp_rng)
    svf_std = g.uniform(*cfg.spatial.svf_std)
    deformation = sample_svf_deformation(
        merged_parc.geom, svf_std, warp_rng,
        grid_divisor=cfg.spatial.svf_grid_divisor,
        min_grid=cfg.spatial.svf_min_grid,
        squaring_steps=cfg.spatial.svf_squaring_steps)
    warped = warp_labels(merged_parc, affine, deformation)

    lesion_count = int(np.count_nonzero(warped.data == lesion_class))
    test_lesion = lesion_count >= 2

    last_report = None
    for attempt in range(cfg.max_retries):
        attempt_rng = scan_rng.child(attempt)
        params = sample_gmm_params(cfg, max(warped.num_classes,
                                            int(warped.data.max()) + 1), attempt_rng)
        img = sample_gmm_image(warped, params, attempt_rng)
        bias_std = attempt_rng.gen.uniform(*cfg.bias_std_range)
        img = apply_bias_field(img, bias_std, cfg.bias_grid, attempt_rng)
        img = randomize_resolution(img, cfg, attempt_rng)
        img = clip_intensity(img, cfg.clip_max)
        if not test_lesion:
            return img, warped, ScanReport(attempt + 1, None)
        accepted, report = accept_scan(
            img, warped, lesion_class, wm_class,
            ef_percentile=cfg.ef_percentile,
            include_target_pair=cfg.ef_include_target_pair)
        last_report = report
        if accepted:
            return img, warped, ScanReport(attempt + 1, report)
    raise RuntimeError(
        f"acceptance retries exhausted after {cfg.max_retries} attempts "
        f"(last EF {last_report.target_ef:.4f} vs threshold "
        f"{last_report.threshold:.4f})")
