"""Stochastic per-lesion mask evolution: simulate plausible earlier timepoints.

Each connected lesion is independently assigned one morphological transform
(keep, erode, dilate, or delete) drawn from a volume-banded categorical
distribution. Because the simulated mask represents an *earlier* timepoint,
the operations run in reverse time: erosion models subsequent growth,
dilation models shrinkage, and deleting a lesion models one that appears
later.

Two presets ship with the library: ``aggressive`` (maximizes configuration
variability for the first augmentation stage) and ``realistic`` (frequencies
tuned to observed lesion dynamics, with everything above 2500 mm3 kept
stable).
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .morphology import connected_components, dilate, erode
from .rng import RngStream
from .volume import LabelVolume, LesionMask, _require_same_geometry

_PROB_TOL = 1e-9
_MAX_ITERATIONS = 3

STABLE = "stable"
ERODE = "erode"
DILATE = "dilate"
REMOVE = "remove"
_KINDS = (STABLE, ERODE, DILATE, REMOVE)


@dataclass(frozen=True)
class LesionTransform:
    kind: str
    iterations: int = 0

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind in (ERODE, DILATE):
            if not 1 <= self.iterations <= _MAX_ITERATIONS:
                raise ValueError(
                    f"{self.kind} iterations must be in 1..{_MAX_ITERATIONS}, "
                    f"got {self.iterations}"
                )
        elif self.iterations != 0:
            raise ValueError(f"{self.kind} takes no iteration count")

    def to_json(self) -> dict:
        d = {"kind": self.kind}
        if self.iterations:
            d["iterations"] = self.iterations
        return d

    @classmethod
    def from_json(cls, d: dict) -> "LesionTransform":
        return cls(d["kind"], int(d.get("iterations", 0)))


@dataclass(frozen=True)
class VolumeBand:
    """Transform distribution for lesion volumes in [min_mm3, max_mm3) mm3."""

    min_mm3: float
    max_mm3: float
    outcomes: tuple[tuple[LesionTransform, float], ...]

    def __post_init__(self):
        object.__setattr__(self, "outcomes", tuple(
            (t, float(p)) for t, p in self.outcomes))
        if self.min_mm3 < 0 or self.max_mm3 <= self.min_mm3:
            raise ValueError(
                f"invalid band edges [{self.min_mm3}, {self.max_mm3})"
            )
        if any(p < 0 for _, p in self.outcomes):
            raise ValueError("outcome probabilities must be non-negative")
        total = math.fsum(p for _, p in self.outcomes)
        if abs(total - 1.0) > _PROB_TOL:
            raise ValueError(f"outcome probabilities sum to {total}, expected 1")

    def contains(self, volume_mm3: float) -> bool:
        return self.min_mm3 <= volume_mm3 < self.max_mm3


@dataclass(frozen=True)
class EvolutionConfig:
    """Named, gap-free stack of volume bands covering [0, inf)."""

    name: str
    bands: tuple[VolumeBand, ...]

    def __post_init__(self):
        bands = tuple(self.bands)
        if not bands:
            raise ValueError("config needs at least one band")
        if bands[0].min_mm3 != 0.0:
            raise ValueError("first band must start at 0 mm3")
        for prev, nxt in zip(bands, bands[1:]):
            if nxt.min_mm3 != prev.max_mm3:
                raise ValueError(
                    f"bands must tile [0, inf): gap/overlap at {prev.max_mm3} vs {nxt.min_mm3}"
                )
        if bands[-1].max_mm3 != math.inf:
            raise ValueError("last band must extend to infinity")
        object.__setattr__(self, "bands", bands)

    def band_for(self, volume_mm3: float) -> VolumeBand:
        for band in self.bands:
            if band.contains(volume_mm3):
                return band
        return self.bands[-1]

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "bands": [
                {
                    "min_mm3": b.min_mm3,
                    "max_mm3": None if b.max_mm3 == math.inf else b.max_mm3,
                    "outcomes": [
                        {**t.to_json(), "p": p} for t, p in b.outcomes
                    ],
                }
                for b in self.bands
            ],
        }

    @classmethod
    def from_json(cls, d: dict) -> "EvolutionConfig":
        bands = []
        for b in d["bands"]:
            outcomes = tuple(
                (LesionTransform.from_json(o), float(o["p"])) for o in b["outcomes"]
            )
            hi = b["max_mm3"]
            bands.append(VolumeBand(
                float(b["min_mm3"]), math.inf if hi is None else float(hi), outcomes))
        return cls(d["name"], tuple(bands))


def _band(lo, hi, *outcomes):
    return VolumeBand(lo, hi, tuple(outcomes))


def _t(kind, k=0):
    return LesionTransform(kind, k)


def aggressive_preset() -> EvolutionConfig:
    """High-variability distribution for the first augmentation stage."""
    return EvolutionConfig("aggressive", (
        _band(0.0, 200.0,
              (_t(STABLE), 0.90), (_t(REMOVE), 0.10)),
        _band(200.0, 1000.0,
              (_t(STABLE), 0.70), (_t(ERODE, 1), 0.10),
              (_t(DILATE, 1), 0.10), (_t(REMOVE), 0.10)),
        _band(1000.0, math.inf,
              (_t(STABLE), 0.55), (_t(ERODE, 1), 0.15),
              (_t(DILATE, 1), 0.15), (_t(REMOVE), 0.15)),
    ))


def realistic_preset() -> EvolutionConfig:
    """Frequencies tuned to observed lesion dynamics.

    Growth (erosion in reverse time) dominates; shrinkage is rare. Small
    lesions cap erosion at two passes, with the third-pass mass folded into
    the second. The middle band's upper edge is inclusive at 2500 mm3, so its
    stored exclusive bound is the next float up.
    """
    above_2500 = math.nextafter(2500.0, math.inf)
    return EvolutionConfig("realistic", (
        _band(0.0, 250.0,
              (_t(STABLE), 0.30), (_t(ERODE, 1), 0.35), (_t(ERODE, 2), 0.10),
              (_t(REMOVE), 0.24), (_t(DILATE, 1), 0.01)),
        _band(250.0, above_2500,
              (_t(STABLE), 0.30), (_t(ERODE, 1), 0.35), (_t(ERODE, 2), 0.08),
              (_t(ERODE, 3), 0.02), (_t(REMOVE), 0.24), (_t(DILATE, 1), 0.01)),
        _band(above_2500, math.inf,
              (_t(STABLE), 1.0)),
    ))


PRESETS = {
    "aggressive": aggressive_preset,
    "realistic": realistic_preset,
}


def get_preset(name: str) -> EvolutionConfig:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(
            f"unknown preset {name!r}; valid presets: {sorted(PRESETS)}"
        ) from None


def sample_transform(volume_mm3: float, cfg: EvolutionConfig,
                     rng: RngStream) -> LesionTransform:
    """Draw one transform for a lesion of the given volume (inverse CDF)."""
    if volume_mm3 <= 0:
        raise ValueError(f"lesion volume must be positive, got {volume_mm3}")
    band = cfg.band_for(volume_mm3)
    u = rng.gen.uniform()
    acc = 0.0
    for transform, p in band.outcomes:
        acc += p
        if u < acc:
            return transform
    return band.outcomes[-1][0]


def simulate_prior(mask: LesionMask, cfg: EvolutionConfig, rng: RngStream,
                   connectivity: int = 26) -> LesionMask:
    """Deform every lesion independently to synthesize an earlier-timepoint mask.

    Each component draws from its own RNG sub-stream, keyed by the
    component's first x-fastest linear voxel index, so the draw for one
    lesion never depends on how many other lesions exist. Dilated components
    may merge; a component fully eaten by erosion simply ends up absent.
    """
    cm = connected_components(mask, connectivity)
    out = np.zeros(mask.dims, dtype=bool)
    if cm.count == 0:
        return LesionMask(mask.geom, out)
    slices = ndimage.find_objects(cm.labels)
    for cid in range(1, cm.count + 1):
        comp_rng = rng.child(int(cm.first_voxel_indices[cid - 1]))
        transform = sample_transform(cm.volumes_mm3[cid - 1], cfg, comp_rng)
        box = slices[cid - 1]
        if transform.kind == REMOVE:
            continue
        if transform.kind == STABLE:
            out[box] |= cm.labels[box] == cid
            continue
        k = transform.iterations
        if transform.kind == ERODE:
            out[box] |= erode(cm.labels[box] == cid, k)
        else:  # dilate: widen the crop so growth is clipped by the volume only
            grown = tuple(
                slice(max(0, s.start - k), min(dim, s.stop + k))
                for s, dim in zip(box, mask.dims)
            )
            out[grown] |= dilate(cm.labels[grown] == cid, k)
    return LesionMask(mask.geom, out)


def clamp_to_plausible(mask: LesionMask, parc: LabelVolume,
                       forbidden: set[int]) -> LesionMask:
    """Clear mask voxels that fall on anatomically implausible classes."""
    _require_same_geometry(mask, parc, "mask and parcellation")
    if not forbidden:
        return mask
    banned = np.isin(parc.data, list(forbidden))
    return LesionMask(mask.geom, mask.foreground & ~banned)


def merge_lesions_into_parcellation(parc: LabelVolume, mask: LesionMask,
                                    lesion_class: int) -> LabelVolume:
    """Overwrite parcellation labels with the lesion class where the mask is set."""
    _require_same_geometry(parc, mask, "parcellation and mask")
    merged = np.where(mask.foreground, np.int32(lesion_class), parc.data)
    names = list(parc.class_names)
    while len(names) <= lesion_class:
        names.append(f"class_{len(names)}")
    return LabelVolume(parc.geom, merged, names)
