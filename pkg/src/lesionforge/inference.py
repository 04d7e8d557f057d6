"""Inference plumbing around an abstract patch predictor.

A predictor maps a two-channel patch (scan + prior mask) to per-voxel lesion
probabilities. This module supplies everything around it: preprocessing,
prior packing, sliding-window prediction with Gaussian blending, mirror
test-time augmentation, multi-modality fusion, thresholding, and sequential
longitudinal propagation where each timepoint's prediction becomes the next
one's prior. The first timepoint of a sequence always runs with an empty
prior.
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass
from itertools import product

import numpy as np

from .volume import (
    LesionMask,
    ScalarVolume,
    _require_same_geometry,
    reorient_ras,
    resample,
    resample_to,
    zscore_normalize,
)

DEFAULT_PATCH_SHAPE = (128, 128, 96)


class Predictor(ABC):
    """Maps a (2, px, py, pz) patch to (px, py, pz) probabilities in [0, 1]."""

    patch_shape: tuple[int, int, int]

    @abstractmethod
    def predict(self, patch: np.ndarray) -> np.ndarray:
        ...


@dataclass
class TwoChannelInput:
    """A normalized scan paired with a prior lesion mask on the same grid."""

    image: ScalarVolume
    prior: LesionMask

    def __post_init__(self):
        _require_same_geometry(self.image, self.prior, "image and prior")

    def stacked(self) -> np.ndarray:
        return np.stack([
            np.asarray(self.image.data, dtype=np.float64),
            self.prior.data.astype(np.float64),
        ])


def preprocess(img: ScalarVolume, target_spacing=(1.0, 1.0, 1.0)) -> ScalarVolume:
    """Reorient closest to RAS, z-score normalize, resample isotropically (cubic)."""
    out = reorient_ras(img)
    out = zscore_normalize(out)
    return resample(out, target_spacing, "tricubic")


def pack_input(img: ScalarVolume, prior: LesionMask | None = None) -> TwoChannelInput:
    """Pair a scan with its prior; no prior means an all-zero channel.

    A prior on a different grid is pulled onto the scan's geometry with
    nearest-neighbor lookup (background outside its extent).
    """
    if prior is None:
        prior = LesionMask.empty(img.geom)
    elif not prior.geom.matches(img.geom):
        prior = resample_to(prior, img.geom, "nearest", oob_fill=0)
    return TwoChannelInput(img, prior)


def _window_starts(dim: int, patch: int, stride: int) -> list[int]:
    starts = list(range(0, dim - patch + 1, stride))
    if starts[-1] != dim - patch:
        starts.append(dim - patch)
    return starts


def _gaussian_weight(patch_shape) -> np.ndarray:
    axes = []
    for p in patch_shape:
        center = (p - 1) / 2.0
        sigma = p / 8.0
        x = np.arange(p, dtype=np.float64)
        axes.append(np.exp(-0.5 * ((x - center) / sigma) ** 2))
    return axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]


def sliding_window_predict(inputs: TwoChannelInput, predictor: Predictor,
                           step_fraction: float = 0.5) -> ScalarVolume:
    """Tile the volume with overlapping patches and Gaussian-blend predictions.

    Stride is floor(step_fraction * patch) per axis with a final window flush
    against the far edge. Volumes smaller than the patch are zero-padded
    symmetrically and cropped back. Per-voxel output is the weight-normalized
    accumulation of patch predictions, so any constant predictor reproduces
    its constant exactly (up to float rounding).
    """
    if not 0.0 < step_fraction <= 1.0:
        raise ValueError(f"step_fraction must be in (0, 1], got {step_fraction}")
    patch = tuple(predictor.patch_shape)
    data = inputs.stacked()
    dims = data.shape[1:]

    pad = [(0, 0)]
    for d, p in zip(dims, patch):
        short = max(0, p - d)
        pad.append((short // 2, short - short // 2))
    padded = np.pad(data, pad) if any(lo or hi for lo, hi in pad) else data
    pdims = padded.shape[1:]

    strides = [max(1, int(step_fraction * p)) for p in patch]
    weight = _gaussian_weight(patch)
    acc = np.zeros(pdims, dtype=np.float64)
    wsum = np.zeros(pdims, dtype=np.float64)
    for sx in _window_starts(pdims[0], patch[0], strides[0]):
        for sy in _window_starts(pdims[1], patch[1], strides[1]):
            for sz in _window_starts(pdims[2], patch[2], strides[2]):
                sel = np.s_[sx:sx + patch[0], sy:sy + patch[1], sz:sz + patch[2]]
                out = np.asarray(predictor.predict(padded[(slice(None),) + sel]))
                if out.shape != patch:
                    raise ValueError(
                        f"predictor output shape {out.shape} does not match "
                        f"patch shape {patch}")
                acc[sel] += out * weight
                wsum[sel] += weight
    blended = acc / wsum
    crop = tuple(slice(lo, lo + d) for (lo, _), d in zip(pad[1:], dims))
    return ScalarVolume(inputs.image.geom, np.clip(blended[crop], 0.0, 1.0))


class MirrorTtaPredictor(Predictor):
    """Average a base predictor over all 8 axis-flip combinations."""

    def __init__(self, base: Predictor):
        self.base = base
        self.patch_shape = tuple(base.patch_shape)

    def predict(self, patch: np.ndarray) -> np.ndarray:
        acc = np.zeros(self.patch_shape, dtype=np.float64)
        for flips in product((False, True), repeat=3):
            axes = tuple(a for a, f in enumerate(flips) if f)
            flipped = np.flip(patch, axis=tuple(a + 1 for a in axes)) if axes else patch
            out = np.asarray(self.base.predict(flipped))
            acc += np.flip(out, axis=axes) if axes else out
        return acc / 8.0


def mirror_tta(predictor: Predictor) -> Predictor:
    """Wrap a predictor with mirroring test-time augmentation."""
    return MirrorTtaPredictor(predictor)


def fuse_modalities(probabilities: list[ScalarVolume],
                    weights: list[float] | None = None) -> ScalarVolume:
    """Normalized weighted mean of per-modality probability volumes."""
    if not probabilities:
        raise ValueError("no probability volumes to fuse")
    first = probabilities[0]
    for vol in probabilities[1:]:
        _require_same_geometry(first, vol, "probability volumes")
    if weights is None:
        weights = [1.0] * len(probabilities)
    w = np.asarray(weights, dtype=np.float64)
    if len(w) != len(probabilities):
        raise ValueError("one weight per volume required")
    if np.any(w < 0) or w.sum() == 0:
        raise ValueError("weights must be non-negative and not all zero")
    w = w / w.sum()
    data = sum(wi * np.asarray(v.data, dtype=np.float64)
               for wi, v in zip(w, probabilities))
    return ScalarVolume(first.geom, np.clip(data, 0.0, 1.0))


def binarize(probabilities: ScalarVolume, threshold: float = 0.5) -> LesionMask:
    """Threshold probabilities into a mask; values at the threshold are foreground."""
    return LesionMask(probabilities.geom,
                      np.asarray(probabilities.data) >= threshold)


def propagate_longitudinal(scans: list[ScalarVolume], predictor: Predictor,
                           step_fraction: float = 0.5,
                           threshold: float = 0.5) -> list[LesionMask]:
    """Segment an ordered scan sequence, feeding each prediction to the next.

    The first timepoint runs with an empty prior; afterwards the previous
    mask is pulled onto the current preprocessed grid. Returns one mask per
    timepoint, in each scan's preprocessed geometry.
    """
    if not scans:
        raise ValueError("empty scan list")
    masks: list[LesionMask] = []
    prior: LesionMask | None = None
    for scan in scans:
        prepped = preprocess(scan)
        packed = pack_input(prepped, prior)
        probs = sliding_window_predict(packed, predictor, step_fraction)
        mask = binarize(probs, threshold)
        masks.append(mask)
        prior = mask
    return masks


# ---------------------------------------------------------------------------
# reference predictors
# ---------------------------------------------------------------------------


class ConstantPredictor(Predictor):
    """Always predicts one probability everywhere."""

    def __init__(self, value: float, patch_shape=DEFAULT_PATCH_SHAPE):
        if not 0.0 <= value <= 1.0:
            raise ValueError(f"constant must be in [0, 1], got {value}")
        self.value = float(value)
        self.patch_shape = tuple(patch_shape)

    def predict(self, patch):
        return np.full(self.patch_shape, self.value)


class CopyPriorPredictor(Predictor):
    """Returns the prior channel verbatim."""

    def __init__(self, patch_shape=DEFAULT_PATCH_SHAPE):
        self.patch_shape = tuple(patch_shape)

    def predict(self, patch):
        return np.clip(np.asarray(patch[1], dtype=np.float64), 0.0, 1.0)


class ChannelThresholdPredictor(Predictor):
    """Thresholds the image channel at a fixed intensity."""

    def __init__(self, threshold: float, patch_shape=DEFAULT_PATCH_SHAPE):
        self.threshold = float(threshold)
        self.patch_shape = tuple(patch_shape)

    def predict(self, patch):
        return (np.asarray(patch[0]) >= self.threshold).astype(np.float64)


def make_predictor(spec: str, patch_shape=DEFAULT_PATCH_SHAPE) -> Predictor:
    """Build a reference predictor from a name like 'constant:0.7'.

    Known names: 'constant:<p>', 'copy-prior', 'threshold:<t>'.
    """
    name, _, arg = spec.partition(":")
    if name == "constant":
        return ConstantPredictor(float(arg), patch_shape)
    if name == "copy-prior":
        return CopyPriorPredictor(patch_shape)
    if name == "threshold":
        return ChannelThresholdPredictor(float(arg), patch_shape)
    raise ValueError(f"unknown predictor {spec!r}; "
                     "expected constant:<p>, copy-prior or threshold:<t>")
