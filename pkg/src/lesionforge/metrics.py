"""Segmentation evaluation: voxel overlap, lesion-wise detection, surface distances.

Surface distances follow an area-weighted surfel formulation: every exposed
voxel face becomes one surfel whose position is the face center in world mm
and whose area is the product of the two in-plane spacings. HD95 is the
area-weighted 95th-percentile directed distance, symmetrized by max; ASSD is
the area-weighted mean over both directions.
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .morphology import ComponentMap, connected_components
from .volume import LesionMask, _require_same_geometry


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(gt: LesionMask, pred: LesionMask) -> ConfusionCounts:
    """Voxelwise confusion counts between ground truth and prediction."""
    _require_same_geometry(gt, pred, "ground truth and prediction")
    g = gt.foreground
    p = pred.foreground
    tp = int(np.count_nonzero(g & p))
    fp = int(np.count_nonzero(~g & p))
    fn = int(np.count_nonzero(g & ~p))
    tn = g.size - tp - fp - fn
    return ConfusionCounts(tp, fp, fn, tn)


def ppv(c: ConfusionCounts) -> float:
    """Positive predictive value TP/(TP+FP); 0 when nothing was predicted."""
    denom = c.tp + c.fp
    return c.tp / denom if denom else 0.0


def sensitivity(c: ConfusionCounts) -> float:
    """TP/(TP+FN); 0 when the ground truth is empty."""
    denom = c.tp + c.fn
    return c.tp / denom if denom else 0.0


def fpr(c: ConfusionCounts) -> float:
    """False positive rate FP/(TN+FP). Requires at least one negative voxel."""
    denom = c.tn + c.fp
    if denom == 0:
        raise ValueError("no negative voxels")
    return c.fp / denom


def dsc(c: ConfusionCounts) -> float:
    """Dice similarity 2TP/(2TP+FP+FN); two empty masks agree perfectly (1)."""
    denom = 2 * c.tp + c.fp + c.fn
    return 2 * c.tp / denom if denom else 1.0


def filter_small_lesions(cm: ComponentMap, min_mm3: float = 3.0) -> ComponentMap:
    """Drop components whose volume is not strictly above min_mm3; relabel 1..C."""
    keep = cm.volumes_mm3 > min_mm3
    if keep.all():
        return cm
    remap = np.zeros(cm.count + 1, dtype=np.int32)
    remap[1:][keep] = np.arange(1, int(keep.sum()) + 1, dtype=np.int32)
    return ComponentMap(cm.geom, remap[cm.labels], cm.volumes_mm3[keep],
                        cm.first_voxel_indices[keep])


def lesional_dsc(gt_cm: ComponentMap, pred_cm: ComponentMap) -> float:
    """Dice over detected lesions: one overlapping voxel counts as a hit.

    TP = ground-truth components touching any predicted foreground; FP =
    predicted components touching none of the ground truth; FN = missed
    ground-truth components. Two empty maps score 1.
    """
    if not gt_cm.geom.matches(pred_cm.geom):
        raise ValueError("geometry mismatch between component maps")
    if gt_cm.count == 0 and pred_cm.count == 0:
        return 1.0
    pred_fg = pred_cm.labels > 0
    gt_fg = gt_cm.labels > 0
    gt_hit = np.setdiff1d(np.unique(gt_cm.labels[pred_fg]), [0]).size
    pred_hit = np.setdiff1d(np.unique(pred_cm.labels[gt_fg]), [0]).size
    tp = gt_hit
    fn = gt_cm.count - gt_hit
    fp = pred_cm.count - pred_hit
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 1.0


# ---------------------------------------------------------------------------
# surfel-based distances
# ---------------------------------------------------------------------------


@dataclass
class SurfelSet:
    """Boundary surface elements: world positions (n, 3) mm and areas (n,) mm2."""

    positions: np.ndarray
    areas: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        self.areas = np.asarray(self.areas, dtype=np.float64).reshape(-1)
        if len(self.positions) != len(self.areas):
            raise ValueError("positions and areas must have equal length")
        if np.any(self.areas <= 0):
            raise ValueError("surfel areas must be positive")

    def __len__(self) -> int:
        return len(self.areas)

    @property
    def total_area(self) -> float:
        return float(self.areas.sum())


def extract_surfels(mask: LesionMask) -> SurfelSet:
    """One surfel per exposed voxel face (6-neighborhood, volume edge exposed)."""
    fg = mask.foreground
    padded = np.pad(fg, 1, constant_values=False)
    spacing = mask.spacing
    positions = []
    areas = []
    center = np.s_[1:-1]
    for axis in range(3):
        in_plane = spacing[(axis + 1) % 3] * spacing[(axis + 2) % 3]
        for sign in (-1, 1):
            sel = [center, center, center]
            sel[axis] = np.s_[2:] if sign > 0 else np.s_[:-2]
            neighbor = padded[tuple(sel)]
            exposed = fg & ~neighbor
            idx = np.argwhere(exposed).astype(np.float64)
            if idx.size == 0:
                continue
            idx[:, axis] += 0.5 * sign
            positions.append(mask.geom.voxel_to_world(idx.T).T)
            areas.append(np.full(len(idx), in_plane))
    if not positions:
        return SurfelSet(np.zeros((0, 3)), np.zeros(0))
    return SurfelSet(np.concatenate(positions), np.concatenate(areas))


def directed_distance_set(a: SurfelSet, b: SurfelSet) -> tuple[np.ndarray, np.ndarray]:
    """Per-surfel nearest-neighbor distance from a to b, with a's areas.

    Exact Euclidean nearest neighbors (KD-tree accelerated). Returns
    (distances_mm, areas_mm2) aligned with a's surfels.
    """
    if len(b) == 0:
        raise ValueError("distance to empty surface undefined")
    if len(a) == 0:
        return np.zeros(0), np.zeros(0)
    dists, _ = cKDTree(b.positions).query(a.positions)
    return np.asarray(dists, dtype=np.float64), a.areas.copy()


def _directed_hd95(a: SurfelSet, b: SurfelSet, fraction: float) -> float:
    dists, areas = directed_distance_set(a, b)
    order = np.argsort(dists, kind="stable")
    dists = dists[order]
    cum = np.cumsum(areas[order]) / areas.sum()
    idx = int(np.searchsorted(cum, fraction, side="left"))
    return float(dists[min(idx, len(dists) - 1)])


def hd95(a: SurfelSet, b: SurfelSet, fraction: float = 0.95) -> float:
    """Area-weighted 95th-percentile surface distance, symmetrized by max.

    Each directed value is the smallest observed distance at which the
    area-weighted cumulative fraction reaches ``fraction`` (no interpolation
    between order statistics).
    """
    if len(a) == 0 or len(b) == 0:
        raise ValueError("distance to empty surface undefined")
    return max(_directed_hd95(a, b, fraction), _directed_hd95(b, a, fraction))


def assd(a: SurfelSet, b: SurfelSet) -> float:
    """Average symmetric surface distance, area-weighted over both surfaces."""
    if len(a) == 0 or len(b) == 0:
        raise ValueError("distance to empty surface undefined")
    d_ab, w_ab = directed_distance_set(a, b)
    d_ba, w_ba = directed_distance_set(b, a)
    return float((np.dot(d_ab, w_ab) + np.dot(d_ba, w_ba))
                 / (w_ab.sum() + w_ba.sum()))


# ---------------------------------------------------------------------------
# per-case evaluation
# ---------------------------------------------------------------------------


@dataclass
class CaseMetrics:
    dsc: float
    lesional_dsc: float
    ppv: float
    fpr: float
    hd95_mm: float | None
    assd_mm: float | None
    pred_empty: bool
    gt_volume_mm3: float
    pred_volume_mm3: float


def evaluate_case(gt: LesionMask, pred: LesionMask, min_lesion_mm3: float = 3.0,
                  connectivity: int = 26,
                  filter_voxel_metrics: bool = False) -> CaseMetrics:
    """Full metric suite for one case.

    The small-lesion filter (strictly over ``min_lesion_mm3``) applies to
    lesion-wise counting only unless ``filter_voxel_metrics`` is set. An
    empty prediction scores 0 on overlap metrics (1 when the ground truth is
    empty too) and leaves the distances undefined; distances are also
    undefined when only the ground truth is empty.
    """
    _require_same_geometry(gt, pred, "ground truth and prediction")
    gt_cm = filter_small_lesions(connected_components(gt, connectivity), min_lesion_mm3)
    pred_cm = filter_small_lesions(connected_components(pred, connectivity),
                                   min_lesion_mm3)
    if filter_voxel_metrics:
        gt_vox = LesionMask(gt.geom, gt_cm.labels > 0)
        pred_vox = LesionMask(pred.geom, pred_cm.labels > 0)
    else:
        gt_vox, pred_vox = gt, pred

    c = confusion(gt_vox, pred_vox)
    pred_empty = pred.foreground_count() == 0
    gt_empty = gt.foreground_count() == 0
    if pred_empty and gt_empty:
        dsc_v, ldsc_v, ppv_v, fpr_v = 1.0, 1.0, 1.0, 0.0
    else:
        dsc_v = dsc(c)
        ldsc_v = lesional_dsc(gt_cm, pred_cm)
        ppv_v = ppv(c)
        fpr_v = fpr(c)

    if pred_empty or gt_empty:
        hd = sd = None
    else:
        surf_gt = extract_surfels(gt)
        surf_pred = extract_surfels(pred)
        hd = hd95(surf_gt, surf_pred)
        sd = assd(surf_gt, surf_pred)

    return CaseMetrics(
        dsc=dsc_v, lesional_dsc=ldsc_v, ppv=ppv_v, fpr=fpr_v,
        hd95_mm=hd, assd_mm=sd, pred_empty=pred_empty,
        gt_volume_mm3=gt.volume_mm3(), pred_volume_mm3=pred.volume_mm3(),
    )
