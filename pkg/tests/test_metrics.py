import numpy as np
import pytest

from lesionforge.metrics import (
    ConfusionCounts,
    SurfelSet,
    assd,
    confusion,
    directed_distance_set,
    dsc,
    evaluate_case,
    extract_surfels,
    filter_small_lesions,
    fpr,
    hd95,
    lesional_dsc,
    ppv,
    sensitivity,
)
from lesionforge.morphology import connected_components, dilate
from lesionforge.volume import Geometry, LesionMask

from conftest import make_random_mask
from oracles import (
    all_pairs_directed,
    assd_reference,
    hd95_reference,
    lesional_counts_reference,
)


def _mask(data, spacing=1.0):
    data = np.asarray(data, dtype=np.uint8)
    geom = Geometry.isotropic(data.shape, spacing)
    return LesionMask(geom, data)


class TestConfusionMetrics:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(0)
        gt = make_random_mask((8, 8, 8), rng)
        c = confusion(gt, gt)
        assert c.fp == 0 and c.fn == 0
        assert dsc(c) == 1.0 and ppv(c) == 1.0 and fpr(c) == 0.0

    def test_complement_prediction(self):
        rng = np.random.default_rng(1)
        gt = make_random_mask((8, 8, 8), rng, density=0.5)
        pred = LesionMask(gt.geom, 1 - gt.data)
        c = confusion(gt, pred)
        assert c.tp == 0 and c.tn == 0

    def test_random_matches_bruteforce(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            gt = make_random_mask((16, 16, 16), rng, density=0.3)
            pred = make_random_mask((16, 16, 16), rng, density=0.3)
            c = confusion(gt, pred)
            tp = fp = fn = tn = 0
            for g, p in zip(gt.data.ravel(), pred.data.ravel()):
                if g and p:
                    tp += 1
                elif p:
                    fp += 1
                elif g:
                    fn += 1
                else:
                    tn += 1
            assert (c.tp, c.fp, c.fn, c.tn) == (tp, fp, fn, tn)

    def test_ppv_hand_values(self):
        assert ppv(ConfusionCounts(3, 1, 5, 7)) == 0.75
        assert ppv(ConfusionCounts(0, 0, 5, 7)) == 0.0

    def test_fpr_hand_values(self):
        assert fpr(ConfusionCounts(1, 0, 1, 10)) == 0.0
        assert fpr(ConfusionCounts(0, 2, 0, 98)) == pytest.approx(0.02)
        with pytest.raises(ValueError, match="no negative voxels"):
            fpr(ConfusionCounts(5, 0, 0, 0))

    def test_dsc_hand_values(self):
        assert dsc(ConfusionCounts(1, 1, 1, 5)) == 0.5
        assert dsc(ConfusionCounts(0, 0, 0, 10)) == 1.0

    def test_dsc_symmetry_and_ppv_sensitivity_duality(self):
        rng = np.random.default_rng(3)
        gt = make_random_mask((10, 10, 10), rng)
        pred = make_random_mask((10, 10, 10), rng)
        assert dsc(confusion(gt, pred)) == dsc(confusion(pred, gt))
        assert ppv(confusion(gt, pred)) == sensitivity(confusion(pred, gt))

    def test_geometry_mismatch(self):
        a = _mask(np.zeros((4, 4, 4)))
        b = _mask(np.zeros((5, 5, 5)))
        with pytest.raises(ValueError, match="geometry mismatch"):
            confusion(a, b)


class TestFilterSmallLesions:
    def test_all_large_unchanged(self):
        data = np.zeros((10, 10, 10))
        data[1:3, 1:3, 1:3] = 1  # 8 mm3
        cm = connected_components(_mask(data))
        out = filter_small_lesions(cm)
        assert out is cm

    def test_two_voxel_lesion_dropped_at_default(self):
        data = np.zeros((8, 8, 8))
        data[1:3, 1, 1] = 1  # 2 mm3, not strictly over 3
        cm = filter_small_lesions(connected_components(_mask(data)))
        assert cm.count == 0

    def test_exactly_threshold_dropped(self):
        data = np.zeros((8, 8, 8))
        data[1:4, 1, 1] = 1  # exactly 3 mm3: "over" is strict
        cm = filter_small_lesions(connected_components(_mask(data)))
        assert cm.count == 0

    def test_mixed_matches_threshold_oracle(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            mask = make_random_mask((12, 12, 12), rng, density=0.1)
            cm = connected_components(mask)
            out = filter_small_lesions(cm, 3.0)
            expected = int(np.sum(cm.volumes_mm3 > 3.0))
            assert out.count == expected
            if out.count:
                assert np.array_equal(np.unique(out.labels)[1:],
                                      np.arange(1, out.count + 1))

    def test_idempotent(self):
        rng = np.random.default_rng(5)
        mask = make_random_mask((12, 12, 12), rng, density=0.1)
        once = filter_small_lesions(connected_components(mask))
        twice = filter_small_lesions(once)
        assert np.array_equal(once.labels, twice.labels)


class TestLesionalDsc:
    def test_identical_three_components(self):
        data = np.zeros((12, 12, 12))
        data[1:3, 1:3, 1:3] = 1
        data[6:8, 6:8, 6:8] = 1
        data[9:11, 1:3, 9:11] = 1
        cm = connected_components(_mask(data))
        assert cm.count == 3
        assert lesional_dsc(cm, cm) == 1.0

    def test_hand_case_half(self):
        gt = np.zeros((12, 12, 12))
        gt[1:3, 1:3, 1:3] = 1
        gt[8:10, 8:10, 8:10] = 1
        pred = np.zeros((12, 12, 12))
        pred[1:3, 1:3, 1:3] = 1  # covers one gt component exactly
        pred[5:7, 1:3, 8:10] = 1  # disjoint false positive
        score = lesional_dsc(connected_components(_mask(gt)),
                             connected_components(_mask(pred)))
        assert score == 0.5

    def test_empty_conventions(self):
        empty = connected_components(_mask(np.zeros((6, 6, 6))))
        one = np.zeros((6, 6, 6))
        one[2:4, 2:4, 2:4] = 1
        nonempty = connected_components(_mask(one))
        assert lesional_dsc(empty, empty) == 1.0
        assert lesional_dsc(nonempty, empty) == 0.0
        assert lesional_dsc(empty, nonempty) == 0.0

    def test_random_matches_overlap_oracle(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            gt = make_random_mask((16, 16, 16), rng, density=0.08)
            pred = make_random_mask((16, 16, 16), rng, density=0.08)
            gt_cm = connected_components(gt)
            pred_cm = connected_components(pred)
            tp, fp, fn = lesional_counts_reference(gt_cm.labels, pred_cm.labels)
            denom = 2 * tp + fp + fn
            expected = 2 * tp / denom if denom else 1.0
            assert lesional_dsc(gt_cm, pred_cm) == pytest.approx(expected)

    def test_dilating_pred_never_decreases_tp(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            gt = make_random_mask((12, 12, 12), rng, density=0.08)
            pred = make_random_mask((12, 12, 12), rng, density=0.08)
            gt_cm = connected_components(gt)
            tp0, _, _ = lesional_counts_reference(
                gt_cm.labels, connected_components(pred).labels)
            grown = LesionMask(pred.geom, dilate(pred.foreground, 1))
            tp1, _, _ = lesional_counts_reference(
                gt_cm.labels, connected_components(grown).labels)
            assert tp1 >= tp0


class TestSurfels:
    def test_single_isotropic_voxel(self):
        data = np.zeros((5, 5, 5))
        data[2, 2, 2] = 1
        s = extract_surfels(_mask(data))
        assert len(s) == 6
        assert s.total_area == pytest.approx(6.0)
        # face centers sit half a voxel off the center in world mm
        offsets = np.sort(np.abs(s.positions - 2.0).max(axis=1))
        assert np.allclose(offsets, 0.5)

    def test_two_voxel_bar(self):
        data = np.zeros((5, 5, 5))
        data[1:3, 2, 2] = 1
        s = extract_surfels(_mask(data))
        assert len(s) == 10
        assert s.total_area == pytest.approx(10.0)

    def test_anisotropic_voxel_area(self):
        data = np.zeros((5, 5, 5))
        data[2, 2, 2] = 1
        geom = Geometry((5, 5, 5), (1.0, 1.0, 3.0), np.diag([1.0, 1.0, 3.0, 1.0]))
        s = extract_surfels(LesionMask(geom, data.astype(np.uint8)))
        assert len(s) == 6
        assert s.total_area == pytest.approx(14.0)
        assert sorted(s.areas.tolist()) == [1.0, 1.0, 3.0, 3.0, 3.0, 3.0]

    def test_empty_mask(self):
        s = extract_surfels(_mask(np.zeros((4, 4, 4))))
        assert len(s) == 0


class TestDistances:
    def _cube_pair(self, offset=3.0):
        a = np.zeros((10, 10, 10))
        a[2, 2, 2] = 1
        b = np.zeros((10, 10, 10))
        b[5, 2, 2] = 1  # 3 mm apart on x
        return extract_surfels(_mask(a)), extract_surfels(_mask(b))

    def test_identical_surfaces_zero(self):
        s, _ = self._cube_pair()
        d, _areas = directed_distance_set(s, s)
        assert np.all(d == 0)
        assert hd95(s, s) == 0.0
        assert assd(s, s) == 0.0

    def test_directed_matches_all_pairs(self):
        a, b = self._cube_pair()
        d, _ = directed_distance_set(a, b)
        ref = all_pairs_directed(a.positions, b.positions)
        assert np.allclose(np.sort(d), np.sort(ref), atol=1e-12)

    def test_translation_invariance(self):
        a, b = self._cube_pair()
        shift = np.array([4.5, -2.25, 7.0])
        a2 = SurfelSet(a.positions + shift, a.areas)
        b2 = SurfelSet(b.positions + shift, b.areas)
        d1, _ = directed_distance_set(a, b)
        d2, _ = directed_distance_set(a2, b2)
        assert np.allclose(np.sort(d1), np.sort(d2), atol=1e-9)

    def test_empty_target_errors(self):
        a, _ = self._cube_pair()
        empty = SurfelSet(np.zeros((0, 3)), np.zeros(0))
        with pytest.raises(ValueError, match="empty surface"):
            directed_distance_set(a, empty)
        with pytest.raises(ValueError, match="empty surface"):
            hd95(a, empty)
        with pytest.raises(ValueError, match="empty surface"):
            assd(a, empty)

    def test_hd95_cumulative_hand_case(self):
        # 20 unit-area surfels at distances 1..20: the 19th reaches 0.95
        a = SurfelSet(np.array([[float(i), 0.0, 0.0] for i in range(1, 21)]),
                      np.ones(20))
        b = SurfelSet(np.zeros((1, 3)), np.ones(1))
        assert hd95(a, b) == pytest.approx(19.0)

    def test_random_masks_match_bruteforce(self):
        rng = np.random.default_rng(8)
        for _ in range(25):
            gt = make_random_mask((10, 10, 10), rng, density=0.15)
            pred = make_random_mask((10, 10, 10), rng, density=0.15)
            if not gt.foreground_count() or not pred.foreground_count():
                continue
            a, b = extract_surfels(gt), extract_surfels(pred)
            assert hd95(a, b) == pytest.approx(
                hd95_reference(a.positions, a.areas, b.positions, b.areas),
                abs=1e-9)
            assert assd(a, b) == pytest.approx(
                assd_reference(a.positions, a.areas, b.positions, b.areas),
                abs=1e-9)

    def test_assd_symmetric(self):
        a, b = self._cube_pair()
        assert assd(a, b) == assd(b, a)


class TestEvaluateCase:
    def test_perfect_case(self):
        rng = np.random.default_rng(9)
        gt = make_random_mask((12, 12, 12), rng, density=0.1)
        m = evaluate_case(gt, gt)
        assert m.dsc == 1.0 and m.lesional_dsc == 1.0 and m.ppv == 1.0
        assert m.fpr == 0.0
        assert m.hd95_mm == 0.0 and m.assd_mm == 0.0
        assert not m.pred_empty

    def test_empty_prediction(self):
        rng = np.random.default_rng(10)
        gt = make_random_mask((12, 12, 12), rng, density=0.1)
        pred = LesionMask.empty(gt.geom)
        m = evaluate_case(gt, pred)
        assert m.pred_empty
        assert m.dsc == 0.0 and m.lesional_dsc == 0.0 and m.ppv == 0.0
        assert m.fpr == 0.0
        assert m.hd95_mm is None and m.assd_mm is None

    def test_both_empty(self):
        gt = _mask(np.zeros((8, 8, 8)))
        m = evaluate_case(gt, gt)
        assert m.dsc == 1.0 and m.lesional_dsc == 1.0 and m.ppv == 1.0
        assert m.fpr == 0.0
        assert m.hd95_mm is None and m.assd_mm is None

    def test_fields_match_individual_ops(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            gt = make_random_mask((12, 12, 12), rng, density=0.12)
            pred = make_random_mask((12, 12, 12), rng, density=0.12)
            if not gt.foreground_count() or not pred.foreground_count():
                continue
            m = evaluate_case(gt, pred)
            c = confusion(gt, pred)
            assert m.dsc == dsc(c)
            assert m.ppv == ppv(c)
            assert m.fpr == fpr(c)
            gt_cm = filter_small_lesions(connected_components(gt))
            pred_cm = filter_small_lesions(connected_components(pred))
            assert m.lesional_dsc == lesional_dsc(gt_cm, pred_cm)
            assert m.hd95_mm == hd95(extract_surfels(gt), extract_surfels(pred))
            assert m.assd_mm == assd(extract_surfels(gt), extract_surfels(pred))
            assert m.gt_volume_mm3 == gt.volume_mm3()
            assert m.pred_volume_mm3 == pred.volume_mm3()

    def test_lesional_invariant_to_relabeling(self):
        rng = np.random.default_rng(12)
        gt = make_random_mask((12, 12, 12), rng, density=0.1)
        pred = make_random_mask((12, 12, 12), rng, density=0.1)
        gt_cm = connected_components(gt)
        pred_cm = connected_components(pred)
        base = lesional_dsc(gt_cm, pred_cm)
        # flip component ids: voxel sets identical, labels permuted
        from lesionforge.morphology import ComponentMap
        perm = np.zeros(gt_cm.count + 1, dtype=np.int32)
        perm[1:] = np.arange(gt_cm.count, 0, -1)
        flipped = ComponentMap(gt_cm.geom, perm[gt_cm.labels],
                               gt_cm.volumes_mm3[::-1],
                               gt_cm.first_voxel_indices[::-1])
        assert lesional_dsc(flipped, pred_cm) == base
