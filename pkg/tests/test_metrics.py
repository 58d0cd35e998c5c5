import numpy as np
import pytest
from hypothesis import given, strategies as st

from data import VOID, ClassCatalog, ClassInfo, PanopticSample, Segment, build_protocol
from errors import InputError
from inference import PanopticPrediction, PredictedSegment
from metrics import (ClassStats, PQResult, group_report, mean_iou, panoptic_quality, per_class_rows,
                     standard_groups)

CLASSES = (1, 2, 3)


def _as_prediction(sample):
    return PanopticPrediction(sample.segment_map.copy(),
                              [PredictedSegment(s.segment_id, s.class_id, s.is_thing, 1.0) for s in sample.segments],
                              sample.image_id)


def _random_map(rng, size=16, max_segments=5, allow_void=True):
    segment_map = np.zeros((size, size), dtype=np.int32)
    if not allow_void:
        segment_map[:] = 1
    for sid in range(1, int(rng.integers(1, max_segments + 1)) + 1):
        y0, x0 = rng.integers(0, size - 2, size=2)
        y1, x1 = y0 + rng.integers(2, size - y0 + 1), x0 + rng.integers(2, size - x0 + 1)
        segment_map[y0:y1, x0:x1] = sid
    return segment_map


def _sample(rng, segment_map, image_id='img'):
    ids = sorted(set(np.unique(segment_map).tolist()) - {VOID})
    segments = [Segment(i, int(rng.choice(CLASSES)), True) for i in ids]
    return PanopticSample(np.zeros(segment_map.shape + (3,), np.float32), segment_map, segments, image_id=image_id)


def _perturb(rng, sample, noise=0.15):
    segment_map = sample.segment_map.copy()
    flip = rng.random(segment_map.shape) < noise
    segment_map[flip] = rng.integers(0, 6, size=int(flip.sum()))
    ids = sorted(set(np.unique(segment_map).tolist()) - {VOID})
    known = {s.segment_id: s.class_id for s in sample.segments}
    segments = []
    for i in ids:
        class_id = known.get(i, int(rng.choice(CLASSES)))
        if rng.random() < 0.2:
            class_id = int(rng.choice(CLASSES))
        segments.append(PredictedSegment(i, class_id, True, 1.0))
    return PanopticPrediction(segment_map, segments, sample.image_id)


def _oracle(pred, gt):
    """Enumerate every class-consistent pairing and keep the largest all-IoU>0.5 one."""
    valid = (gt.segment_map != VOID) & (pred.segment_map != VOID)
    gts = [(s.segment_id, s.class_id) for s in gt.segments if np.any(gt.segment_map == s.segment_id)]
    preds = [(s.segment_id, s.class_id) for s in pred.segments if np.any(pred.segment_map == s.segment_id)]

    def iou(g, p):
        gm = valid & (gt.segment_map == g)
        pm = valid & (pred.segment_map == p)
        union = np.sum(gm | pm)
        return np.sum(gm & pm) / union if union else 0.0

    def search(index, used):
        if index == len(gts):
            return []
        best = search(index + 1, used)
        g, gc = gts[index]
        for p, pc in preds:
            if p in used or pc != gc:
                continue
            value = iou(g, p)
            if value > 0.5:
                rest = [(g, p, value)] + search(index + 1, used | {p})
                if len(rest) > len(best):
                    best = rest
        return best

    pairs = search(0, frozenset())
    stats = {}
    for g, p, value in pairs:
        s = stats.setdefault(dict(gts)[g], ClassStats())
        s.tp += 1
        s.iou_sum += value
    matched_g = {g for g, _, _ in pairs}
    matched_p = {p for _, p, _ in pairs}
    for g, c in gts:
        if g not in matched_g:
            stats.setdefault(c, ClassStats()).fn += 1
    for p, c in preds:
        if p not in matched_p:
            stats.setdefault(c, ClassStats()).fp += 1
    return stats


class TestPanopticQuality:
    def test_perfect_prediction(self, tiny_dataset):
        result = panoptic_quality([_as_prediction(s) for s in tiny_dataset], tiny_dataset)
        for c in result.classes_in():
            assert result.pq(c) == result.sq(c) == result.rq(c) == 1.0
        assert result.group_metrics('all') == {'pq': 1.0, 'sq': 1.0, 'rq': 1.0}

    def test_missing_prediction(self):
        gt = PanopticSample(np.zeros((4, 4, 3), np.float32), np.ones((4, 4), np.int32), [Segment(1, 2, True)])
        pred = PanopticPrediction(np.zeros((4, 4), np.int32), [])
        result = panoptic_quality([pred], [gt])
        assert result.pq(2) == 0.0
        assert result.per_class[2].fn == 1

    @pytest.mark.parametrize('seed', range(200))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        gt = _sample(rng, _random_map(rng))
        pred = _perturb(rng, gt)
        result = panoptic_quality([pred], [gt])
        expected = _oracle(pred, gt)
        assert set(result.classes_in()) == set(expected)
        for c, s in expected.items():
            got = result.per_class[c]
            assert (got.tp, got.fp, got.fn) == (s.tp, s.fp, s.fn)
            assert got.iou_sum == pytest.approx(s.iou_sum, abs=1e-12)
            if got.tp:
                assert result.pq(c) == pytest.approx(result.sq(c) * result.rq(c), abs=1e-12)
            assert 0.0 <= result.pq(c) <= 1.0

    @pytest.mark.parametrize('seed', range(20))
    def test_symmetry(self, seed):
        rng = np.random.default_rng(1000 + seed)
        a = _sample(rng, _random_map(rng))
        b_map = _random_map(rng)
        b = _sample(rng, b_map)
        forward = panoptic_quality([_as_prediction(b)], [a])
        backward = panoptic_quality([_as_prediction(a)], [b])
        for c in set(forward.per_class) | set(backward.per_class):
            f = forward.per_class.get(c, ClassStats())
            r = backward.per_class.get(c, ClassStats())
            assert (f.tp, f.fp, f.fn) == (r.tp, r.fn, r.fp)
            assert f.iou_sum == pytest.approx(r.iou_sum)

    def test_void_removed_from_both_masks(self):
        gt_map = np.zeros((4, 4), np.int32)
        gt_map[:2] = 1
        gt = PanopticSample(np.zeros((4, 4, 3), np.float32), gt_map, [Segment(1, 1, True)])
        pred_map = np.full((4, 4), 1, np.int32)
        pred_map[2:, 2:] = 2
        pred = PanopticPrediction(pred_map, [PredictedSegment(1, 1, True, 0.9), PredictedSegment(2, 3, True, 0.9)])
        result = panoptic_quality([pred], [gt])
        assert result.per_class[1].tp == 1 and result.per_class[1].iou_sum == 1.0
        assert (result.per_class[3].tp, result.per_class[3].fp) == (0, 1)

    def test_partly_void_prediction_is_symmetric(self):
        full = np.ones((4, 4), np.int32)
        clipped = full.copy()
        clipped[3] = VOID
        image = np.zeros((4, 4, 3), np.float32)
        gt = PanopticSample(image, full, [Segment(1, 1, True)])
        pred = PanopticPrediction(clipped, [PredictedSegment(1, 1, True, 1.0)])
        forward = panoptic_quality([pred], [gt]).per_class[1]
        swapped = panoptic_quality([PanopticPrediction(full, [PredictedSegment(1, 1, True, 1.0)])],
                                   [PanopticSample(image, clipped, [Segment(1, 1, True)])]).per_class[1]
        assert forward.iou_sum == swapped.iou_sum == 1.0
        assert forward.tp == swapped.tp == 1

    @given(st.integers(0, 2 ** 16), st.lists(st.floats(0.0, 1.0), min_size=1, max_size=5))
    def test_voiding_pixels_never_raises_pq(self, seed, fractions):
        rng = np.random.default_rng(seed)
        gt = _sample(rng, _random_map(rng))
        pred = _as_prediction(gt)
        previous = panoptic_quality([pred], [gt]).group_metrics('all')['pq']
        assert previous == 1.0
        segment_map = pred.segment_map.copy()
        for fraction in sorted(fractions):
            segment_map[rng.random(segment_map.shape) < fraction] = VOID
            present = set(np.unique(segment_map).tolist())
            degraded = PanopticPrediction(segment_map.copy(),
                                          [s for s in pred.segments if s.segment_id in present], gt.image_id)
            pq = panoptic_quality([degraded], [gt]).group_metrics('all')['pq']
            assert pq <= previous + 1e-12
            previous = pq

    def test_misaligned(self, tiny_dataset):
        preds = [_as_prediction(s) for s in tiny_dataset]
        with pytest.raises(InputError):
            panoptic_quality(preds[:-1], tiny_dataset)
        with pytest.raises(InputError):
            panoptic_quality(list(reversed(preds)), tiny_dataset)


class TestMeanIoU:
    def test_perfect(self, tiny_dataset):
        maps = [np.where(s.segment_map > 0, 1, 0) for s in tiny_dataset]
        result = mean_iou(maps, maps)
        assert result.group_metrics('all') == {'miou': 1.0}

    def test_complement(self):
        gt = np.array([[1, 1], [2, 2]])
        result = mean_iou([3 - gt], [gt])
        assert result.iou(1) == 0.0 and result.iou(2) == 0.0

    @pytest.mark.parametrize('seed', range(20))
    def test_confusion_matrix_oracle(self, seed):
        rng = np.random.default_rng(seed)
        gts = [rng.integers(0, 4, size=(8, 8)) for _ in range(3)]
        preds = [rng.integers(0, 4, size=(8, 8)) for _ in range(3)]
        confusion = np.zeros((4, 4), dtype=np.int64)
        for p, g in zip(preds, gts):
            np.add.at(confusion, (g.ravel(), p.ravel()), 1)
        confusion[0] = 0
        result = mean_iou(preds, gts)
        for c in range(1, 4):
            union = confusion[c].sum() + confusion[:, c].sum() - confusion[c, c]
            if union:
                assert result.iou(c) == pytest.approx(confusion[c, c] / union, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            mean_iou([np.zeros((2, 2))], [np.zeros((3, 3))])


class TestGroups:
    @pytest.fixture
    def catalog(self):
        return ClassCatalog((ClassInfo(1, 'a', True), ClassInfo(2, 'b', True), ClassInfo(3, 'c', False)))

    @pytest.fixture
    def result(self):
        return PQResult({1: ClassStats(0.8, 1, 0, 0), 2: ClassStats(0.6, 1, 1, 0), 3: ClassStats(0.0, 0, 0, 1)})

    def test_standard_groups_partition(self, catalog):
        protocol = build_protocol(catalog, 2, 1)
        groups = standard_groups(protocol, catalog)
        assert groups['base'] | groups['new'] == groups['all'] == {1, 2, 3}
        assert not groups['base'] & groups['new']
        assert groups['things'] == {1, 2} and groups['stuff'] == {3}

    def test_hand_computed_means(self, catalog, result):
        rows = group_report(result, build_protocol(catalog, 2, 1))
        assert [r['group'] for r in rows] == ['base', 'new', 'all']
        assert rows[0] == {'group': 'base', 'classes': '2', 'pq': '60.0', 'sq': '70.0', 'rq': '83.3'}
        assert rows[1]['pq'] == '0.0'
        assert rows[2]['pq'] == '40.0'

    def test_things_and_stuff(self, catalog, result):
        rows = group_report(result, build_protocol(catalog, 2, 1), catalog)
        assert [r['group'] for r in rows] == ['base', 'new', 'all', 'things', 'stuff']

    def test_single_step_has_no_new_group(self, catalog, result):
        rows = group_report(result, build_protocol(catalog, 3, 1))
        assert rows[1] == {'group': 'new', 'classes': '0', 'pq': '-', 'sq': '-', 'rq': '-'}

    def test_merge_adds_counts(self, result):
        merged = result.merge(result)
        assert merged.per_class[2].fp == 2
        assert merged.pq(2) == pytest.approx(result.pq(2))

    def test_per_class_rows(self, catalog, result):
        rows = per_class_rows(result, catalog)
        assert [r[0] for r in rows] == [1, 2, 3]
        assert rows[0][1] == 'a'
