import warnings
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from data import VOID, generate_dataset
from errors import ConfigError, FormatError, InputError
from inference import (LOGIT_SUM, NO_OBJ, ImageEvidence, InferenceConfig, QueryDecision, StepEvidence,
                       collect_evidence, decide, decisions_from_evidence, manipulate_logits, no_obj_scores,
                       other_sums, panoptic_merge, panoptic_to_semantic, predict, read_sidecar,
                       read_sidecars, semantic_merge, write_sidecar, write_sidecars)
from model import add_step

SIZE = (8, 8)


def _mask(rows=slice(None), cols=slice(None), value=1.0):
    m = np.zeros(SIZE)
    m[rows, cols] = value
    return m


def _decision(class_id, score, mask, step=1, query=0):
    return QueryDecision(step, query, class_id, score, mask)


class TestManipulation:
    def test_single_head_uses_threshold(self):
        no_obj, own = manipulate_logits([np.zeros((3, 2))], 1, InferenceConfig(single_head_threshold=0.4))
        assert np.allclose(no_obj, 0.4)
        assert np.allclose(own, 0.5)

    def test_zero_logits_closed_form(self):
        blocks = [np.zeros((2, 3)), np.zeros((2, 4))]
        no_obj, _ = manipulate_logits(blocks, 1, InferenceConfig(delta=0.5))
        assert np.allclose(no_obj, 1.0)

    def test_delta_zero_suppresses_nothing(self):
        rng = np.random.default_rng(0)
        blocks = [rng.normal(size=(5, 3)), rng.normal(size=(5, 2))]
        cfg = replace(InferenceConfig(), delta=0.0)
        no_obj, own = manipulate_logits(blocks, 2, cfg)
        assert np.all(no_obj == 0.0)
        assert not any(d.is_no_obj for d in decide(own, no_obj))

    def test_logit_sum_reduction(self):
        blocks = [np.array([[1.0, -3.0]]), np.array([[2.0]])]
        cfg = InferenceConfig(delta=0.5, no_obj_reduction=LOGIT_SUM)
        no_obj, _ = manipulate_logits(blocks, 2, cfg)
        assert no_obj[0] == pytest.approx(1 / (1 + np.exp(1.0)))

    def test_manipulation_off(self):
        blocks = [np.full((2, 2), 5.0), np.zeros((2, 1))]
        no_obj, _ = manipulate_logits(blocks, 2, InferenceConfig(logit_manipulation=False))
        assert np.allclose(no_obj, 0.5)

    def test_missing_block(self):
        with pytest.raises(InputError):
            other_sums([np.zeros((2, 2)), None], 1)
        with pytest.raises(InputError):
            other_sums([np.zeros((2, 2))], 2)
        with pytest.raises(InputError):
            other_sums([np.zeros((2, 2)), np.zeros((3, 1))], 1)

    def test_negative_delta(self):
        with pytest.raises(InputError):
            no_obj_scores(np.zeros(2), np.zeros(2), 2, replace(InferenceConfig(), delta=-0.1))

    def test_saturated_logits_stay_quiet(self):
        blocks = [np.array([[1000.0, -1000.0]]), np.array([[-1000.0]])]
        with warnings.catch_warnings():
            warnings.simplefilter('error')
            no_obj, own = manipulate_logits(blocks, 2, InferenceConfig(delta=0.5))
            logit_no_obj, _ = manipulate_logits(blocks, 2, InferenceConfig(delta=0.5, no_obj_reduction=LOGIT_SUM))
        assert own.tolist() == [[0.0]]
        assert no_obj[0] == pytest.approx(0.5)
        assert logit_no_obj[0] == pytest.approx(0.5)

    @given(st.integers(0, 2 ** 16), st.floats(0.1, 10.0))
    def test_argmax_invariance(self, seed, scale):
        rng = np.random.default_rng(seed)
        own = rng.random((6, 3))
        prob_sum = rng.random(6) * 4
        cfg = InferenceConfig(delta=0.5)
        base = decide(own, no_obj_scores(prob_sum, prob_sum, 2, cfg))
        scaled = decide(own, no_obj_scores(prob_sum * scale, prob_sum, 2, replace(cfg, delta=0.5 / scale)))
        assert [d.class_id for d in base] == [d.class_id for d in scaled]

    @given(st.integers(0, 2 ** 16), st.floats(0.0, 2.0), st.floats(0.0, 2.0))
    def test_monotone_suppression(self, seed, a, b):
        low, high = min(a, b), max(a, b)
        rng = np.random.default_rng(seed)
        blocks = [rng.normal(size=(8, 3)), rng.normal(size=(8, 4)), rng.normal(size=(8, 2))]
        before = decide(*reversed(manipulate_logits(blocks, 2, replace(InferenceConfig(), delta=low))))
        after = decide(*reversed(manipulate_logits(blocks, 2, replace(InferenceConfig(), delta=high))))
        assert {d.query for d in before if d.is_no_obj} <= {d.query for d in after if d.is_no_obj}

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            InferenceConfig(delta=0.0).validate()
        with pytest.raises(ConfigError):
            InferenceConfig(delta=1.5).validate()
        with pytest.raises(ConfigError):
            InferenceConfig(no_obj_reduction='max').validate()
        InferenceConfig().validate()


class TestDecide:
    def test_argmax_class(self):
        [d] = decide(np.array([[0.9, 0.1]]), np.array([0.3]))
        assert (d.class_id, d.score) == (0, 0.9)

    def test_tie_goes_to_no_obj(self):
        [d] = decide(np.array([[0.4, 0.2]]), np.array([0.4]))
        assert d.class_id == NO_OBJ

    def test_global_ids(self):
        [d] = decide(np.array([[0.1, 0.8]]), np.array([0.2]), step=3, classes=(7, 11))
        assert (d.step, d.class_id) == (3, 11)

    @pytest.mark.parametrize('seed', range(20))
    def test_against_definition(self, seed):
        rng = np.random.default_rng(seed)
        own = rng.random((10, 4))
        no_obj = rng.random(10)
        for q, d in enumerate(decide(own, no_obj, classes=(2, 4, 6, 8))):
            if no_obj[q] >= own[q].max():
                assert d.class_id == NO_OBJ
            else:
                assert d.class_id == (2, 4, 6, 8)[int(own[q].argmax())]
                assert d.score == own[q].max()

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            decide(np.zeros((3, 2)), np.zeros(2))
        with pytest.raises(InputError):
            decide(np.zeros((3, 2)), np.zeros(3), classes=(1,))


class TestPanopticMerge:
    def test_single_query_covers_image(self, tiny_catalog):
        pred = panoptic_merge([_decision(1, 0.9, _mask())], tiny_catalog, SIZE, InferenceConfig())
        assert [s.class_id for s in pred.segments] == [1]
        assert np.all(pred.segment_map == pred.segments[0].segment_id)

    def test_disjoint_queries(self, tiny_catalog):
        decisions = [_decision(1, 0.9, _mask(rows=slice(0, 4))), _decision(2, 0.8, _mask(rows=slice(4, 8)), query=1)]
        pred = panoptic_merge(decisions, tiny_catalog, SIZE, InferenceConfig())
        pred.validate()
        assert len(pred.segments) == 2
        assert set(np.unique(pred.segment_map)) == {1, 2}

    def test_overlap_goes_to_higher_score(self, tiny_catalog):
        decisions = [_decision(2, 0.8, _mask(), query=1), _decision(1, 0.9, _mask())]
        pred = panoptic_merge(decisions, tiny_catalog, SIZE, InferenceConfig())
        assert [(s.class_id, s.score) for s in pred.segments] == [(1, 0.9)]

    def test_no_obj_contributes_nothing(self, tiny_catalog):
        decisions = [_decision(NO_OBJ, 0.99, _mask()), _decision(1, 0.6, _mask(rows=slice(0, 2)), query=1)]
        pred = panoptic_merge(decisions, tiny_catalog, SIZE, InferenceConfig())
        assert int((pred.segment_map != VOID).sum()) == 16

    def test_stuff_segments_merge(self, tiny_catalog):
        stuff = sorted(tiny_catalog.stuff())[0]
        decisions = [_decision(stuff, 0.9, _mask(cols=slice(0, 2))),
                     _decision(stuff, 0.7, _mask(cols=slice(6, 8)), query=1)]
        pred = panoptic_merge(decisions, tiny_catalog, SIZE, InferenceConfig())
        assert len(pred.segments) == 1
        assert int((pred.segment_map == pred.segments[0].segment_id).sum()) == 32

    def test_min_segment_pixels(self, tiny_catalog):
        decisions = [_decision(1, 0.9, _mask(rows=slice(0, 1), cols=slice(0, 2))),
                     _decision(2, 0.8, _mask(rows=slice(4, 8)), query=1)]
        pred = panoptic_merge(decisions, tiny_catalog, SIZE, InferenceConfig(min_segment_pixels=3))
        assert [s.class_id for s in pred.segments] == [2]

    def test_threshold_is_strict(self, tiny_catalog):
        pred = panoptic_merge([_decision(1, 0.9, _mask(value=0.5))], tiny_catalog, SIZE, InferenceConfig())
        assert pred.segments == [] and np.all(pred.segment_map == VOID)

    def test_low_resolution_masks_upsampled(self, tiny_catalog):
        pred = panoptic_merge([_decision(1, 0.9, np.ones((2, 2)))], tiny_catalog, SIZE, InferenceConfig())
        assert np.all(pred.segment_map == 1)

    def test_mask_required(self, tiny_catalog):
        with pytest.raises(InputError):
            panoptic_merge([_decision(1, 0.9, None)], tiny_catalog, SIZE, InferenceConfig())


class TestSemanticMerge:
    def test_constant_map(self):
        result = semantic_merge([_decision(3, 0.9, _mask())], SIZE, InferenceConfig())
        assert np.all(result == 3)

    def test_no_queries(self):
        result = semantic_merge([_decision(NO_OBJ, 0.9, _mask())], SIZE, InferenceConfig())
        assert np.all(result == VOID)

    @pytest.mark.parametrize('seed', range(10))
    def test_two_queries_against_recomputation(self, seed):
        rng = np.random.default_rng(seed)
        masks = rng.random((2,) + SIZE)
        scores = rng.random(2)
        decisions = [_decision(1, scores[0], masks[0]), _decision(2, scores[1], masks[1], query=1)]
        result = semantic_merge(decisions, SIZE, InferenceConfig())
        mass = scores[:, None, None] * masks
        expected = np.where(mass[1] > mass[0], 2, 1)
        expected[mass.sum(axis=0) < 0.5] = VOID
        assert np.array_equal(result, expected)

    def test_panoptic_to_semantic(self, tiny_dataset):
        sample = tiny_dataset[0]
        result = panoptic_to_semantic(sample)
        for s in sample.segments:
            assert np.all(result[sample.segment_map == s.segment_id] == s.class_id)
        assert np.all(result[sample.segment_map == VOID] == VOID)


class TestEvidence:
    def test_own_probs_follow_class_logits(self, tiny_model, tiny_dataset, tiny_protocol):
        add_step(tiny_model, tiny_protocol.classes(2), seed=1)
        images = [s.image for s in tiny_dataset[:2]]
        evidence = collect_evidence(tiny_model, images, ['a', 'b'])
        assert [se.step for se in evidence[0].steps] == [1, 2]
        assert evidence[0].num_heads == 2
        with torch.no_grad():
            logits = tiny_model.forward_step(images, 2).class_logits
        assert np.allclose(evidence[1].steps[1].own_probs, torch.sigmoid(logits[1]).double().numpy(), atol=1e-6)

    def test_step_subset_acts_as_single_step_model(self, tiny_model, tiny_dataset, tiny_protocol):
        add_step(tiny_model, tiny_protocol.classes(2), seed=1)
        [ev] = collect_evidence(tiny_model, [tiny_dataset[0].image], ['a'], steps=[1])
        assert ev.num_heads == 1 and [se.step for se in ev.steps] == [1]
        decisions = decisions_from_evidence(ev, InferenceConfig())
        for d in decisions:
            own = ev.steps[0].own_probs[d.query]
            assert d.is_no_obj == (own.max() <= 0.5)

    def test_image_id_count(self, tiny_model, tiny_dataset):
        with pytest.raises(InputError):
            collect_evidence(tiny_model, [tiny_dataset[0].image], ['a', 'b'])

    def test_predict(self, tiny_model, tiny_dataset, tiny_catalog):
        preds, sem, evidence = predict(tiny_model, tiny_dataset[:5], tiny_catalog, InferenceConfig(),
                                       batch_size=2, semantic=True)
        assert len(preds) == len(sem) == len(evidence) == 5
        for pred, sample, sem_map in zip(preds, tiny_dataset, sem):
            pred.validate()
            assert pred.image_id == sample.image_id
            assert sem_map.shape == sample.size


class TestSidecars:
    def _evidence(self):
        rng = np.random.default_rng(3)
        return ImageEvidence('000007', SIZE, 2, [
            StepEvidence(k, classes, rng.random((3, len(classes))), rng.random(3) * 2, rng.normal(size=3),
                         rng.random((3, 2, 2)).astype(np.float32))
            for k, classes in ((1, (1, 2)), (2, (3,)))
        ])

    def test_round_trip_preserves_decisions(self, tmp_path, tiny_catalog):
        ev = self._evidence()
        path = str(tmp_path / 'ev.json')
        write_sidecar(path, ev, 'hash', 'build')
        back = read_sidecar(path)
        assert (back.image_id, back.image_size, back.num_heads) == (ev.image_id, ev.image_size, ev.num_heads)
        for a, b in zip(ev.steps, back.steps):
            assert a.classes == b.classes
            assert np.array_equal(a.own_probs, b.own_probs)
            assert np.array_equal(a.mask_probs, b.mask_probs)
        cfg = InferenceConfig(delta=0.3)
        assert [(d.class_id, d.score) for d in decisions_from_evidence(ev, cfg)] == \
               [(d.class_id, d.score) for d in decisions_from_evidence(back, cfg)]

    def test_directory(self, tmp_path):
        ev = self._evidence()
        paths = write_sidecars(str(tmp_path / 'side'), [ev], 'hash', 'build')
        assert paths[0].endswith('000007.json')
        assert [e.image_id for e in read_sidecars(str(tmp_path / 'side'))] == ['000007']

    def test_bad_format(self, tmp_path):
        path = tmp_path / 'ev.json'
        path.write_text('{"format": "other"}')
        with pytest.raises(FormatError):
            read_sidecar(str(path))
        path.write_text('not json')
        with pytest.raises(FormatError):
            read_sidecar(str(path))
        with pytest.raises(FormatError):
            read_sidecars(str(tmp_path / 'missing'))
