"""
Inference for promptpan.
Turns the raw outputs of every prompt set into per-query class decisions
(with the no-obj score built from the other steps' heads) and assembles
panoptic and semantic maps. Per-image evidence can be written to JSON
sidecars so post-processing sweeps never rerun the network.
"""

import os
import base64
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from scipy.special import expit

from data import VOID, ClassCatalog, PanopticSample, Segment
from errors import ConfigError, FormatError, InputError
from model import ModelState, check_finite
from utils import read_json, write_json

logger = logging.getLogger(__name__)

NO_OBJ = -1
CONFIDENCE_ORDER = 'confidence_order'
PROB_SUM = 'prob_sum'
LOGIT_SUM = 'logit_sum'
SIDECAR_FORMAT = 'promptpan-evidence/1'

ArrayLike = Union[np.ndarray, torch.Tensor]


@dataclass(frozen=True)
class InferenceConfig:
    delta: float = 0.5
    single_head_threshold: float = 0.5
    overlap_rule: str = CONFIDENCE_ORDER
    min_segment_pixels: int = 0
    mask_threshold: float = 0.5
    no_obj_reduction: str = PROB_SUM
    logit_manipulation: bool = True

    def validate(self):
        if not 0.0 < self.delta <= 1.0:
            raise ConfigError(f"inference.delta must lie in (0, 1], got {self.delta}")
        if not 0.0 < self.single_head_threshold < 1.0:
            raise ConfigError("inference.single_head_threshold must lie in (0, 1)")
        if self.overlap_rule != CONFIDENCE_ORDER:
            raise ConfigError(f"unsupported overlap_rule {self.overlap_rule!r}")
        if self.min_segment_pixels < 0:
            raise ConfigError("inference.min_segment_pixels must be >= 0")
        if not 0.0 < self.mask_threshold < 1.0:
            raise ConfigError("inference.mask_threshold must lie in (0, 1)")
        if self.no_obj_reduction not in (PROB_SUM, LOGIT_SUM):
            raise ConfigError(f"no_obj_reduction must be {PROB_SUM} or {LOGIT_SUM}")


@dataclass
class QueryDecision:
    step: int
    query: int
    class_id: int
    score: float
    mask_probs: Optional[np.ndarray] = None

    @property
    def is_no_obj(self) -> bool:
        return self.class_id == NO_OBJ


@dataclass(frozen=True)
class PredictedSegment:
    segment_id: int
    class_id: int
    is_thing: bool
    score: float


@dataclass
class PanopticPrediction:
    segment_map: np.ndarray
    segments: List[PredictedSegment]
    image_id: str = ''

    def validate(self):
        ids = {s.segment_id for s in self.segments}
        present = set(np.unique(self.segment_map).tolist()) - {VOID}
        if present != ids or len(ids) != len(self.segments):
            raise InputError(f"prediction {self.image_id}: segment map and records disagree")

    def to_sample(self, image: np.ndarray) -> PanopticSample:
        """PanopticSample view for the COCO writer."""
        segments = [Segment(s.segment_id, s.class_id, s.is_thing) for s in self.segments]
        return PanopticSample(image, self.segment_map.astype(np.int32), segments, image_id=self.image_id)

    def scores(self) -> Dict[int, float]:
        return {s.segment_id: s.score for s in self.segments}


def _numpy(x: ArrayLike) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().double().numpy()
    return np.asarray(x, dtype=np.float64)


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


# ─── Logit manipulation ───────────────────────────────────────────────────────

def other_sums(blocks: Sequence[Optional[ArrayLike]], t: int) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-query sums over every class of every head except head t, as sigmoid
    probabilities and as raw logits. blocks[k-1] holds MLP^k applied to the
    embeddings of prompt set t.
    """
    if not 1 <= t <= len(blocks):
        raise InputError(f"step {t} has no head block among {len(blocks)}")
    for k, block in enumerate(blocks, 1):
        if block is None:
            raise InputError(f"head block {k} missing for prompt set {t}")
    n = _numpy(blocks[t - 1]).shape[0]
    prob_sum = np.zeros(n)
    logit_sum = np.zeros(n)
    for k, block in enumerate(blocks, 1):
        if k == t:
            continue
        logits = _numpy(block)
        if logits.ndim != 2 or logits.shape[0] != n:
            raise InputError(f"head block {k} has shape {logits.shape}, expected {n} rows")
        prob_sum += _sigmoid(logits).sum(axis=1)
        logit_sum += logits.sum(axis=1)
    return prob_sum, logit_sum


def no_obj_scores(prob_sum: np.ndarray, logit_sum: np.ndarray, num_heads: int, cfg: InferenceConfig) -> np.ndarray:
    """The dynamic no-obj score; the fixed threshold τ with one head or manipulation off."""
    if cfg.delta < 0:
        raise InputError(f"delta must be >= 0, got {cfg.delta}")
    if num_heads < 2 or not cfg.logit_manipulation:
        return np.full(prob_sum.shape, cfg.single_head_threshold)
    if cfg.no_obj_reduction == LOGIT_SUM:
        return _sigmoid(cfg.delta * logit_sum)
    return cfg.delta * prob_sum


def manipulate_logits(blocks: Sequence[Optional[ArrayLike]], t: int, cfg: InferenceConfig
                      ) -> Tuple[np.ndarray, np.ndarray]:
    """(no_obj_scores N^t, own_probs N^t × |C^t|) for prompt set t."""
    prob_sum, logit_sum = other_sums(blocks, t)
    own_probs = _sigmoid(_numpy(blocks[t - 1]))
    return no_obj_scores(prob_sum, logit_sum, len(blocks), cfg), own_probs


def decide(own_probs: ArrayLike, no_obj: ArrayLike, step: int = 1, classes: Optional[Sequence[int]] = None,
           mask_probs: Optional[np.ndarray] = None) -> List[QueryDecision]:
    """
    Per query: NO_OBJ when the no-obj score reaches the best class probability
    (ties go to NO_OBJ), otherwise the argmax class mapped to its global id.
    """
    probs = _numpy(own_probs)
    scores = _numpy(no_obj)
    if probs.ndim != 2 or scores.shape != (probs.shape[0],):
        raise InputError(f"own_probs {probs.shape} and no_obj {scores.shape} do not agree")
    if classes is not None and len(classes) != probs.shape[1]:
        raise InputError(f"{len(classes)} class ids for {probs.shape[1]} class columns")
    decisions = []
    for q in range(probs.shape[0]):
        best = int(np.argmax(probs[q])) if probs.shape[1] else 0
        top = float(probs[q, best]) if probs.shape[1] else 0.0
        masks = None if mask_probs is None else mask_probs[q]
        if scores[q] >= top:
            decisions.append(QueryDecision(step, q, NO_OBJ, float(scores[q]), masks))
        else:
            class_id = int(classes[best]) if classes is not None else best
            decisions.append(QueryDecision(step, q, class_id, top, masks))
    return decisions


# ─── Map assembly ─────────────────────────────────────────────────────────────

def _upsample(probs: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    if probs.shape == tuple(size):
        return probs.astype(np.float64)
    x = torch.from_numpy(np.asarray(probs, dtype=np.float64))[None, None]
    return F.interpolate(x, size=size, mode='bilinear', align_corners=False)[0, 0].numpy()


def _kept(decisions: Sequence[QueryDecision]) -> List[QueryDecision]:
    kept = [d for d in decisions if not d.is_no_obj]
    for d in kept:
        if d.mask_probs is None:
            raise InputError(f"decision (step {d.step}, query {d.query}) carries no mask")
    return sorted(kept, key=lambda d: (-d.score, d.step, d.query))


def panoptic_merge(decisions: Sequence[QueryDecision], catalog: ClassCatalog, image_size: Tuple[int, int],
                   cfg: InferenceConfig, image_id: str = '') -> PanopticPrediction:
    """
    Paint queries in descending score order onto still-free pixels whose
    mask probability exceeds the threshold. Empty or undersized segments
    are dropped; stuff segments of one class are merged.
    """
    h, w = image_size
    segment_map = np.zeros((h, w), dtype=np.int32)
    records: Dict[int, PredictedSegment] = {}
    stuff_ids: Dict[int, int] = {}
    next_id = 1
    for d in _kept(decisions):
        mask = (_upsample(d.mask_probs, (h, w)) > cfg.mask_threshold) & (segment_map == VOID)
        area = int(mask.sum())
        if area == 0 or area < cfg.min_segment_pixels:
            continue
        is_thing = catalog.is_thing(d.class_id)
        if not is_thing and d.class_id in stuff_ids:
            segment_map[mask] = stuff_ids[d.class_id]
            continue
        segment_map[mask] = next_id
        records[next_id] = PredictedSegment(next_id, d.class_id, is_thing, d.score)
        if not is_thing:
            stuff_ids[d.class_id] = next_id
        next_id += 1
    return PanopticPrediction(segment_map, list(records.values()), image_id)


def semantic_merge(decisions: Sequence[QueryDecision], image_size: Tuple[int, int], cfg: InferenceConfig) -> np.ndarray:
    """
    Per-pixel class map from Σ score·mask_prob over each class's queries;
    pixels whose total mass stays below τ are void.
    """
    h, w = image_size
    mass: Dict[int, np.ndarray] = {}
    for d in _kept(decisions):
        mass.setdefault(d.class_id, np.zeros((h, w)))
        mass[d.class_id] += d.score * _upsample(d.mask_probs, (h, w))
    if not mass:
        return np.full((h, w), VOID, dtype=np.int32)
    class_ids = sorted(mass)
    stack = np.stack([mass[c] for c in class_ids])
    result = np.asarray(class_ids, dtype=np.int32)[np.argmax(stack, axis=0)]
    result[stack.sum(axis=0) < cfg.single_head_threshold] = VOID
    return result


def panoptic_to_semantic(target: Union[PanopticSample, PanopticPrediction]) -> np.ndarray:
    """Class map of a panoptic sample or prediction (void stays void)."""
    lookup = {s.segment_id: s.class_id for s in target.segments}
    result = np.zeros(target.segment_map.shape, dtype=np.int32)
    for sid, cid in lookup.items():
        result[target.segment_map == sid] = cid
    return result


# ─── Evidence and sidecars ────────────────────────────────────────────────────

@dataclass
class StepEvidence:
    """Everything post-processing needs from one prompt set on one image."""
    step: int
    classes: Tuple[int, ...]
    own_probs: np.ndarray        # N × |C^t| float64
    other_prob_sum: np.ndarray   # N
    other_logit_sum: np.ndarray  # N
    mask_probs: np.ndarray       # N × h × w float32


@dataclass
class ImageEvidence:
    image_id: str
    image_size: Tuple[int, int]
    num_heads: int
    steps: List[StepEvidence] = field(default_factory=list)


@torch.no_grad()
def collect_evidence(state: ModelState, images, image_ids: Sequence[str],
                     steps: Optional[Sequence[int]] = None) -> List[ImageEvidence]:
    """
    Run the selected prompt sets (default: all) and cross-apply the selected
    heads. Heads outside ``steps`` are ignored entirely, so steps=[1]
    reproduces the single-step model.
    """
    steps = list(range(1, state.num_steps + 1)) if steps is None else sorted(set(steps))
    for k in steps:
        state._check_step(k)
    was_training = state.training
    state.eval()
    memory, pixel = state.encode(images)
    batch = memory.shape[0]
    if len(image_ids) != batch:
        raise InputError(f"{len(image_ids)} image ids for {batch} images")
    evidence = [ImageEvidence(str(i), tuple(state.cfg.image_size), len(steps)) for i in image_ids]
    for t in steps:
        out = state.decode(memory, pixel, t)
        check_finite(out)
        blocks = state.apply_heads(out.decoder_embeddings, steps)
        mask_probs = torch.sigmoid(out.mask_logits).to(torch.float32).cpu().numpy()
        for b in range(batch):
            per_image = [block[b] for block in blocks]
            prob_sum, logit_sum = other_sums(per_image, steps.index(t) + 1)
            evidence[b].steps.append(StepEvidence(
                step=t,
                classes=state.step_classes(t),
                own_probs=_sigmoid(_numpy(per_image[steps.index(t)])),
                other_prob_sum=prob_sum,
                other_logit_sum=logit_sum,
                mask_probs=mask_probs[b],
            ))
    state.train(was_training)
    return evidence


def decisions_from_evidence(evidence: ImageEvidence, cfg: InferenceConfig) -> List[QueryDecision]:
    decisions = []
    for se in evidence.steps:
        scores = no_obj_scores(se.other_prob_sum, se.other_logit_sum, evidence.num_heads, cfg)
        decisions.extend(decide(se.own_probs, scores, se.step, se.classes, se.mask_probs))
    return decisions


def predict_image(evidence: ImageEvidence, catalog: ClassCatalog, cfg: InferenceConfig,
                  semantic: bool = False) -> Tuple[PanopticPrediction, Optional[np.ndarray]]:
    decisions = decisions_from_evidence(evidence, cfg)
    prediction = panoptic_merge(decisions, catalog, evidence.image_size, cfg, evidence.image_id)
    semantic_map = semantic_merge(decisions, evidence.image_size, cfg) if semantic else None
    return prediction, semantic_map


def predict(state: ModelState, samples: Sequence[PanopticSample], catalog: ClassCatalog, cfg: InferenceConfig,
            steps: Optional[Sequence[int]] = None, batch_size: int = 16,
            semantic: bool = False) -> Tuple[List[PanopticPrediction], List[Optional[np.ndarray]], List[ImageEvidence]]:
    """Predictions (and evidence) for a list of samples, batched through the network."""
    predictions, semantic_maps, all_evidence = [], [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        ids = [s.image_id or f"{start + i:06d}" for i, s in enumerate(chunk)]
        for ev in collect_evidence(state, [s.image for s in chunk], ids, steps):
            prediction, semantic_map = predict_image(ev, catalog, cfg, semantic)
            predictions.append(prediction)
            semantic_maps.append(semantic_map)
            all_evidence.append(ev)
    logger.info(f"Predicted {len(predictions)} images with {len(steps or range(state.num_steps))} prompt sets")
    return predictions, semantic_maps, all_evidence


def _encode_array(array: np.ndarray) -> dict:
    data = np.ascontiguousarray(array, dtype='<f4')
    return {'shape': list(data.shape), 'data': base64.b64encode(data.tobytes()).decode('ascii')}


def _decode_array(payload: dict) -> np.ndarray:
    raw = base64.b64decode(payload['data'])
    return np.frombuffer(raw, dtype='<f4').reshape(payload['shape']).copy()


def write_sidecar(path: str, evidence: ImageEvidence, config_hash: str, build: str):
    write_json(path, {
        'format': SIDECAR_FORMAT,
        'config_hash': config_hash,
        'build_id': build,
        'image_id': evidence.image_id,
        'image_size': list(evidence.image_size),
        'num_heads': evidence.num_heads,
        'steps': [{
            'step': se.step,
            'classes': list(se.classes),
            'own_probs': se.own_probs.tolist(),
            'other_prob_sum': se.other_prob_sum.tolist(),
            'other_logit_sum': se.other_logit_sum.tolist(),
            'mask_probs': _encode_array(se.mask_probs),
        } for se in evidence.steps],
    })


def read_sidecar(path: str) -> ImageEvidence:
    try:
        payload = read_json(path)
    except (OSError, ValueError) as e:
        raise FormatError(f"{path}: cannot read sidecar ({e})")
    if payload.get('format') != SIDECAR_FORMAT:
        raise FormatError(f"{path}: unsupported sidecar format {payload.get('format')!r}")
    try:
        steps = [StepEvidence(
            step=int(s['step']),
            classes=tuple(int(c) for c in s['classes']),
            own_probs=np.asarray(s['own_probs'], dtype=np.float64).reshape(-1, len(s['classes'])),
            other_prob_sum=np.asarray(s['other_prob_sum'], dtype=np.float64),
            other_logit_sum=np.asarray(s['other_logit_sum'], dtype=np.float64),
            mask_probs=_decode_array(s['mask_probs']),
        ) for s in payload['steps']]
        return ImageEvidence(payload['image_id'], tuple(payload['image_size']), int(payload['num_heads']), steps)
    except (KeyError, TypeError, ValueError) as e:
        raise FormatError(f"{path}: malformed sidecar ({e})")


def write_sidecars(directory: str, evidence: Sequence[ImageEvidence], config_hash: str, build: str) -> List[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for ev in evidence:
        path = os.path.join(directory, f"{ev.image_id}.json")
        write_sidecar(path, ev, config_hash, build)
        paths.append(path)
    logger.info(f"Wrote {len(paths)} evidence sidecars to {directory}")
    return paths


def read_sidecars(directory: str) -> List[ImageEvidence]:
    if not os.path.isdir(directory):
        raise FormatError(f"{directory}: no sidecar directory")
    names = sorted(n for n in os.listdir(directory) if n.endswith('.json'))
    return [read_sidecar(os.path.join(directory, n)) for n in names]
