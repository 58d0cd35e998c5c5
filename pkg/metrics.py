"""
Evaluation metrics for promptpan.
Panoptic quality (PQ = SQ × RQ), mean IoU and base/new/all group tables.
All values are fractions internally; tables format them as percentages.
"""

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Union

import numpy as np

from data import VOID, ClassCatalog, PanopticSample, TaskProtocol
from errors import InputError
from inference import PanopticPrediction
from utils import format_pct

logger = logging.getLogger(__name__)

IOU_THRESHOLD = 0.5


@dataclass
class ClassStats:
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def present(self) -> bool:
        return self.tp + self.fp + self.fn > 0

    def merge(self, other: 'ClassStats') -> 'ClassStats':
        return ClassStats(self.iou_sum + other.iou_sum, self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


@dataclass
class PQResult:
    per_class: Dict[int, ClassStats] = field(default_factory=dict)
    groups: Dict[str, Set[int]] = field(default_factory=dict)

    def stats(self, class_id: int) -> ClassStats:
        return self.per_class.setdefault(class_id, ClassStats())

    def pq(self, class_id: int) -> float:
        s = self.per_class[class_id]
        denom = s.tp + 0.5 * s.fp + 0.5 * s.fn
        return s.iou_sum / denom if denom else 0.0

    def sq(self, class_id: int) -> float:
        s = self.per_class[class_id]
        return s.iou_sum / s.tp if s.tp else 0.0

    def rq(self, class_id: int) -> float:
        s = self.per_class[class_id]
        denom = s.tp + 0.5 * s.fp + 0.5 * s.fn
        return s.tp / denom if denom else 0.0

    def classes_in(self, members: Optional[Iterable[int]] = None) -> List[int]:
        """Classes of a group that occur in predictions or ground truth."""
        keep = set(self.per_class) if members is None else set(members)
        return sorted(c for c, s in self.per_class.items() if s.present and c in keep)

    def group_metrics(self, name: str) -> Optional[Dict[str, float]]:
        classes = _group_classes(self, name)
        if not classes:
            return None
        return {
            'pq': float(np.mean([self.pq(c) for c in classes])),
            'sq': float(np.mean([self.sq(c) for c in classes])),
            'rq': float(np.mean([self.rq(c) for c in classes])),
        }

    def merge(self, other: 'PQResult') -> 'PQResult':
        merged = PQResult(dict(self.per_class), dict(self.groups))
        for c, s in other.per_class.items():
            merged.per_class[c] = merged.per_class[c].merge(s) if c in merged.per_class else s
        return merged


@dataclass
class MIoUResult:
    per_class: Dict[int, ClassStats] = field(default_factory=dict)
    groups: Dict[str, Set[int]] = field(default_factory=dict)

    def iou(self, class_id: int) -> float:
        s = self.per_class[class_id]
        denom = s.tp + s.fp + s.fn
        return s.tp / denom if denom else 0.0

    def classes_in(self, members: Optional[Iterable[int]] = None) -> List[int]:
        keep = set(self.per_class) if members is None else set(members)
        return sorted(c for c, s in self.per_class.items() if s.present and c in keep)

    def group_metrics(self, name: str) -> Optional[Dict[str, float]]:
        classes = _group_classes(self, name)
        if not classes:
            return None
        return {'miou': float(np.mean([self.iou(c) for c in classes]))}


def _group_classes(result, name: str) -> List[int]:
    if name in result.groups:
        return result.classes_in(result.groups[name])
    return result.classes_in() if name == 'all' else []


def standard_groups(protocol: Optional[TaskProtocol] = None,
                    catalog: Optional[ClassCatalog] = None) -> Dict[str, Set[int]]:
    """base = C^1, new = C^{2:T}, all; plus things/stuff when a catalog is given."""
    groups: Dict[str, Set[int]] = OrderedDict()
    if protocol is not None:
        groups['base'] = set(protocol.base_classes())
        groups['new'] = set(protocol.new_classes())
        groups['all'] = set(protocol.ordering)
    if catalog is not None:
        groups.setdefault('all', set(catalog.ids))
        groups['things'] = set(catalog.things())
        groups['stuff'] = set(catalog.stuff())
    return groups


# ─── Panoptic quality ─────────────────────────────────────────────────────────

def image_pq_stats(pred: PanopticPrediction, gt: PanopticSample, result: PQResult):
    """
    Accumulate one image. IoU is taken over pixels that are void in neither
    map; a segment with any pixel in its own map takes part in matching and
    counts as FN or FP when left unmatched.
    """
    if pred.segment_map.shape != gt.segment_map.shape:
        raise InputError(f"image {gt.image_id}: prediction {pred.segment_map.shape} vs "
                         f"ground truth {gt.segment_map.shape}")
    gt_map = gt.segment_map.astype(np.int64)
    pred_map = pred.segment_map.astype(np.int64)
    gt_present = set(np.unique(gt_map[gt_map != VOID]).tolist())
    pred_present = set(np.unique(pred_map[pred_map != VOID]).tolist())

    valid = (gt_map != VOID) & (pred_map != VOID)
    gt_ids, pred_ids = gt_map[valid], pred_map[valid]
    gt_area = dict(zip(*np.unique(gt_ids, return_counts=True)))
    pred_area = dict(zip(*np.unique(pred_ids, return_counts=True)))
    base = int(pred_ids.max()) + 1 if pred_ids.size else 1
    pairs, counts = np.unique(gt_ids * base + pred_ids, return_counts=True)
    intersection = {(int(p // base), int(p % base)): int(n) for p, n in zip(pairs, counts)}

    gt_class = {s.segment_id: s.class_id for s in gt.segments}
    pred_class = {s.segment_id: s.class_id for s in pred.segments}

    matched_gt: Set[int] = set()
    matched_pred: Set[int] = set()
    for (g, p), inter in sorted(intersection.items()):
        if g not in gt_class or gt_class[g] != pred_class.get(p):
            continue
        union = gt_area[g] + pred_area[p] - inter
        iou = inter / union
        if iou > IOU_THRESHOLD:
            if g in matched_gt or p in matched_pred:
                raise InputError(f"image {gt.image_id}: segment matched twice")
            matched_gt.add(g)
            matched_pred.add(p)
            stats = result.stats(gt_class[g])
            stats.tp += 1
            stats.iou_sum += iou

    for s in gt.segments:
        if s.segment_id in gt_present and s.segment_id not in matched_gt:
            result.stats(s.class_id).fn += 1
    for s in pred.segments:
        if s.segment_id in pred_present and s.segment_id not in matched_pred:
            result.stats(s.class_id).fp += 1


def panoptic_quality(preds: Sequence[PanopticPrediction], gts: Sequence[PanopticSample],
                     groups: Optional[Dict[str, Set[int]]] = None) -> PQResult:
    if len(preds) != len(gts):
        raise InputError(f"{len(preds)} predictions for {len(gts)} ground-truth images")
    result = PQResult(groups=dict(groups or {}))
    for pred, gt in zip(preds, gts):
        if pred.image_id and gt.image_id and pred.image_id != gt.image_id:
            raise InputError(f"prediction {pred.image_id} aligned with ground truth {gt.image_id}")
        image_pq_stats(pred, gt, result)
    summary = result.group_metrics('all')
    logger.info(f"PQ over {len(gts)} images: {format_pct(summary['pq'] if summary else None)}")
    return result


# ─── Mean IoU ─────────────────────────────────────────────────────────────────

def mean_iou(pred_maps: Sequence[np.ndarray], gt_maps: Sequence[np.ndarray],
             groups: Optional[Dict[str, Set[int]]] = None) -> MIoUResult:
    """Per-class pixel IoU accumulated over the dataset; gt-void pixels are skipped."""
    if len(pred_maps) != len(gt_maps):
        raise InputError(f"{len(pred_maps)} predicted maps for {len(gt_maps)} ground-truth maps")
    result = MIoUResult(groups=dict(groups or {}))
    for pred, gt in zip(pred_maps, gt_maps):
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise InputError(f"map shapes differ: {pred.shape} vs {gt.shape}")
        valid = gt != VOID
        p, g = pred[valid], gt[valid]
        for c in np.union1d(np.unique(g), np.unique(p[p != VOID])):
            c = int(c)
            s = result.per_class.setdefault(c, ClassStats())
            hit_p, hit_g = p == c, g == c
            s.tp += int(np.sum(hit_p & hit_g))
            s.fp += int(np.sum(hit_p & ~hit_g))
            s.fn += int(np.sum(~hit_p & hit_g))
    return result


# ─── Tables ───────────────────────────────────────────────────────────────────

GROUP_ORDER = ('base', 'new', 'all', 'things', 'stuff')


def group_report(result: Union[PQResult, MIoUResult], protocol: Optional[TaskProtocol] = None,
                 catalog: Optional[ClassCatalog] = None) -> List[Dict[str, str]]:
    """
    One row per group in fixed order: base C^1, new C^{2:T}, all, then
    things/stuff when known. Metrics are percentages with one decimal;
    a group without classes shows '-'.
    """
    if protocol is not None or catalog is not None:
        result.groups = standard_groups(protocol, catalog)
    keys = ['pq', 'sq', 'rq'] if isinstance(result, PQResult) else ['miou']
    rows = []
    for name in [g for g in GROUP_ORDER if g in result.groups] or ['all']:
        metrics = result.group_metrics(name)
        row = {'group': name, 'classes': str(len(_group_classes(result, name)))}
        for key in keys:
            row[key] = format_pct(metrics[key] if metrics else None)
        rows.append(row)
    return rows


def per_class_rows(result: Union[PQResult, MIoUResult], catalog: Optional[ClassCatalog] = None) -> List[list]:
    rows = []
    for c in sorted(result.per_class):
        s = result.per_class[c]
        name = catalog.info(c).name if catalog is not None and c in catalog.ids else str(c)
        if isinstance(result, PQResult):
            rows.append([c, name, s.tp, s.fp, s.fn, f"{s.iou_sum:.6f}",
                         f"{result.pq(c):.6f}", f"{result.sq(c):.6f}", f"{result.rq(c):.6f}"])
        else:
            rows.append([c, name, s.tp, s.fp, s.fn, f"{result.iou(c):.6f}"])
    return rows


PQ_CLASS_HEADER = ['class_id', 'name', 'tp', 'fp', 'fn', 'iou_sum', 'pq', 'sq', 'rq']
MIOU_CLASS_HEADER = ['class_id', 'name', 'tp_pixels', 'fp_pixels', 'fn_pixels', 'iou']
