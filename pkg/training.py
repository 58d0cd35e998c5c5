"""
Training for promptpan.
Bipartite matching, sigmoid-based mask/class losses, the per-step optimization
loop and a finite-difference gradient check.
"""

import os
import csv
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from data import PanopticSample, hflip
from errors import ConfigError, InputError, NumericalError, ProtocolError, StateError
from model import ModelState, StepOutput
from utils import build_id, timed

logger = logging.getLogger(__name__)

DICE_EPS = 1.0
LOG_CLAMP = -100.0


@dataclass(frozen=True)
class MatchWeights:
    w_cls: float = 2.0
    w_bce: float = 5.0
    w_dice: float = 5.0

    def validate(self):
        values = (self.w_cls, self.w_bce, self.w_dice)
        if any(v < 0 for v in values) or not any(v > 0 for v in values):
            raise ConfigError("match weights must be non-negative and not all zero")


@dataclass(frozen=True)
class TrainHyper:
    iters_per_class: int = 1600
    iter_scale: float = 0.1
    iters: Optional[int] = None
    lr_first: float = 1e-4
    lr_later: float = 5e-4
    batch_size: int = 8
    weight_decay: float = 0.05
    clip_norm: float = 1.0
    seed: int = 0
    hflip: bool = True
    aux_loss: bool = False
    log_every: int = 50

    def validate(self):
        positive = ('iters_per_class', 'iter_scale', 'lr_first', 'lr_later', 'batch_size', 'clip_norm', 'log_every')
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigError(f"training.{name} must be positive")
        if self.weight_decay < 0 or self.seed < 0:
            raise ConfigError("weight_decay and seed must be non-negative")
        if self.iters is not None and self.iters < 0:
            raise ConfigError("training.iters must be >= 0")

    def num_iters(self, num_classes: int) -> int:
        """iters_per_class × |C^t|, scaled for desk runs, unless iters is pinned."""
        if self.iters is not None:
            return self.iters
        return max(1, int(round(self.iters_per_class * num_classes * self.iter_scale)))


@dataclass
class Assignment:
    pairs: List[Tuple[int, int]]
    unmatched_queries: List[int]
    total_cost: float = 0.0

    @property
    def query_indices(self) -> List[int]:
        return [q for q, _ in self.pairs]

    @property
    def target_indices(self) -> List[int]:
        return [j for _, j in self.pairs]


@dataclass
class StepTargets:
    """Ground truth of one image for one step, at mask resolution."""
    labels: torch.Tensor   # M, local class indices
    masks: torch.Tensor    # M × h × w in [0, 1]
    valid: torch.Tensor    # h × w pixel weights (0 = unlabeled at source)

    @property
    def num_targets(self) -> int:
        return int(self.labels.shape[0])


def _downsample(mask: np.ndarray, size: Tuple[int, int]) -> np.ndarray:
    h, w = size
    fy, fx = mask.shape[0] // h, mask.shape[1] // w
    return mask.reshape(h, fy, w, fx).mean(axis=(1, 3))


def build_targets(sample: PanopticSample, classes: Sequence[int], mask_resolution: Tuple[int, int],
                  dtype: torch.dtype = torch.float32) -> StepTargets:
    """Area-averaged masks of the sample's segments whose class is in ``classes``."""
    index = {c: i for i, c in enumerate(classes)}
    labels, masks = [], []
    for s in sample.segments:
        if s.class_id in index:
            labels.append(index[s.class_id])
            masks.append(_downsample((sample.segment_map == s.segment_id).astype(np.float64), mask_resolution))
    h, w = mask_resolution
    mask_array = np.stack(masks) if masks else np.zeros((0, h, w))
    if sample.ignore_mask is not None:
        valid = 1.0 - _downsample(sample.ignore_mask.astype(np.float64), mask_resolution)
    else:
        valid = np.ones((h, w))
    return StepTargets(
        labels=torch.tensor(labels, dtype=torch.long),
        masks=torch.from_numpy(mask_array).to(dtype),
        valid=torch.from_numpy(valid).to(dtype),
    )


# ─── Matching ─────────────────────────────────────────────────────────────────

def _log_probs(logits: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    p = torch.sigmoid(logits)
    return torch.log(p).clamp(min=LOG_CLAMP), torch.log1p(-p).clamp(min=LOG_CLAMP)


@torch.no_grad()
def match_cost(class_logits: torch.Tensor, mask_logits: torch.Tensor, targets: StepTargets,
               weights: MatchWeights) -> np.ndarray:
    """
    N × M matching cost for one image.

    cost(q, j) = w_cls·BCE(σ(s_q), onehot(c_j)) + w_bce·BCE(σ(m_q), g_j) + w_dice·Dice(σ(m_q), g_j),
    each term averaged over its elements; logs are clamped at -100 so
    saturated probabilities stay finite.
    """
    if not (torch.isfinite(class_logits).all() and torch.isfinite(mask_logits).all()):
        raise NumericalError("non-finite logits passed to match_cost")
    n, c = class_logits.shape
    m = targets.num_targets
    if m == 0:
        return np.zeros((n, 0))

    cls = class_logits.double()
    log_p, log_1mp = _log_probs(cls)
    labels = targets.labels
    neg_total = -log_1mp.sum(dim=1, keepdim=True)
    cost_cls = (neg_total - log_p[:, labels] + log_1mp[:, labels]) / c

    valid = targets.valid.to(mask_logits.device).double().flatten()
    denom = valid.sum().clamp(min=1e-12)
    probs = torch.sigmoid(mask_logits.double().flatten(1))
    log_q, log_1mq = _log_probs(mask_logits.double().flatten(1))
    g = targets.masks.to(mask_logits.device).double().flatten(1)
    cost_bce = -((log_q * valid) @ g.T + (log_1mq * valid) @ (1 - g).T) / denom

    pv = probs * valid
    gv = g * valid
    numer = 2 * pv @ gv.T + DICE_EPS
    cost_dice = 1 - numer / (pv.sum(1)[:, None] + gv.sum(1)[None, :] + DICE_EPS)

    cost = weights.w_cls * cost_cls + weights.w_bce * cost_bce + weights.w_dice * cost_dice
    if not torch.isfinite(cost).all():
        raise NumericalError("matching cost is not finite")
    return cost.cpu().numpy()


def _optimum(cost: np.ndarray) -> float:
    if cost.shape[0] == 0 or cost.shape[1] == 0:
        return 0.0
    rows, cols = linear_sum_assignment(cost)
    return float(cost[rows, cols].sum())


def hungarian(cost: np.ndarray, tie_break: bool = True) -> Assignment:
    """
    Minimum-cost one-to-one assignment of size min(N, M).

    Among optimal assignments the lexicographically smallest one wins:
    query 0 takes the smallest target it can while staying optimal, then
    query 1, and so on (with 'unmatched' ordered after every target).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise InputError(f"cost matrix must be 2-D, got shape {cost.shape}")
    n, m = cost.shape
    if n == 0 or m == 0:
        return Assignment([], list(range(n)), 0.0)

    rows, cols = linear_sum_assignment(cost)
    best = float(cost[rows, cols].sum())
    pairs = sorted(zip(rows.tolist(), cols.tolist()))

    if tie_break:
        tol = 1e-9 * max(1.0, abs(best))
        fixed: Dict[int, Optional[int]] = {}
        fixed_cost = 0.0
        for q in range(n):
            used = {j for j in fixed.values() if j is not None}
            candidates: List[Optional[int]] = [j for j in range(m) if j not in used]
            if n > m:
                candidates.append(None)
            for j in candidates:
                rest_rows = [r for r in range(q + 1, n)]
                rest_cols = [c for c in range(m) if c not in used and c != j]
                skipped = sum(1 for v in fixed.values() if v is None) + (j is None)
                # every target must be matched when queries outnumber targets
                if n > m and len(rest_rows) < len(rest_cols):
                    continue
                if n > m and skipped > n - m:
                    continue
                step_cost = fixed_cost + (cost[q, j] if j is not None else 0.0)
                total = step_cost + _optimum(cost[np.ix_(rest_rows, rest_cols)])
                if total <= best + tol:
                    fixed[q] = j
                    fixed_cost = step_cost
                    break
            else:
                fixed = {}
                break
        if len(fixed) == n:
            pairs = [(q, j) for q, j in fixed.items() if j is not None]

    matched = {q for q, _ in pairs}
    total = float(sum(cost[q, j] for q, j in pairs))
    return Assignment(pairs, [q for q in range(n) if q not in matched], total)


# ─── Losses ───────────────────────────────────────────────────────────────────

def dice_loss(pred_probs: torch.Tensor, target: torch.Tensor, valid: Optional[torch.Tensor] = None,
              eps: float = DICE_EPS) -> torch.Tensor:
    """Mean over masks of 1 − (2Σpg + ε)/(Σp + Σg + ε); inputs K × ... in [0, 1]."""
    if pred_probs.shape != target.shape:
        raise InputError(f"dice shapes differ: {tuple(pred_probs.shape)} vs {tuple(target.shape)}")
    if pred_probs.shape[0] == 0:
        return pred_probs.sum() * 0.0
    p = pred_probs.flatten(1)
    g = target.flatten(1)
    if valid is not None:
        p = p * valid.flatten()
        g = g * valid.flatten()
    dice = 1 - (2 * (p * g).sum(1) + eps) / (p.sum(1) + g.sum(1) + eps)
    return dice.mean()


def bce_mask_loss(pred_logits: torch.Tensor, target: torch.Tensor,
                  valid: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Per-pixel sigmoid BCE, averaged over (valid) pixels and masks."""
    if pred_logits.shape != target.shape:
        raise InputError(f"mask shapes differ: {tuple(pred_logits.shape)} vs {tuple(target.shape)}")
    if pred_logits.shape[0] == 0:
        return pred_logits.sum() * 0.0
    loss = F.binary_cross_entropy_with_logits(pred_logits.flatten(1), target.flatten(1), reduction='none')
    if valid is None:
        return loss.mean()
    v = valid.flatten()
    return ((loss * v).sum(1) / v.sum().clamp(min=1e-12)).mean()


def bce_cls_loss(pred_logits: torch.Tensor, assignment: Assignment, target_labels: torch.Tensor) -> torch.Tensor:
    """
    Sigmoid BCE over N × |C^t|: matched queries target onehot(c_j), unmatched
    queries target all zeros (there is no no-obj unit).
    """
    if pred_logits.ndim != 2:
        raise InputError(f"class logits must be N × C, got {tuple(pred_logits.shape)}")
    target = torch.zeros_like(pred_logits)
    for q, j in assignment.pairs:
        target[q, int(target_labels[j])] = 1.0
    return F.binary_cross_entropy_with_logits(pred_logits, target)


def _image_loss(class_logits: torch.Tensor, mask_logits: torch.Tensor, targets: StepTargets,
                weights: MatchWeights, assignment: Optional[Assignment]) -> Tuple[Dict[str, torch.Tensor], Assignment]:
    if assignment is None:
        assignment = hungarian(match_cost(class_logits, mask_logits, targets, weights), tie_break=False)
    loss_cls = bce_cls_loss(class_logits, assignment, targets.labels)
    q_idx = torch.tensor(assignment.query_indices, dtype=torch.long)
    t_idx = torch.tensor(assignment.target_indices, dtype=torch.long)
    pred = mask_logits[q_idx]
    gt = targets.masks[t_idx].to(mask_logits)
    valid = targets.valid.to(mask_logits)
    loss_bce = bce_mask_loss(pred, gt, valid)
    loss_dice = dice_loss(torch.sigmoid(pred), gt, valid)
    return {'cls': loss_cls, 'bce': loss_bce, 'dice': loss_dice}, assignment


def step_loss(output: StepOutput, targets: Sequence[StepTargets], weights: MatchWeights,
              assignments: Optional[Sequence[Assignment]] = None
              ) -> Tuple[torch.Tensor, Dict[str, float], List[Assignment]]:
    """
    Weighted loss of one batched StepOutput, averaged over images.

    Intermediate-layer predictions in ``output.aux`` get their own matching
    and the same weighted loss.
    """
    if output.class_logits.shape[0] != len(targets):
        raise InputError(f"{output.class_logits.shape[0]} outputs for {len(targets)} targets")
    total = output.class_logits.sum() * 0.0
    parts = {'cls': 0.0, 'bce': 0.0, 'dice': 0.0}
    used = []
    levels = [(output.class_logits, output.mask_logits)] + list(output.aux)
    for b, tgt in enumerate(targets):
        for level, (cls_logits, mask_logits) in enumerate(levels):
            given = assignments[b] if (assignments is not None and level == 0) else None
            losses, assignment = _image_loss(cls_logits[b], mask_logits[b], tgt, weights, given)
            total = total + (weights.w_cls * losses['cls'] + weights.w_bce * losses['bce']
                             + weights.w_dice * losses['dice']) / len(targets)
            if level == 0:
                used.append(assignment)
                for key in parts:
                    parts[key] += float(losses[key].detach()) / len(targets)
    return total, parts, used


# ─── Loss log ─────────────────────────────────────────────────────────────────

LOG_HEADER = ['iteration', 'step', 'loss', 'loss_cls', 'loss_bce', 'loss_dice', 'lr', 'config_hash', 'build_id']


class LossLog:
    """Per-iteration loss rows, appended to a CSV file when a path is given."""

    def __init__(self, path: Optional[str] = None, config_hash: str = ''):
        self.path = path
        self.config_hash = config_hash
        self.rows: List[dict] = []
        if path:
            os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)

    def append(self, iteration: int, step: int, loss: float, parts: Dict[str, float], lr: float):
        row = {
            'iteration': iteration, 'step': step, 'loss': f"{loss:.6f}",
            'loss_cls': f"{parts['cls']:.6f}", 'loss_bce': f"{parts['bce']:.6f}",
            'loss_dice': f"{parts['dice']:.6f}", 'lr': lr,
            'config_hash': self.config_hash, 'build_id': build_id(),
        }
        self.rows.append(row)
        if self.path:
            new = not os.path.exists(self.path)
            with open(self.path, 'a', newline='') as f:
                writer = csv.DictWriter(f, fieldnames=LOG_HEADER, lineterminator='\n')
                if new:
                    writer.writeheader()
                writer.writerow(row)

    def losses(self, step: Optional[int] = None) -> List[float]:
        return [float(r['loss']) for r in self.rows if step is None or r['step'] == step]


# ─── Optimization loop ────────────────────────────────────────────────────────

def _assert_frozen_untouched(state: ModelState):
    for p in state.frozen_parameters():
        if p.grad is not None and torch.count_nonzero(p.grad):
            raise StateError("gradient reached a frozen parameter")


@timed("train_task")
def train_task(state: ModelState, step_dataset: Sequence[PanopticSample], t: int, hyper: TrainHyper,
               weights: MatchWeights, log: Optional[LossLog] = None,
               loss_steps: Optional[Sequence[int]] = None) -> ModelState:
    """
    Optimize the trainable parameters on step t data.

    loss_steps lists the prompt sets whose outputs enter the loss (each
    against targets of its own classes); it defaults to [t]. The fine-tuning
    baseline passes every step so earlier sets see their classes as absent.
    """
    if not step_dataset:
        raise ProtocolError(f"step {t} has no training images")
    if state.num_steps != t:
        raise StateError(f"model holds {state.num_steps} steps, expected {t}")

    loss_steps = list(loss_steps or [t])
    n_iters = hyper.num_iters(len(state.step_classes(t)))
    lr = hyper.lr_first if t == 1 else hyper.lr_later
    params = state.trainable_parameters()
    if not params:
        raise StateError("no trainable parameters")
    log = log if log is not None else LossLog()
    logger.info(f"Training step {t}: {n_iters} iterations, lr={lr}, {len(step_dataset)} images, "
                f"{sum(p.numel() for p in params)} trainable parameters")
    if n_iters == 0:
        return state

    optimizer = torch.optim.AdamW(params, lr=lr, weight_decay=hyper.weight_decay)
    rng = np.random.default_rng([hyper.seed, t])
    res = state.cfg.mask_resolution
    cache: Dict[Tuple[int, int, bool], StepTargets] = {}

    def targets_for(index: int, k: int, flipped: bool) -> StepTargets:
        key = (index, k, flipped)
        if key not in cache:
            sample = hflip(step_dataset[index]) if flipped else step_dataset[index]
            cache[key] = build_targets(sample, state.step_classes(k), res, state.dtype)
        return cache[key]

    state.train()
    for it in range(1, n_iters + 1):
        indices = rng.integers(0, len(step_dataset), size=hyper.batch_size)
        flips = rng.random(hyper.batch_size) < 0.5 if hyper.hflip else np.zeros(hyper.batch_size, dtype=bool)
        batch = [hflip(step_dataset[i]) if f else step_dataset[i] for i, f in zip(indices, flips)]
        memory, pixel = state.encode([s.image for s in batch])

        loss = None
        parts_total = {'cls': 0.0, 'bce': 0.0, 'dice': 0.0}
        for k in loss_steps:
            output = state.decode(memory, pixel, k, with_aux=hyper.aux_loss)
            targets = [targets_for(int(i), k, bool(f)) for i, f in zip(indices, flips)]
            step_total, parts, _ = step_loss(output, targets, weights)
            loss = step_total if loss is None else loss + step_total
            for key in parts_total:
                parts_total[key] += parts[key]

        if not torch.isfinite(loss):
            raise NumericalError(f"non-finite loss at step {t}, iteration {it}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        _assert_frozen_untouched(state)
        torch.nn.utils.clip_grad_norm_(params, hyper.clip_norm)
        optimizer.step()

        log.append(it, t, float(loss.detach()), parts_total, lr)
        if it % hyper.log_every == 0 or it == n_iters:
            logger.debug(f"step {t} iter {it}/{n_iters} loss={float(loss):.4f} "
                         f"cls={parts_total['cls']:.4f} bce={parts_total['bce']:.4f} dice={parts_total['dice']:.4f}")
    state.eval()
    return state


# ─── Gradient check ───────────────────────────────────────────────────────────

def grad_check(state: ModelState, image, targets: StepTargets, t: int, epsilon: float = 1e-4,
               weights: MatchWeights = MatchWeights()) -> float:
    """
    Worst relative error between autograd and central differences over every
    trainable scalar. The matching is fixed from the unperturbed forward pass
    so the loss is smooth in the parameters. Needs a float64 model.
    """
    if state.dtype != torch.float64:
        raise InputError("grad_check needs a float64 model (state.double())")

    with torch.no_grad():
        out = state.forward_step(image, t)
        assignment = hungarian(match_cost(out.class_logits[0], out.mask_logits[0], targets, weights))

    def loss_value() -> torch.Tensor:
        return step_loss(state.forward_step(image, t), [targets], weights, [assignment])[0]

    params = state.trainable_parameters()
    for p in params:
        p.grad = None
    loss_value().backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]

    numeric = []
    with torch.no_grad():
        for p in params:
            grad = torch.zeros_like(p)
            flat, gflat = p.view(-1), grad.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + epsilon
                plus = loss_value().item()
                flat[i] = orig - epsilon
                minus = loss_value().item()
                flat[i] = orig
                gflat[i] = (plus - minus) / (2 * epsilon)
            numeric.append(grad)

    a = torch.cat([g.flatten() for g in analytic])
    n = torch.cat([g.flatten() for g in numeric])
    floor = 1e-3 * max(float(a.abs().max()), 1e-12)
    rel = (a - n).abs() / torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, floor))
    worst = float(rel.max())
    logger.info(f"grad_check over {a.numel()} scalars: max relative error {worst:.3e}")
    return worst
