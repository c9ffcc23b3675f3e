"""Set-prediction matching and the detection training loss.

Boxes are ``(cx, cy, w, h)`` in normalised image coordinates throughout.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CapacityError, InvalidBoxError
from .tensor import Tensor, as_tensor, clamp, log, maximum, minimum, tabs, tsum


@dataclass(frozen=True)
class LossWeights:
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0
    background: float = 0.1
    log_match_cost: bool = False  # use -log p instead of -p in the matching cost


@dataclass(frozen=True)
class Assignment:
    """(proposal, ground-truth) pairs; proposals not listed are background."""

    pairs: tuple[tuple[int, int], ...]

    def proposal_for(self) -> dict[int, int]:
        return {g: p for p, g in self.pairs}

    @property
    def proposals(self) -> list[int]:
        return [p for p, _ in self.pairs]


@dataclass
class BoxLossTerms:
    l1: Tensor
    giou: Tensor


# assignment solver ------------------------------------------------------------


def solve_assignment(cost: np.ndarray) -> list[int]:
    """Minimum-cost injection of rows into columns (rows <= columns).

    Shortest augmenting paths with row/column potentials, O(n^2 m). Returns
    the column assigned to each row. Among equal-cost moves the lowest
    column index wins, which keeps the result deterministic.
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n == 0:
        return []
    if n > m:
        raise CapacityError(f"{n} targets cannot be matched to {m} proposals")
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # 1-based row matched to column j; 0 = free
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, INF)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], INF)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    result = [0] * n
    for j in range(1, m + 1):
        if owner[j]:
            result[owner[j] - 1] = j - 1
    return result


# boxes ------------------------------------------------------------------------


def _check_boxes(boxes: np.ndarray) -> None:
    if boxes.size and (boxes[..., 2:] <= 0).any():
        raise InvalidBoxError("box width and height must be positive")


def box_to_corners(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    half = b[..., 2:] / 2
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def pairwise_giou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """GIoU between every box of ``a`` (n, 4) and ``b`` (m, 4)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    _check_boxes(a)
    _check_boxes(b)
    ca, cb = box_to_corners(a)[:, None], box_to_corners(b)[None]
    lt = np.maximum(ca[..., :2], cb[..., :2])
    rb = np.minimum(ca[..., 2:], cb[..., 2:])
    inter = np.clip(rb - lt, 0, None).prod(-1)
    union = a[:, None, 2] * a[:, None, 3] + b[None, :, 2] * b[None, :, 3] - inter
    elt = np.minimum(ca[..., :2], cb[..., :2])
    erb = np.maximum(ca[..., 2:], cb[..., 2:])
    enclose = (erb - elt).prod(-1)
    return inter / union - (enclose - union) / enclose


def _giou_terms(pred: Tensor, target: np.ndarray) -> Tensor:
    """1 - GIoU for matched rows of (n, 4) predictions and targets."""
    ph, th = pred[:, 2:] * 0.5, target[:, 2:] * 0.5
    p_lo, p_hi = pred[:, :2] - ph, pred[:, :2] + ph
    t_lo, t_hi = target[:, :2] - th, target[:, :2] + th
    wh = clamp(minimum(p_hi, t_hi) - maximum(p_lo, t_lo), lo=0.0)
    inter = wh[:, 0] * wh[:, 1]
    union = pred[:, 2] * pred[:, 3] + target[:, 2] * target[:, 3] - inter
    ewh = maximum(p_hi, t_hi) - minimum(p_lo, t_lo)
    enclose = ewh[:, 0] * ewh[:, 1]
    giou = inter / union - (enclose - union) / enclose
    return 1.0 - giou


def box_loss(pred, target) -> BoxLossTerms:
    """L1 distance and 1 - GIoU; works on single boxes or (n, 4) rows."""
    pred = as_tensor(pred)
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    _check_boxes(pred.data)
    _check_boxes(target)
    single = pred.ndim == 1
    p = pred.reshape(1, 4) if single else pred
    t = target.reshape(1, 4) if single else target
    l1 = tsum(tabs(p - t), axis=-1)
    giou = _giou_terms(p, t)
    if single:
        return BoxLossTerms(l1.reshape(()), giou.reshape(()))
    return BoxLossTerms(l1, giou)


# matching ---------------------------------------------------------------------


def match_cost(
    probs: np.ndarray, boxes: np.ndarray, gt_classes: Sequence[int], gt_boxes: np.ndarray, weights: LossWeights
) -> np.ndarray:
    """(n_gt, P) matching cost: class term plus weighted box terms."""
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    p = probs[:, gt_classes].T  # (n_gt, P)
    cls = -np.log(np.maximum(p, 1e-12)) if weights.log_match_cost else -p
    l1 = np.abs(gt_boxes[:, None, :] - boxes[None, :, :]).sum(-1)
    giou = 1.0 - pairwise_giou(gt_boxes, boxes)
    return weights.cls * cls + weights.l1 * l1 + weights.giou * giou


def hungarian_match(
    probs: np.ndarray,
    boxes: np.ndarray,
    gt_classes: Sequence[int],
    gt_boxes,
    weights: LossWeights = LossWeights(),
) -> Assignment:
    """Optimal injection of ground-truth objects into the P proposals.

    ``probs`` is (P, C+1) class probabilities and ``boxes`` (P, 4).
    """
    probs = np.asarray(probs.data if isinstance(probs, Tensor) else probs)
    boxes = np.asarray(boxes.data if isinstance(boxes, Tensor) else boxes)
    n = len(gt_classes)
    if n == 0:
        return Assignment(())
    if n > probs.shape[0]:
        raise CapacityError(f"{n} ground-truth objects but only {probs.shape[0]} proposals")
    cost = match_cost(probs, boxes, gt_classes, np.asarray(gt_boxes), weights)
    cols = solve_assignment(cost)
    return Assignment(tuple(sorted((c, g) for g, c in enumerate(cols))))


# losses -----------------------------------------------------------------------


@dataclass
class LossDiagnostics:
    clamped_logs: int = 0


def batched_detr_loss(
    probs: Tensor,
    boxes: Tensor,
    targets: Sequence[tuple[Sequence[int], np.ndarray]],
    assignments: Sequence[Assignment],
    weights: LossWeights = LossWeights(),
    diagnostics: LossDiagnostics | None = None,
) -> Tensor:
    """Sum over images of the per-image detection loss.

    probs (B, P, C+1), boxes (B, P, 4); ``targets[b]`` is (classes, boxes).
    """
    B, P, C1 = probs.shape
    background = C1 - 1
    cls_target = np.full((B, P), background, dtype=np.int64)
    cls_weight = np.full((B, P), weights.background)
    mb, mp, gt_rows = [], [], []
    for b, ((classes, gt_boxes), asg) in enumerate(zip(targets, assignments)):
        gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        for p, g in asg.pairs:
            cls_target[b, p] = classes[g]
            cls_weight[b, p] = weights.cls
            mb.append(b)
            mp.append(p)
            gt_rows.append(gt_boxes[g])
    bi = np.repeat(np.arange(B), P)
    pi = np.tile(np.arange(P), B)
    picked = probs[bi, pi, cls_target.ravel()]
    if diagnostics is not None:
        diagnostics.clamped_logs += int((picked.data < 1e-12).sum())
    loss = -tsum(log(clamp(picked, 1e-12)) * cls_weight.ravel())
    if mb:
        terms = box_loss(boxes[np.array(mb), np.array(mp)], np.stack(gt_rows))
        loss = loss + weights.l1 * tsum(terms.l1) + weights.giou * tsum(terms.giou)
    return loss


def detr_loss(
    probs: Tensor,
    boxes: Tensor,
    gt_classes: Sequence[int],
    gt_boxes,
    assignment: Assignment,
    weights: LossWeights = LossWeights(),
    diagnostics: LossDiagnostics | None = None,
) -> Tensor:
    """Detection loss of one image: probs (P, C+1), boxes (P, 4)."""
    probs, boxes = as_tensor(probs), as_tensor(boxes)
    P = probs.shape[0]
    return batched_detr_loss(
        probs.reshape(1, P, probs.shape[1]),
        boxes.reshape(1, P, 4),
        [(list(gt_classes), np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4))],
        [assignment],
        weights,
        diagnostics,
    )


def total_loss(detr, lq, lambda_q: float):
    if lambda_q < 0:
        raise ValueError("lambda_q must be non-negative")
    return detr + lambda_q * lq
