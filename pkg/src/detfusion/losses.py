"""Bipartite matching and the set-based detection loss.

The matching cost combines a class term (negative matched-class probability
for cross-entropy models, a focal-style margin for focal models), an L1 box
term on (cx, cy, w, h), and a GIoU term on corner boxes. Classification is
supervised over every query (unmatched ones target the no-object class, or
all-zero sigmoid targets under focal); box terms cover matched pairs only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .detector import CROSS_ENTROPY, FOCAL, DetectionSet
from .tensor import (
    Tensor,
    absolute,
    add,
    bce_with_logits,
    clip,
    concat,
    log,
    log_softmax,
    maximum,
    minimum,
    mul,
    neg,
    power,
    sigmoid,
    softmax,
    stack,
    sub,
)


@dataclass
class CostWeights:
    class_weight: float = 1.0
    l1_weight: float = 5.0
    giou_weight: float = 2.0
    class_loss_kind: str = CROSS_ENTROPY
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    # relative weight of unmatched (no-object) rows in the cross-entropy term
    no_object_weight: float = 1.0

    def __post_init__(self):
        if self.class_weight < 0 or self.l1_weight < 0 or self.giou_weight < 0:
            raise ValueError("cost weights must be non-negative")
        if self.class_weight == 0 and self.l1_weight == 0 and self.giou_weight == 0:
            raise ValueError("at least one cost weight must be positive")
        if self.class_loss_kind not in (CROSS_ENTROPY, FOCAL):
            raise ValueError(f"unknown class loss kind {self.class_loss_kind!r}")
        if self.no_object_weight <= 0:
            raise ValueError("no_object_weight must be positive")


@dataclass
class MatchAssignment:
    pairs: list = field(default_factory=list)  # (gt_index, pred_index)
    total_cost: float = 0.0


def hungarian_match(cost) -> MatchAssignment:
    """Minimum-cost injective assignment of rows (ground truths) to columns
    (predictions) via shortest augmenting paths on the rectangular matrix.

    Columns are scanned in ascending index, so equal-cost alternatives
    resolve deterministically toward the lowest prediction index.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost matrix must be 2-d, got shape {cost.shape}")
    g, q = cost.shape
    if g > q:
        raise ValueError(f"more ground truths ({g}) than predictions ({q})")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    if g == 0:
        return MatchAssignment(pairs=[], total_cost=0.0)

    inf = np.inf
    u = np.zeros(g + 1)
    v = np.zeros(q + 1)
    match_col = np.zeros(q + 1, dtype=np.int64)  # column j -> row (1-based)
    way = np.zeros(q + 1, dtype=np.int64)
    for i in range(1, g + 1):
        match_col[0] = i
        j0 = 0
        minv = np.full(q + 1, inf)
        used = np.zeros(q + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match_col[j0]
            delta = inf
            j1 = -1
            for j in range(1, q + 1):
                if used[j]:
                    continue
                cur = cost[i0 - 1, j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(q + 1):
                if used[j]:
                    u[match_col[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match_col[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match_col[j0] = match_col[j1]
            j0 = j1

    pairs = sorted((int(match_col[j] - 1), int(j - 1)) for j in range(1, q + 1) if match_col[j])
    total = float(sum(cost[gi, qi] for gi, qi in pairs))
    return MatchAssignment(pairs=pairs, total_cost=total)


def box_cxcywh_to_corners(boxes):
    """(cx, cy, w, h) -> (x1, y1, x2, y2); exact arithmetic, tensor in/out."""
    cx, cy, w, h = boxes[:, 0], boxes[:, 1], boxes[:, 2], boxes[:, 3]
    return stack([cx - w * 0.5, cy - h * 0.5, cx + w * 0.5, cy + h * 0.5], axis=1)


def giou_pairwise(a, b):
    """Generalized IoU of row-aligned corner boxes; differentiable, in [-1, 1]."""
    ax1, ay1, ax2, ay2 = a[:, 0], a[:, 1], a[:, 2], a[:, 3]
    bx1, by1, bx2, by2 = b[:, 0], b[:, 1], b[:, 2], b[:, 3]
    area_a = (ax2 - ax1) * (ay2 - ay1)
    area_b = (bx2 - bx1) * (by2 - by1)
    iw = maximum(minimum(ax2, bx2) - maximum(ax1, bx1), 0.0)
    ih = maximum(minimum(ay2, by2) - maximum(ay1, by1), 0.0)
    inter = iw * ih
    union = sub(add(area_a, area_b), inter)
    iou = inter / union
    ew = maximum(ax2, bx2) - minimum(ax1, bx1)
    eh = maximum(ay2, by2) - minimum(ay1, by1)
    enclosure = ew * eh
    return sub(iou, (enclosure - union) / enclosure)


def giou(a, b) -> float:
    """Generalized IoU of two corner-form boxes (x1, y1, x2, y2)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for box in (a, b):
        if box[2] <= box[0] or box[3] <= box[1]:
            raise ValueError(f"degenerate box {box.tolist()}: needs positive width and height")
    return float(giou_pairwise(Tensor(a.reshape(1, 4)), Tensor(b.reshape(1, 4))).data[0])


def focal_loss(p, target, alpha=0.25, gamma=2.0):
    """Focal term on probabilities, clamped away from {0, 1} at 1e-12.

    Positive targets: -alpha * (1-p)^gamma * log(p); negative targets:
    -(1-alpha) * p^gamma * log(1-p). Tensor in -> tensor out; plain floats
    and arrays come back as numpy.
    """
    is_tensor = isinstance(p, Tensor) or isinstance(target, Tensor)
    p = p if isinstance(p, Tensor) else Tensor(p)
    t = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.float64))
    pc = clip(p, 1e-12, 1.0 - 1e-12)
    pos = mul(neg(mul(power(sub(1.0, pc), gamma), log(pc))), alpha)
    negterm = mul(neg(mul(power(pc, gamma), log(sub(1.0, pc)))), 1.0 - alpha)
    out = add(mul(pos, t), mul(negterm, sub(1.0, t)))
    return out if is_tensor else out.data


def _class_cost(class_logits, gt_classes, weights):
    """Per (gt, query) class cost on detached numpy values."""
    logits = class_logits.data
    if weights.class_loss_kind == CROSS_ENTROPY:
        z = logits - logits.max(axis=1, keepdims=True)
        probs = np.exp(z) / np.exp(z).sum(axis=1, keepdims=True)
        return -probs[:, gt_classes].T
    p = 1.0 / (1.0 + np.exp(-logits))
    p = np.clip(p, 1e-12, 1.0 - 1e-12)
    alpha, gamma = weights.focal_alpha, weights.focal_gamma
    pos = alpha * ((1.0 - p) ** gamma) * (-np.log(p))
    negc = (1.0 - alpha) * (p**gamma) * (-np.log(1.0 - p))
    return (pos - negc)[:, gt_classes].T


def detection_cost_matrix(pred: DetectionSet, gt_boxes, gt_classes, weights: CostWeights):
    """[G, Q] matching cost; computed on raw values, never differentiated."""
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64)
    gt_classes = np.asarray(gt_classes, dtype=np.int64)
    pb = pred.boxes.data
    l1 = np.abs(gt_boxes[:, None, :] - pb[None, :, :]).sum(axis=2)
    gcorners = _corners_np(gt_boxes)
    pcorners = _corners_np(pb)
    giou_gq = _giou_np(gcorners[:, None, :], pcorners[None, :, :])
    cost = weights.class_weight * _class_cost(pred.class_logits, gt_classes, weights)
    cost = cost + weights.l1_weight * l1 + weights.giou_weight * (1.0 - giou_gq)
    return cost


def _corners_np(boxes):
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=-1)


def _giou_np(a, b):
    area_a = (a[..., 2] - a[..., 0]) * (a[..., 3] - a[..., 1])
    area_b = (b[..., 2] - b[..., 0]) * (b[..., 3] - b[..., 1])
    iw = np.clip(np.minimum(a[..., 2], b[..., 2]) - np.maximum(a[..., 0], b[..., 0]), 0, None)
    ih = np.clip(np.minimum(a[..., 3], b[..., 3]) - np.maximum(a[..., 1], b[..., 1]), 0, None)
    inter = iw * ih
    union = area_a + area_b - inter
    ew = np.maximum(a[..., 2], b[..., 2]) - np.minimum(a[..., 0], b[..., 0])
    eh = np.maximum(a[..., 3], b[..., 3]) - np.minimum(a[..., 1], b[..., 1])
    enclosure = ew * eh
    return inter / union - (enclosure - union) / enclosure


def detection_loss(pred: DetectionSet, gt_boxes, gt_classes, weights: CostWeights):
    """Set loss: Hungarian-matched classification + box terms.

    Differentiable through everything except the discrete assignment, which
    is recomputed from detached values.
    """
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.asarray(gt_classes, dtype=np.int64).reshape(-1)
    q = pred.num_detections
    g = gt_boxes.shape[0]
    if g > q:
        raise ValueError(f"more ground truths ({g}) than queries ({q})")

    if g:
        assignment = hungarian_match(detection_cost_matrix(pred, gt_boxes, gt_classes, weights))
        gt_order = np.array([p[0] for p in assignment.pairs], dtype=np.int64)
        pred_order = np.array([p[1] for p in assignment.pairs], dtype=np.int64)
    else:
        assignment = MatchAssignment(pairs=[], total_cost=0.0)
        gt_order = np.zeros(0, dtype=np.int64)
        pred_order = np.zeros(0, dtype=np.int64)

    if weights.class_loss_kind == CROSS_ENTROPY:
        no_object = pred.class_logits.data.shape[1] - 1
        targets = np.full(q, no_object, dtype=np.int64)
        targets[pred_order] = gt_classes[gt_order]
        row_w = np.full(q, weights.no_object_weight)
        row_w[pred_order] = 1.0
        logp = log_softmax(pred.class_logits, axis=-1)
        class_loss = neg((logp[np.arange(q), targets] * row_w).sum() / float(row_w.sum()))
    else:
        target = np.zeros(pred.class_logits.data.shape)
        target[pred_order, gt_classes[gt_order]] = 1.0
        probs = sigmoid(pred.class_logits)
        class_loss = focal_loss(probs, Tensor(target), weights.focal_alpha, weights.focal_gamma).mean()

    total = mul(class_loss, weights.class_weight)
    if g:
        matched = pred.boxes[pred_order]
        gtm = Tensor(gt_boxes[gt_order])
        l1 = absolute(sub(matched, gtm)).sum() / float(g)
        giou_term = sub(1.0, giou_pairwise(box_cxcywh_to_corners(matched), box_cxcywh_to_corners(gtm))).sum() / float(g)
        total = add(total, add(mul(l1, weights.l1_weight), mul(giou_term, weights.giou_weight)))
    return total, assignment
