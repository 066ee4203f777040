"""Detection primitives: IoU, anchor matching, thresholded prediction and NMS."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError

POS_THRESHOLD = 0.5
NEG_THRESHOLD = 0.4
SCORE_THRESHOLD = 0.3
NMS_IOU = 0.5

NEGATIVE = -1
IGNORE = -2


@dataclass(frozen=True)
class BoundingBox:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise DomainError(f"degenerate box {self}")

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def as_tuple(self) -> tuple:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class Detection:
    box: BoundingBox
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 < self.score < 1.0:
            raise DomainError(f"score {self.score} outside (0, 1)")


def _coords(box) -> tuple:
    return box.as_tuple() if isinstance(box, BoundingBox) else tuple(box)


def iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = _coords(a)
    bx0, by0, bx1, by1 = _coords(b)
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union


def box_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.reshape(-1, 4).astype(np.float64)
    return np.array([_coords(b) for b in boxes], dtype=np.float64).reshape(-1, 4)


def iou_matrix(a, b) -> np.ndarray:
    """Pairwise IoU between two box arrays, shape ``(len(a), len(b))``."""
    a, b = box_array(a), box_array(b)
    ix0 = np.maximum(a[:, None, 0], b[None, :, 0])
    iy0 = np.maximum(a[:, None, 1], b[None, :, 1])
    ix1 = np.minimum(a[:, None, 2], b[None, :, 2])
    iy1 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(ix1 - ix0, 0, None) * np.clip(iy1 - iy0, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(inter > 0, inter / union, 0.0)
    return out


def match_anchors(anchors, gt: Sequence, pos_thr: float = POS_THRESHOLD,
                  neg_thr: float = NEG_THRESHOLD) -> np.ndarray:
    """Per-anchor label: gt class id if positive, NEGATIVE or IGNORE.

    ``gt`` is a sequence of ``(box, class_id)``.  An anchor is positive for the
    gt of highest IoU when that IoU >= pos_thr (ties go to the lowest gt
    index), negative when its best IoU < neg_thr, and ignored otherwise.
    """
    if not pos_thr > neg_thr:
        raise DomainError("pos_thr must exceed neg_thr")
    anchors = box_array(anchors)
    labels = np.full(len(anchors), NEGATIVE, dtype=np.int64)
    if len(gt) == 0:
        return labels
    gt_boxes = box_array([g[0] for g in gt])
    gt_cls = np.array([int(g[1]) for g in gt], dtype=np.int64)
    ious = iou_matrix(anchors, gt_boxes)
    best = ious.argmax(axis=1)  # argmax returns the first maximum
    best_iou = ious[np.arange(len(anchors)), best]
    labels[best_iou >= neg_thr] = IGNORE
    pos = best_iou >= pos_thr
    labels[pos] = gt_cls[best[pos]]
    return labels


def predict_arrays(scores: np.ndarray, anchor_boxes: np.ndarray, class_ids: Sequence[int],
                   score_threshold: float = SCORE_THRESHOLD):
    """Threshold an ``(A, C)`` score block into (boxes, class ids, scores) arrays."""
    a_idx, c_idx = np.nonzero(scores > score_threshold)
    class_ids = np.asarray(class_ids, dtype=np.int64)
    return anchor_boxes[a_idx], class_ids[c_idx], scores[a_idx, c_idx]


def predict(scene, model, semantics, score_threshold: float = SCORE_THRESHOLD,
            class_subset=None) -> list:
    """One Detection per (anchor, class) whose score exceeds ``score_threshold``.

    Detection boxes are the anchor boxes themselves.  ``class_subset`` limits
    scoring to some classes (default all); class ids refer to columns of
    ``semantics``.
    """
    from .semantics import resolve_selection

    idx = resolve_selection(semantics, class_subset)
    scores = model.scores(scene.anchor_features, semantics.vectors[:, idx])
    boxes, cls, sc = predict_arrays(scores, scene.anchor_boxes, idx, score_threshold)
    return [Detection(BoundingBox(*map(float, b)), int(c), float(s)) for b, c, s in zip(boxes, cls, sc)]


def _order(boxes: np.ndarray, classes: np.ndarray, scores: np.ndarray) -> np.ndarray:
    # score desc, then class id, then box coordinates
    keys = (boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], classes, -scores)
    return np.lexsort(keys)


def nms_arrays(boxes: np.ndarray, classes: np.ndarray, scores: np.ndarray,
               iou_thr: float = NMS_IOU) -> np.ndarray:
    """Indices kept by per-class greedy NMS, in output (score-descending) order."""
    boxes = box_array(boxes)
    classes = np.asarray(classes)
    scores = np.asarray(scores, dtype=np.float64)
    order = _order(boxes, classes, scores)
    keep = []
    for c in np.unique(classes):
        idx = order[classes[order] == c]
        ious = iou_matrix(boxes[idx], boxes[idx])
        alive = np.ones(len(idx), dtype=bool)
        for i in range(len(idx)):
            if not alive[i]:
                continue
            keep.append(idx[i])
            alive[i + 1:] &= ious[i, i + 1:] <= iou_thr
    keep = np.array(keep, dtype=np.int64)
    if keep.size == 0:
        return keep
    return keep[np.argsort(_rank(order)[keep], kind="stable")]


def _rank(order: np.ndarray) -> np.ndarray:
    rank = np.empty_like(order)
    rank[order] = np.arange(len(order))
    return rank


def nms(dets: Sequence[Detection], iou_thr: float = NMS_IOU) -> list:
    if not dets:
        return []
    boxes = np.array([d.box.as_tuple() for d in dets])
    classes = np.array([d.class_id for d in dets])
    scores = np.array([d.score for d in dets])
    return [dets[i] for i in nms_arrays(boxes, classes, scores, iou_thr)]


def write_detections_csv(path, rows) -> None:
    """rows: iterable of ``(scene_id, class, score, x_min, y_min, x_max, y_max)``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["scene_id", "class", "score", "x_min", "y_min", "x_max", "y_max"])
        for row in rows:
            sid, cls, sc, *box = row
            writer.writerow([sid, cls, repr(float(sc))] + [repr(float(v)) for v in box])
