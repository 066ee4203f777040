"""Detection metrics and the six evaluation modes (ZSD/FSD/ASD and generalized)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .detector import (NMS_IOU, SCORE_THRESHOLD, BoundingBox, box_array, iou_matrix, nms_arrays,
                       predict_arrays)
from .errors import ModeMismatch
from .semantics import FEW_SHOT, SEEN, UNSEEN, SemanticMatrix

MODES = ("ZSD", "FSD", "ASD", "GZSD", "GFSD", "GASD")
_REQUIRED = {
    "ZSD": (UNSEEN,), "GZSD": (UNSEEN,),
    "FSD": (FEW_SHOT,), "GFSD": (FEW_SHOT,),
    "ASD": (FEW_SHOT, UNSEEN), "GASD": (FEW_SHOT, UNSEEN),
}
# groups whose mAPs enter the harmonic mean, in report order
_HM_GROUPS = {
    "ZSD": (UNSEEN,), "FSD": (FEW_SHOT,), "ASD": (UNSEEN, FEW_SHOT),
    "GZSD": (SEEN, UNSEEN), "GFSD": (SEEN, FEW_SHOT), "GASD": (SEEN, UNSEEN, FEW_SHOT),
}


@dataclass(frozen=True)
class Thresholds:
    score_threshold: float = SCORE_THRESHOLD
    nms_iou: float = NMS_IOU
    iou_threshold: float = 0.5
    top_k: int = 100


def _det_order(scene_keys, scores, boxes) -> np.ndarray:
    boxes = box_array(boxes)
    keys = [boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], np.asarray(scene_keys), -np.asarray(scores)]
    return np.lexsort(keys)


def _greedy_tp(scene_keys, scores, boxes, gt_by_scene: dict, iou_thr: float) -> np.ndarray:
    """TP flags of detections in descending-score order.

    Each detection claims the unmatched gt box in its scene with the highest
    IoU, provided that IoU >= iou_thr.
    """
    order = _det_order(scene_keys, scores, boxes)
    boxes = box_array(boxes)
    matched = {k: np.zeros(len(v), dtype=bool) for k, v in gt_by_scene.items()}
    gt_arrays = {k: box_array(v) for k, v in gt_by_scene.items()}
    tp = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        key = scene_keys[i]
        gts = gt_arrays.get(key)
        if gts is None or len(gts) == 0:
            continue
        ious = iou_matrix(boxes[i:i + 1], gts)[0]
        ious[matched[key]] = -1.0
        j = int(np.argmax(ious))
        if ious[j] >= iou_thr:
            matched[key][j] = True
            tp[rank] = True
    return tp


def ap_from_tp(tp: np.ndarray, n_gt: int) -> float:
    """All-points interpolated area under the precision/recall curve."""
    if n_gt == 0 or len(tp) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _split_keyed(items, default_key=0):
    keys, vals = [], []
    for it in items:
        if isinstance(it, tuple) and len(it) == 2 and not isinstance(it[0], (float, np.floating)):
            keys.append(it[0])
            vals.append(it[1])
        else:
            keys.append(default_key)
            vals.append(it)
    return keys, vals


def average_precision(dets: Sequence, gt: Sequence, iou_thr: float = 0.5) -> float:
    """AP of one class.

    ``dets`` holds Detection objects, optionally as ``(scene_key, Detection)``
    pairs; ``gt`` holds boxes, optionally as ``(scene_key, box)`` pairs.
    Unkeyed items all belong to one scene.  Returns 0.0 with no gt boxes.
    """
    det_keys, det_vals = _split_keyed(dets)
    gt_keys, gt_vals = _split_keyed(gt)
    if not det_vals or not gt_vals:
        return 0.0
    # sorted string codes keep tie-breaking independent of input order
    names = sorted({str(k) for k in det_keys} | {str(k) for k in gt_keys})
    code = {n: i for i, n in enumerate(names)}
    gt_by_scene: dict = {}
    for k, b in zip(gt_keys, gt_vals):
        gt_by_scene.setdefault(code[str(k)], []).append(b.as_tuple() if isinstance(b, BoundingBox) else tuple(b))
    keys = np.array([code[str(k)] for k in det_keys])
    scores = np.array([d.score for d in det_vals])
    boxes = np.array([d.box.as_tuple() for d in det_vals])
    tp = _greedy_tp(keys, scores, boxes, gt_by_scene, iou_thr)
    return ap_from_tp(tp, len(gt_vals))


def recall_at_k(dets_by_scene: dict, gt_by_scene: dict, k: int = 100, iou_thr: float = 0.5) -> float:
    """Fraction of gt boxes recovered by each scene's top-``k`` detections.

    dets_by_scene maps scene -> list of Detection; gt_by_scene maps scene ->
    list of ``(box, class_id)``.  Matching is greedy by score, same class,
    one detection per gt.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    total = sum(len(v) for v in gt_by_scene.values())
    if total == 0:
        return 0.0
    hit = 0
    for key, gts in gt_by_scene.items():
        dets = list(dets_by_scene.get(key, ()))
        if not dets or not gts:
            continue
        boxes = np.array([d.box.as_tuple() for d in dets])
        scores = np.array([d.score for d in dets])
        classes = np.array([d.class_id for d in dets])
        hit += _scene_hits(boxes, classes, scores, gts, k, iou_thr)
    return hit / total


def _scene_hits(boxes, classes, scores, gts, k, iou_thr) -> int:
    order = np.lexsort((boxes[:, 3], boxes[:, 2], boxes[:, 1], boxes[:, 0], classes, -scores))[:k]
    gt_boxes = box_array([g[0] for g in gts])
    gt_cls = np.array([int(g[1]) for g in gts])
    ious = iou_matrix(boxes[order], gt_boxes)
    matched = np.zeros(len(gts), dtype=bool)
    for r, i in enumerate(order):
        cand = np.where((gt_cls == classes[i]) & ~matched, ious[r], -1.0)
        j = int(np.argmax(cand))
        if cand[j] >= iou_thr:
            matched[j] = True
    return int(matched.sum())


def harmonic_mean(values: Sequence[float]) -> float:
    values = [float(v) for v in values]
    if not values:
        raise ValueError("harmonic mean of an empty list")
    if any(v < 0 for v in values):
        raise ValueError("harmonic mean needs non-negative values")
    if any(v == 0 for v in values):
        return 0.0
    return len(values) / sum(1.0 / v for v in values)


@dataclass
class EvalReport:
    mode: str
    iou_threshold: float
    per_class_ap: dict = field(default_factory=dict)
    map_seen: float | None = None
    map_few: float | None = None
    map_unseen: float | None = None
    hm: float = 0.0
    recall_at_100: float = 0.0
    class_groups: dict = field(default_factory=dict, repr=False)

    @property
    def map_novel(self) -> float | None:
        """Mean AP over every evaluated novel class."""
        novel = [ap for name, ap in self.per_class_ap.items() if self.class_groups.get(name) in (FEW_SHOT, UNSEEN)]
        return float(np.mean(novel)) if novel else None

    def summary(self) -> dict:
        """Metrics as percentages rounded to two decimals."""
        def pct(x):
            return None if x is None else round(100.0 * x, 2)

        return {
            "mode": self.mode,
            "iou_threshold": self.iou_threshold,
            "map_seen": pct(self.map_seen),
            "map_few": pct(self.map_few),
            "map_unseen": pct(self.map_unseen),
            "hm": pct(self.hm),
            "recall_at_100": pct(self.recall_at_100),
            "per_class_ap": {k: pct(v) for k, v in self.per_class_ap.items()},
        }

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2, sort_keys=True) + "\n"

    CSV_FIELDS = ("mode", "map_seen", "map_few", "map_unseen", "hm", "recall_at_100")

    def to_csv(self) -> str:
        s = self.summary()
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.CSV_FIELDS)
        writer.writerow(["" if s[f] is None else s[f] for f in self.CSV_FIELDS])
        return buf.getvalue()


def check_mode(semantics: SemanticMatrix, mode: str) -> None:
    if mode not in MODES:
        raise ModeMismatch(f"unknown mode {mode!r}")
    counts = {FEW_SHOT: semantics.F, UNSEEN: semantics.U}
    missing = [g for g in _REQUIRED[mode] if counts[g] == 0]
    if missing:
        raise ModeMismatch(f"{mode} needs {', '.join(missing)} classes but the split has none")


def mode_classes(semantics: SemanticMatrix, mode: str) -> np.ndarray:
    """Indices of the classes a mode scores: all of them for generalized modes."""
    check_mode(semantics, mode)
    if mode.startswith("G"):
        return np.arange(semantics.T)
    return semantics.indices(*_REQUIRED[mode])


def scene_detections(scene, model, semantics: SemanticMatrix, class_idx: np.ndarray, th: Thresholds):
    """Thresholded, NMS-filtered detections of one scene as arrays."""
    scores = model.scores(scene.anchor_features, semantics.vectors[:, class_idx])
    boxes, cls, sc = predict_arrays(scores, scene.anchor_boxes, class_idx, th.score_threshold)
    if len(sc):
        keep = nms_arrays(boxes, cls, sc, th.nms_iou)
        boxes, cls, sc = boxes[keep], cls[keep], sc[keep]
    return boxes, cls, sc


def evaluate(model, scenes: Sequence, semantics: SemanticMatrix, mode: str,
             thresholds: Thresholds | None = None) -> EvalReport:
    """Score ``scenes`` under ``mode`` and compute grouped mAPs, HM and recall@K.

    Non-generalized modes score only the mode's novel classes and use the
    scenes containing at least one such object; generalized modes score all
    classes on every scene.
    """
    th = thresholds or Thresholds()
    class_idx = mode_classes(semantics, mode)
    generalized = mode.startswith("G")
    wanted = set(class_idx.tolist())
    if not generalized:
        scenes = [sc for sc in scenes if sc.classes_present() & wanted]

    det = {c: ([], [], []) for c in class_idx.tolist()}
    gt = {c: {} for c in class_idx.tolist()}
    dets_by_scene, gts_by_scene = {}, {}
    for si, sc in enumerate(scenes):
        boxes, cls, sc_scores = scene_detections(sc, model, semantics, class_idx, th)
        for b, c, s in zip(boxes, cls, sc_scores):
            keys, ss, bs = det[int(c)]
            keys.append(si)
            ss.append(s)
            bs.append(b)
        scene_gt = [(b, c) for b, c in sc.boxes if c in wanted]
        for b, c in scene_gt:
            gt[c].setdefault(si, []).append(b.as_tuple())
        gts_by_scene[si] = scene_gt
        dets_by_scene[si] = (boxes, cls, sc_scores)

    report = EvalReport(mode, th.iou_threshold)
    groups = {}
    for c in class_idx.tolist():
        n_gt = sum(len(v) for v in gt[c].values())
        if n_gt == 0:
            continue
        keys, ss, bs = det[c]
        if ss:
            tp = _greedy_tp(np.array(keys), np.array(ss), np.array(bs), gt[c], th.iou_threshold)
        else:
            tp = np.zeros(0, dtype=bool)
        name = semantics.class_names[c]
        report.per_class_ap[name] = ap_from_tp(tp, n_gt)
        groups[name] = semantics.partition[c]
    report.class_groups = groups

    def group_map(g):
        vals = [ap for name, ap in report.per_class_ap.items() if groups[name] == g]
        return float(np.mean(vals)) if vals else None

    reported = _HM_GROUPS[mode]
    if SEEN in reported:
        report.map_seen = group_map(SEEN)
    if FEW_SHOT in reported:
        report.map_few = group_map(FEW_SHOT)
    if UNSEEN in reported:
        report.map_unseen = group_map(UNSEEN)
    hm_vals = [group_map(g) for g in reported]
    report.hm = harmonic_mean([v or 0.0 for v in hm_vals])

    total = sum(len(v) for v in gts_by_scene.values())
    hits = 0
    for si, gts in gts_by_scene.items():
        boxes, cls, sc_scores = dets_by_scene[si]
        if gts and len(sc_scores):
            hits += _scene_hits(box_array(boxes), cls, sc_scores, gts, th.top_k, th.iou_threshold)
    report.recall_at_100 = hits / total if total else 0.0
    return report


def write_report(report: EvalReport, json_path, csv_path) -> None:
    with open(json_path, "w") as fh:
        fh.write(report.to_json())
    with open(csv_path, "w") as fh:
        fh.write(report.to_csv())
