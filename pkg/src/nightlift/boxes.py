"""Axis-aligned boxes, IoU, NMS and the mAP@IoU evaluator."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError


@dataclass
class BoxSet:
    """Boxes ``(n, 4)`` as ``x1, y1, x2, y2`` pixels, integer classes, optional scores."""

    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 4)))
    classes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    scores: np.ndarray | None = None

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        n = len(self.boxes)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)
        if self.classes.size == 0 and n:
            self.classes = np.zeros(n, dtype=np.int64)
        if self.scores is not None:
            self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
            if len(self.scores) != n:
                raise ValueError("scores not aligned with boxes")
        if len(self.classes) != n:
            raise ValueError("classes not aligned with boxes")
        if n and not ((self.boxes[:, 0] < self.boxes[:, 2]).all() and (self.boxes[:, 1] < self.boxes[:, 3]).all()):
            raise ValueError("every box needs x1 < x2 and y1 < y2")
        if (self.classes < 0).any():
            raise ValueError("classes must be non-negative")

    def __len__(self):
        return len(self.boxes)

    @classmethod
    def from_rows(cls, rows, scores=None) -> "BoxSet":
        """From ``[[x1, y1, x2, y2, class], ...]`` (manifest layout)."""
        arr = np.asarray(rows, dtype=np.float64).reshape(-1, 5)
        return cls(arr[:, :4], arr[:, 4].astype(np.int64), scores)

    def to_rows(self) -> list:
        return [[*map(float, b), int(c)] for b, c in zip(self.boxes, self.classes)]

    def select(self, mask) -> "BoxSet":
        return BoxSet(self.boxes[mask], self.classes[mask],
                      None if self.scores is None else self.scores[mask])


@dataclass
class EvalConfig:
    iou_threshold: float = 0.5
    score_threshold: float = 0.05
    eleven_point: bool = False

    def __post_init__(self):
        if not 0 < self.iou_threshold < 1:
            raise ConfigError(f"iou_threshold must lie in (0, 1), got {self.iou_threshold}")


def iou(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    for box in (a, b):
        if not (box[0] < box[2] and box[1] < box[3]):
            raise ValueError(f"degenerate box {box.tolist()}")
    return float(iou_matrix(a[None], b[None])[0, 0])


def iou_matrix(a, b) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def nms(boxes, scores, threshold=0.5) -> np.ndarray:
    """Indices kept by greedy non-maximum suppression, best score first."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    order = np.argsort(-np.asarray(scores), kind="stable")
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        overlaps = iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][overlaps <= threshold]
    return np.asarray(keep, dtype=np.int64)


def _integrate(recall, precision, eleven_point):
    if eleven_point:
        return float(np.mean([precision[recall >= t].max() if (recall >= t).any() else 0.0
                              for t in np.linspace(0, 1, 11)]))
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def class_pr_curve(preds, gts, cls, iou_threshold=0.5):
    """Greedy score-ordered matching for one class across images.

    Returns ``(recall, precision, n_gt)`` arrays ordered by descending score.
    Each prediction takes the unmatched ground-truth box it overlaps most;
    it is a true positive when that overlap reaches ``iou_threshold``.
    """
    records = []
    n_gt = 0
    gt_boxes = []
    for img, (p, g) in enumerate(zip(preds, gts)):
        gmask = g.classes == cls
        gt_boxes.append(g.boxes[gmask])
        n_gt += int(gmask.sum())
        pmask = p.classes == cls
        scores = p.scores if p.scores is not None else np.ones(len(p))
        for box, score in zip(p.boxes[pmask], scores[pmask]):
            records.append((-score, img, box))
    records.sort(key=lambda r: r[0])
    used = [np.zeros(len(b), dtype=bool) for b in gt_boxes]
    tp = np.zeros(len(records))
    for n, (_, img, box) in enumerate(records):
        gb = gt_boxes[img]
        if not len(gb):
            continue
        overlaps = iou_matrix(box[None], gb)[0]
        overlaps[used[img]] = -1.0
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_threshold:
            used[img][best] = True
            tp[n] = 1
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / max(n_gt, 1)
    precision = ctp / np.maximum(ctp + cfp, np.finfo(float).eps)
    return recall, precision, n_gt


def evaluate(preds, gts, cfg: EvalConfig | None = None) -> dict:
    """Per-class AP and mAP over aligned per-image prediction/ground-truth lists."""
    cfg = cfg or EvalConfig()
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction sets for {len(gts)} images")
    classes = sorted({int(c) for s in list(preds) + list(gts) for c in s.classes})
    per_class = {}
    curves = {}
    for cls in classes:
        recall, precision, n_gt = class_pr_curve(preds, gts, cls, cfg.iou_threshold)
        if n_gt == 0:
            ap = 1.0 if len(recall) == 0 else 0.0
        elif len(recall) == 0:
            ap = 0.0
        else:
            ap = _integrate(recall, precision, cfg.eleven_point)
        per_class[cls] = ap
        curves[cls] = (recall, precision)
    m = float(np.mean(list(per_class.values()))) if per_class else 1.0
    return {"mAP": m, "per_class": per_class, "curves": curves}


def average_precision(preds, gts, cfg: EvalConfig | None = None) -> float:
    """mAP at ``cfg.iou_threshold`` (all-points interpolation by default)."""
    return evaluate(preds, gts, cfg)["mAP"]
