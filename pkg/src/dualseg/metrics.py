"""COCO-style mask AP (101-point interpolation, IoU 0.50:0.05:0.95)."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from dualseg import kernels
from dualseg.structures import InstanceAnnotation

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


class EvaluationError(ValueError):
    pass


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    """|a & b| / |a | b|; two empty masks give 0."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 0.0
    return float(np.logical_and(a, b).sum() / union)


def box_iou_np(a: np.ndarray, b: np.ndarray) -> np.ndarray:
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


def iou_matrix(preds: list[InstanceAnnotation], gts: list[InstanceAnnotation], iou_type: str = "segm") -> np.ndarray:
    if not preds or not gts:
        return np.zeros((len(preds), len(gts)))
    if iou_type == "bbox":
        return box_iou_np([p.box for p in preds], [g.box for g in gts])
    return kernels.mask_iou_matrix(np.stack([p.mask for p in preds]), np.stack([g.mask for g in gts]))


def greedy_match(ious: np.ndarray, thresh: float) -> np.ndarray:
    """True positives for score-ordered predictions (rows).

    Each prediction takes the unmatched GT with the highest IoU >= thresh;
    equal IoUs go to the lower GT index.
    """
    n_pred, n_gt = ious.shape
    taken = np.zeros(n_gt, dtype=bool)
    tp = np.zeros(n_pred, dtype=bool)
    for i in range(n_pred):
        best, best_j = -1.0, -1
        for j in range(n_gt):
            if taken[j] or ious[i, j] < thresh:
                continue
            if ious[i, j] > best:
                best, best_j = ious[i, j], j
        if best_j >= 0:
            taken[best_j] = True
            tp[i] = True
    return tp


def interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from score-ordered TP flags."""
    if n_gt == 0 or tp.size == 0:
        return 0.0
    tp_c = np.cumsum(tp, dtype=np.float64)
    fp_c = np.cumsum(~tp, dtype=np.float64)
    recall = tp_c / n_gt
    precision = tp_c / (tp_c + fp_c)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(q.mean())


def _sort_by_score(preds):
    scores = np.array([p.score for p in preds], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    return [preds[i] for i in order]


def _group(items, key):
    out: dict = {}
    for it in items:
        out.setdefault(key(it), []).append(it)
    return out


def _tp_flags(preds, gts, thresholds, iou_type):
    """Score-sorted predictions pooled over images, with per-threshold TP flags."""
    by_img_p = _group(preds, lambda p: p.image_id)
    by_img_g = _group(gts, lambda g: g.image_id)
    pooled_scores = []
    pooled_tp = [[] for _ in thresholds]
    for img in sorted(by_img_p, key=lambda v: (v is None, v)):
        ps = _sort_by_score(by_img_p[img])
        gs = by_img_g.get(img, [])
        ious = iou_matrix(ps, gs, iou_type)
        pooled_scores.extend(p.score for p in ps)
        for t, thr in enumerate(thresholds):
            pooled_tp[t].append(greedy_match(ious, thr))
    order = np.argsort(-np.asarray(pooled_scores, dtype=np.float64), kind="stable")
    return [np.concatenate(f)[order] if f else np.zeros(0, bool) for f in pooled_tp]


def average_precision(preds: list[InstanceAnnotation], gts: list[InstanceAnnotation], iou_thresh: float = 0.5, iou_type: str = "segm") -> float:
    """AP at one IoU threshold. Instances are grouped by ``image_id``.

    With no ground truth the AP is undefined and 0.0 is returned; :func:`evaluate`
    excludes such classes.
    """
    if not gts:
        return 0.0
    return interpolated_ap(_tp_flags(preds, gts, [iou_thresh], iou_type)[0], len(gts))


@dataclass
class EvalReport:
    mAP: float
    AP50: float
    AP75: float
    per_class: dict = field(default_factory=dict)
    n_images: int = 0
    n_gt: int = 0
    n_pred: int = 0
    class_agnostic: bool = False
    iou_type: str = "segm"

    def to_json(self) -> str:
        d = asdict(self)
        d["per_class"] = {str(k): v for k, v in self.per_class.items()}
        return json.dumps(d, indent=2, sort_keys=True)

    def table(self) -> str:
        mode = "Class-Agnostic" if self.class_agnostic else "Multi-class"
        lines = [
            f"{mode} ({self.iou_type}) | images={self.n_images} gt={self.n_gt} pred={self.n_pred}",
            f"{'class':>10} | {'mAP':>6} {'AP50':>6} {'AP75':>6}",
            "-" * 36,
        ]
        for cls, (m, a50, a75) in sorted(self.per_class.items()):
            lines.append(f"{cls:>10} | {100 * m:6.1f} {100 * a50:6.1f} {100 * a75:6.1f}")
        lines.append("-" * 36)
        lines.append(f"{'all':>10} | {100 * self.mAP:6.1f} {100 * self.AP50:6.1f} {100 * self.AP75:6.1f}")
        return "\n".join(lines)


def evaluate(
    pred_set: dict[int, list[InstanceAnnotation]],
    gt_set: dict[int, list[InstanceAnnotation]],
    class_agnostic: bool = False,
    iou_type: str = "segm",
) -> EvalReport:
    """Per-class AP at ten IoU thresholds; averaged over classes, then thresholds."""
    orphans = sorted(set(pred_set) - set(gt_set))
    if orphans:
        raise EvaluationError(f"predictions reference image ids absent from ground truth: {orphans}")

    def flatten(d):
        out = []
        for img in sorted(d):
            for a in d[img]:
                cat = 1 if class_agnostic else a.category_id
                out.append(InstanceAnnotation(mask=a.mask, box=a.box, category_id=cat, score=a.score, image_id=img))
        return out

    preds, gts = flatten(pred_set), flatten(gt_set)
    classes = sorted({g.category_id for g in gts})
    per_class = {}
    table = np.zeros((len(classes), len(IOU_THRESHOLDS)))
    for c_i, cls in enumerate(classes):
        cp = [p for p in preds if p.category_id == cls]
        cg = [g for g in gts if g.category_id == cls]
        flags = _tp_flags(cp, cg, IOU_THRESHOLDS, iou_type)
        for t in range(len(IOU_THRESHOLDS)):
            table[c_i, t] = interpolated_ap(flags[t], len(cg))
        per_class[int(cls)] = (float(table[c_i].mean()), float(table[c_i, 0]), float(table[c_i, 5]))
    if classes:
        per_thr = table.mean(axis=0)
        m, a50, a75 = float(per_thr.mean()), float(per_thr[0]), float(per_thr[5])
    else:
        m = a50 = a75 = 0.0
    return EvalReport(
        mAP=m,
        AP50=a50,
        AP75=a75,
        per_class=per_class,
        n_images=len(gt_set),
        n_gt=len(gts),
        n_pred=len(preds),
        class_agnostic=class_agnostic,
        iou_type=iou_type,
    )
