"""Panoptic quality (PQ, SQ, RQ) and mean IoU.

A prediction segment and a ground-truth segment of the same class match iff
their IoU is strictly above 0.5; at that threshold a segment can overlap at
most one counterpart that much, so the matching is unique without any
assignment search.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from pisr_lab.fusion import PanopticLabelMap

MATCH_IOU = 0.5
ORACLE_MAX_SEGMENTS = 8


@dataclass
class Segment:
    cls: int
    inst: int
    mask: np.ndarray

    @property
    def area(self) -> int:
        return int(self.mask.sum())


@dataclass
class ClassStats:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    iou_sum: float = 0.0

    @property
    def present(self) -> bool:
        return self.tp + self.fp + self.fn > 0

    @property
    def pq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.iou_sum / denom if denom > 0 else 0.0

    @property
    def sq(self) -> float:
        return self.iou_sum / self.tp if self.tp > 0 else 0.0

    @property
    def rq(self) -> float:
        denom = self.tp + 0.5 * self.fp + 0.5 * self.fn
        return self.tp / denom if denom > 0 else 0.0


@dataclass
class PqReport:
    thing_ids: tuple[int, ...]
    per_class: dict[int, ClassStats] = field(default_factory=dict)
    confusion: np.ndarray | None = None

    def add(self, other: "PqReport") -> "PqReport":
        for c, s in other.per_class.items():
            mine = self.per_class.setdefault(c, ClassStats())
            mine.tp += s.tp
            mine.fp += s.fp
            mine.fn += s.fn
            mine.iou_sum += s.iou_sum
        if other.confusion is not None:
            self.confusion = other.confusion.copy() if self.confusion is None else self.confusion + other.confusion
        return self

    def _mean(self, attr: str, which=None) -> float:
        vals = [getattr(s, attr) for c, s in sorted(self.per_class.items())
                if s.present and (which is None or (c in self.thing_ids) == which)]
        return float(np.mean(vals)) if vals else 0.0

    @property
    def pq(self) -> float:
        return self._mean("pq")

    @property
    def sq(self) -> float:
        return self._mean("sq")

    @property
    def rq(self) -> float:
        return self._mean("rq")

    @property
    def pq_th(self) -> float:
        return self._mean("pq", True)

    @property
    def pq_st(self) -> float:
        return self._mean("pq", False)

    @property
    def miou(self) -> float:
        if self.confusion is None:
            return float("nan")
        return iou_from_confusion(self.confusion)[1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["class", "tp", "fp", "fn", "iou_sum", "pq", "sq", "rq"])
        for c, s in sorted(self.per_class.items()):
            wr.writerow([c, s.tp, s.fp, s.fn, f"{s.iou_sum:.6f}", f"{s.pq:.6f}", f"{s.sq:.6f}", f"{s.rq:.6f}"])
        for name, which in (("all", None), ("things", True), ("stuff", False)):
            rows = [s for c, s in self.per_class.items()
                    if s.present and (which is None or (c in self.thing_ids) == which)]
            wr.writerow([
                name, sum(s.tp for s in rows), sum(s.fp for s in rows), sum(s.fn for s in rows),
                f"{sum(s.iou_sum for s in rows):.6f}",
                f"{self._mean('pq', which):.6f}", f"{self._mean('sq', which):.6f}", f"{self._mean('rq', which):.6f}",
            ])
        return buf.getvalue()


def extract_segments(label: PanopticLabelMap, thing_ids) -> list[Segment]:
    """Stuff classes form one segment each; things split by instance id."""
    thing_ids = set(int(t) for t in thing_ids)
    segs = []
    for c in np.unique(label.semantic):
        c = int(c)
        cls_mask = label.semantic == c
        if c not in thing_ids:
            segs.append(Segment(c, 0, cls_mask))
            continue
        for i in np.unique(label.instance[cls_mask]):
            segs.append(Segment(c, int(i), cls_mask & (label.instance == i)))
    return segs


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def match_segments(pred: list[Segment], gt: list[Segment]) -> list[tuple[int, int, float]]:
    """All same-class (pred, gt) pairs with IoU > 0.5."""
    out = []
    for i, p in enumerate(pred):
        for j, g in enumerate(gt):
            if p.cls != g.cls:
                continue
            v = iou(p.mask, g.mask)
            if v > MATCH_IOU:
                out.append((i, j, v))
    return out


def match_oracle(pred: list[Segment], gt: list[Segment]) -> list[tuple[int, int, float]]:
    """Exhaustive one-to-one matching maximising total IoU, each pair above 0.5.

    Exponential; capped at eight segments per side.
    """
    if len(pred) > ORACLE_MAX_SEGMENTS or len(gt) > ORACLE_MAX_SEGMENTS:
        raise ValueError(f"match_oracle handles at most {ORACLE_MAX_SEGMENTS} segments per side")
    ious = [[iou(p.mask, g.mask) if p.cls == g.cls else 0.0 for g in gt] for p in pred]
    best: tuple[float, list] = (-1.0, [])

    def search(j: int, used: frozenset, chosen: list, total: float) -> None:
        nonlocal best
        if j == len(gt):
            if total > best[0]:
                best = (total, list(chosen))
            return
        search(j + 1, used, chosen, total)
        for i in range(len(pred)):
            if i not in used and ious[i][j] > MATCH_IOU:
                chosen.append((i, j, ious[i][j]))
                search(j + 1, used | {i}, chosen, total + ious[i][j])
                chosen.pop()

    search(0, frozenset(), [], 0.0)
    return sorted(best[1])


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, n_classes: int) -> np.ndarray:
    pred = np.asarray(pred).reshape(-1).astype(np.int64)
    gt = np.asarray(gt).reshape(-1).astype(np.int64)
    return np.bincount(gt * n_classes + pred, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def iou_from_confusion(conf: np.ndarray) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN for classes absent on both sides) and their mean."""
    tp = np.diag(conf).astype(np.float64)
    union = conf.sum(axis=0) + conf.sum(axis=1) - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        per = np.where(union > 0, tp / union, np.nan)
    present = ~np.isnan(per)
    return per, float(per[present].mean()) if present.any() else float("nan")


def mean_iou(pred_semantic: np.ndarray, gt_semantic: np.ndarray, n_sem: int) -> tuple[np.ndarray, float]:
    if np.shape(pred_semantic) != np.shape(gt_semantic):
        raise ValueError(f"shape mismatch {np.shape(pred_semantic)} vs {np.shape(gt_semantic)}")
    return iou_from_confusion(confusion_matrix(pred_semantic, gt_semantic, n_sem))


def panoptic_quality(pred: PanopticLabelMap, gt: PanopticLabelMap, thing_ids, n_sem: int | None = None) -> PqReport:
    """Per-class TP/FP/FN and matched IoU for one image.

    When ``n_sem`` is given the semantic confusion matrix is attached as well,
    so that reports summed over a dataset also yield mIoU.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    thing_ids = tuple(int(t) for t in thing_ids)
    ps, gs = extract_segments(pred, thing_ids), extract_segments(gt, thing_ids)
    report = PqReport(thing_ids)
    matches = match_segments(ps, gs)
    mp = {i for i, _, _ in matches}
    mg = {j for _, j, _ in matches}
    for i, j, v in matches:
        s = report.per_class.setdefault(gs[j].cls, ClassStats())
        s.tp += 1
        s.iou_sum += v
    for i, p in enumerate(ps):
        if i not in mp:
            report.per_class.setdefault(p.cls, ClassStats()).fp += 1
    for j, g in enumerate(gs):
        if j not in mg:
            report.per_class.setdefault(g.cls, ClassStats()).fn += 1
    if n_sem is not None:
        report.confusion = confusion_matrix(pred.semantic, gt.semantic, n_sem)
    return report
