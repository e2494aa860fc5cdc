"""Instance-segmentation metrics: point-set IoU, mean coverage and mAP at an IoU threshold.

A scene is a list of frames; each frame gives ground-truth instances as
``(class id, point indices)`` and predicted instances as
``(class id, point indices, confidence)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Iterable, Sequence

import numpy as np

GroundTruth = Sequence[tuple[int, Iterable[int]]]
Predictions = Sequence[tuple[int, Iterable[int], float]]


class MetricsError(ValueError):
    pass


def instance_iou(a, b) -> float:
    a, b = set(np.asarray(list(a)).tolist()), set(np.asarray(list(b)).tolist())
    if not a:
        raise MetricsError("empty ground-truth instance")
    return len(a & b) / len(a | b)


def _as_sets(instances):
    return [(int(c), frozenset(np.asarray(list(idx), dtype=np.int64).tolist()), *rest)
            for c, idx, *rest in instances]


def _iou_sets(a: frozenset, b: frozenset) -> float:
    if not a:
        raise MetricsError("empty ground-truth instance")
    return len(a & b) / len(a | b)


def mean_coverage(gt_frames: Sequence[GroundTruth], pred_frames: Sequence[Predictions]) -> tuple[dict[int, float], float]:
    """Per-class coverage and its class mean.

    Each ground-truth instance scores its best IoU against same-class
    predictions of its frame; scores are pooled over frames per class.
    """
    scores: dict[int, list[float]] = {}
    for gt, pred in zip(gt_frames, pred_frames, strict=True):
        pred = _as_sets(pred)
        for cls, g in _as_sets(gt):
            best = max((_iou_sets(g, p) for c, p, *_ in pred if c == cls), default=0.0)
            scores.setdefault(cls, []).append(best)
    per_class = {c: float(np.mean(v)) for c, v in sorted(scores.items())}
    mcov = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mcov


def average_precision(tp: np.ndarray, n_gt: int) -> float:
    """All-points interpolated AP of a confidence-ranked TP/FP sequence."""
    if n_gt == 0:
        raise MetricsError("AP undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=np.float64)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * envelope))


def map_at_iou(gt_frames: Sequence[GroundTruth], pred_frames: Sequence[Predictions],
               threshold: float = 0.5) -> tuple[dict[int, float], float]:
    """Per-class AP and mean AP over classes that have ground truth.

    Predictions are visited by descending confidence (ties: frame order,
    then prediction order) and matched to the unmatched same-class
    ground-truth instance of highest IoU in their frame.
    """
    gts = [_as_sets(g) for g in gt_frames]
    preds = [_as_sets(p) for p in pred_frames]
    if len(gts) != len(preds):
        raise MetricsError("ground truth and predictions cover different frame counts")
    classes = sorted({c for g in gts for c, _ in g})
    per_class = {}
    for cls in classes:
        n_gt = sum(1 for g in gts for c, _ in g if c == cls)
        ranked = sorted(((-conf, f, k, pset) for f, p in enumerate(preds)
                         for k, (c, pset, conf) in enumerate(p) if c == cls),
                        key=lambda r: r[:3])
        matched = [set() for _ in gts]
        tp = []
        for _, f, _, pset in ranked:
            best, best_j = -1.0, None
            for j, (c, g) in enumerate(gts[f]):
                if c != cls or j in matched[f]:
                    continue
                iou = _iou_sets(g, pset)
                if iou > best:
                    best, best_j = iou, j
            if best_j is not None and best >= threshold:
                matched[f].add(best_j)
                tp.append(1)
            else:
                tp.append(0)
        per_class[cls] = average_precision(np.array(tp), n_gt)
    mean_ap = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return per_class, mean_ap


@dataclass
class MetricsReport:
    coverage: dict[int, float]
    mcov: float
    ap: dict[int, float]
    map50: float
    frames: int

    def summary(self) -> str:
        return f"mCov {100 * self.mcov:.2f}%  mAP0.5 {100 * self.map50:.2f}%  ({self.frames} frames)"

    def to_records(self) -> list[dict]:
        rows = [{"class": c, "coverage": self.coverage.get(c), "ap50": self.ap.get(c)}
                for c in sorted(set(self.coverage) | set(self.ap))]
        rows.append({"class": "mean", "mcov": self.mcov, "map50": self.map50, "frames": self.frames})
        return rows

    def write(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.to_records():
                fh.write(json.dumps(row) + "\n")

    @classmethod
    def read(cls, path) -> "MetricsReport":
        coverage, ap = {}, {}
        mean = {}
        with open(path) as fh:
            for line in fh:
                row = json.loads(line)
                if row["class"] == "mean":
                    mean = row
                else:
                    if row["coverage"] is not None:
                        coverage[int(row["class"])] = row["coverage"]
                    if row["ap50"] is not None:
                        ap[int(row["class"])] = row["ap50"]
        return cls(coverage, mean["mcov"], ap, mean["map50"], mean["frames"])


def evaluate(gt_frames: Sequence[GroundTruth], pred_frames: Sequence[Predictions],
             threshold: float = 0.5) -> MetricsReport:
    coverage, mcov = mean_coverage(gt_frames, pred_frames)
    ap, map50 = map_at_iou(gt_frames, pred_frames, threshold)
    return MetricsReport(coverage, mcov, ap, map50, len(gt_frames))
