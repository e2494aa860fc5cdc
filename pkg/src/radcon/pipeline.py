"""Inference (classify, then cluster per class) and clustering-parameter search."""
from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .clustering import DEFAULT_GRID, DbscanParams, InstancePrediction, extract_instances
from .metrics import MetricsReport, evaluate, map_at_iou
from .netmodel import ModelParams, predict_proba
from .selection import covering_indices
from .synthdata import RadarFrame


def frame_probabilities(params: ModelParams, frames: Sequence[RadarFrame], n_sample: int = 100,
                        seed: int = 0, batch: int = 128) -> list[np.ndarray]:
    """Class probabilities per point; rows of points left out by sampling are NaN."""
    out: list[np.ndarray] = []
    n_class = params.config.n_class
    for start in range(0, len(frames), batch):
        chunk = frames[start:start + batch]
        nonempty = [f for f in chunk if len(f)]
        idx = [covering_indices(len(f), n_sample, np.random.default_rng([seed, int(f.frame_id)]))
               for f in nonempty]
        probs = predict_proba(params, np.stack([f.points[i] for f, i in zip(nonempty, idx)])) if nonempty else None
        k = 0
        for f in chunk:
            p = np.full((len(f), n_class), np.nan)
            if len(f):
                rows = probs[k * n_sample:(k + 1) * n_sample]
                p[idx[k]] = rows
                k += 1
            out.append(p)
    return out


def predicted_classes(probs: np.ndarray) -> np.ndarray:
    scored = ~np.isnan(probs).any(axis=1)
    classes = np.full(len(probs), -1, dtype=np.int64)
    if scored.any():
        classes[scored] = np.argmax(probs[scored], axis=1)
    return classes


def instances_from_probs(frames: Sequence[RadarFrame], probs: Sequence[np.ndarray],
                         params_per_class: Mapping[int, DbscanParams],
                         only_classes: Sequence[int] | None = None) -> list[InstancePrediction]:
    return [extract_instances(f.points, predicted_classes(p), np.nan_to_num(p), params_per_class, only_classes)
            for f, p in zip(frames, probs)]


def infer(params: ModelParams, frames: Sequence[RadarFrame], params_per_class: Mapping[int, DbscanParams],
          n_sample: int = 100, seed: int = 0) -> list[InstancePrediction]:
    """End-to-end instance prediction; only the extractor and classifier are used."""
    return instances_from_probs(frames, frame_probabilities(params, frames, n_sample, seed), params_per_class)


def score(frames: Sequence[RadarFrame], predictions: Sequence[InstancePrediction]) -> MetricsReport:
    return evaluate([f.ground_truth() for f in frames], [p.instance_list() for p in predictions])


def _candidate_key(candidate: Mapping[int, DbscanParams]) -> tuple:
    return tuple(candidate[c].key() for c in sorted(candidate))


def grid_search(grid: Sequence[Mapping[int, DbscanParams]], model: ModelParams | None,
                frames: Sequence[RadarFrame], n_sample: int = 100,
                probs: Sequence[np.ndarray] | None = None) -> tuple[dict[int, DbscanParams], float]:
    """Exhaustive search over full per-class candidates by validation mAP@0.5.

    Ties go to the lexicographically smallest (eps, min_pts, velocity_weight)
    sequence in class-id order.
    """
    if not grid:
        raise ValueError("empty clustering grid")
    if probs is None:
        probs = frame_probabilities(model, frames, n_sample)
    gt = [f.ground_truth() for f in frames]
    best, best_score = None, -1.0
    for cand in sorted(grid, key=_candidate_key):
        preds = instances_from_probs(frames, probs, cand)
        _, value = map_at_iou(gt, [p.instance_list() for p in preds])
        if value > best_score:
            best, best_score = dict(cand), value
    return best, best_score


def search_per_class(candidates: Sequence[DbscanParams], model: ModelParams | None,
                     frames: Sequence[RadarFrame], n_class: int, n_sample: int = 100,
                     probs: Sequence[np.ndarray] | None = None) -> tuple[dict[int, DbscanParams], float]:
    """Same optimum as :func:`grid_search` over the full per-class product grid.

    A class's AP only depends on that class's parameters, so each class is
    searched on its own.
    """
    candidates = sorted(set(candidates or DEFAULT_GRID))
    if not candidates:
        raise ValueError("empty clustering grid")
    if probs is None:
        probs = frame_probabilities(model, frames, n_sample)
    gt_all = [f.ground_truth() for f in frames]
    chosen: dict[int, DbscanParams] = {}
    for cls in range(n_class):
        gt = [[g for g in frame_gt if g[0] == cls] for frame_gt in gt_all]
        if not any(gt):
            chosen[cls] = candidates[0]
            continue
        best, best_score = None, -1.0
        for cand in candidates:
            preds = instances_from_probs(frames, probs, {cls: cand}, only_classes=[cls])
            ap, _ = map_at_iou(gt, [p.instance_list() for p in preds])
            if ap[cls] > best_score:
                best, best_score = cand, ap[cls]
        chosen[cls] = best
    preds = instances_from_probs(frames, probs, chosen)
    _, value = map_at_iou(gt_all, [p.instance_list() for p in preds])
    return chosen, value
