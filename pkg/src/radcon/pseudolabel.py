"""Confidence-thresholded pseudo-labels for frames without ground truth."""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .netmodel import ModelParams
from .pipeline import frame_probabilities
from .synthdata import RadarFrame


@dataclass(frozen=True, order=True)
class PseudoLabel:
    frame_id: int
    point_index: int
    class_id: int
    confidence: float


def labels_from_probs(frame_id: int, probs: np.ndarray, threshold: float) -> list[PseudoLabel]:
    """Keep a point iff its top class probability is strictly above ``threshold``."""
    out = []
    for i, row in enumerate(probs):
        if np.isnan(row).any():
            continue
        c = int(np.argmax(row))
        if row[c] > threshold:
            out.append(PseudoLabel(int(frame_id), i, c, float(row[c])))
    return out


def generate_pseudo_labels(model: ModelParams, frames: Sequence[RadarFrame], threshold: float = 0.9,
                           n_sample: int = 100, seed: int = 0) -> list[PseudoLabel]:
    """Evaluation-mode predictions on the unlabeled frames, sorted by frame then point."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    unlabeled = [f for f in frames if not f.labeled]
    probs = frame_probabilities(model, unlabeled, n_sample, seed)
    out = []
    for frame, p in zip(unlabeled, probs):
        out.extend(labels_from_probs(frame.frame_id, p, threshold))
    return sorted(out)


def write_pseudo_labels(path, labels: Sequence[PseudoLabel]) -> None:
    with open(path, "w") as fh:
        for pl in sorted(labels):
            fh.write(json.dumps({"frame_id": pl.frame_id, "point_index": pl.point_index,
                                 "class_id": pl.class_id, "confidence": pl.confidence}) + "\n")


def read_pseudo_labels(path) -> list[PseudoLabel]:
    with open(path) as fh:
        return [PseudoLabel(r["frame_id"], r["point_index"], r["class_id"], r["confidence"])
                for r in map(json.loads, filter(str.strip, fh))]


def label_arrays(frames: Sequence[RadarFrame], pseudo: Sequence[PseudoLabel] = ()) -> list[np.ndarray]:
    """Per-frame point labels: ground truth where present, else pseudo-labels, else -1."""
    lookup: dict[int, list[PseudoLabel]] = {}
    for pl in pseudo:
        lookup.setdefault(pl.frame_id, []).append(pl)
    out = []
    for f in frames:
        if f.labeled:
            out.append(f.labels.copy())
            continue
        arr = np.full(len(f), -1, dtype=np.int64)
        for pl in lookup.get(f.frame_id, ()):
            arr[pl.point_index] = pl.class_id
        out.append(arr)
    return out
