"""Per-class DBSCAN turning point-wise class predictions into instances."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

NOISE = -1


@dataclass(frozen=True, order=True)
class DbscanParams:
    eps: float = 1.0
    min_pts: int = 2
    velocity_weight: float = 0.0

    def __post_init__(self):
        if not self.eps > 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.min_pts < 1:
            raise ValueError(f"min_pts must be >= 1, got {self.min_pts}")
        if self.velocity_weight < 0:
            raise ValueError("velocity_weight must be non-negative")

    def key(self) -> tuple[float, int, float]:
        return (self.eps, self.min_pts, self.velocity_weight)


DEFAULT_GRID = tuple(DbscanParams(e, m, w) for e, m, w in
                     itertools.product((0.5, 1.0, 2.0, 4.0), (1, 2, 3), (0.0, 1.0)))


def dbscan(points: np.ndarray, eps: float, min_pts: int) -> np.ndarray:
    """Cluster labels with noise = -1.

    Neighbourhoods are closed balls that include the point itself.  Clusters
    are numbered by their lowest-index core point; a border point joins the
    cluster of its lowest-index core neighbour.
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    labels = np.full(n, NOISE, dtype=np.int64)
    if n == 0:
        return labels
    neighbours = cKDTree(points).query_ball_point(points, r=eps)
    core = np.array([len(nb) >= min_pts for nb in neighbours])
    cluster = 0
    for start in range(n):
        if not core[start] or labels[start] != NOISE:
            continue
        labels[start] = cluster
        stack = [start]
        while stack:
            p = stack.pop()
            for q in neighbours[p]:
                if core[q] and labels[q] == NOISE:
                    labels[q] = cluster
                    stack.append(q)
        cluster += 1
    for p in np.flatnonzero(~core):
        cores = [q for q in neighbours[p] if core[q]]
        if cores:
            labels[p] = labels[min(cores)]
    return labels


def clustering_space(points: np.ndarray, velocity_weight: float) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    return np.column_stack([points[:, 0], points[:, 1], velocity_weight * points[:, 2]])


def cluster_points(points: np.ndarray, params: DbscanParams) -> np.ndarray:
    """DBSCAN over ``(x, y, velocity_weight * v_r)`` of radar points ``[n, 4]``."""
    return dbscan(clustering_space(points, params.velocity_weight), params.eps, params.min_pts)


@dataclass
class InstancePrediction:
    """Point-wise classes/instances of one frame (class -1: point not scored)."""

    classes: np.ndarray
    instances: np.ndarray
    confidences: dict[int, float] = field(default_factory=dict)
    instance_classes: dict[int, int] = field(default_factory=dict)

    def instance_list(self) -> list[tuple[int, np.ndarray, float]]:
        """``(class id, point indices, confidence)`` per predicted instance."""
        return [(self.instance_classes[i], np.flatnonzero(self.instances == i), self.confidences[i])
                for i in sorted(self.confidences)]


def extract_instances(points: np.ndarray, classes: np.ndarray, probs: np.ndarray,
                      params_per_class: Mapping[int, DbscanParams],
                      only_classes: Sequence[int] | None = None) -> InstancePrediction:
    """Run DBSCAN separately inside every predicted class.

    Instance confidence is the mean probability of the instance's class over
    its points.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 4)
    classes = np.asarray(classes, dtype=np.int64)
    instances = np.full(len(classes), NOISE, dtype=np.int64)
    conf: dict[int, float] = {}
    owner: dict[int, int] = {}
    next_id = 0
    for cls in sorted(params_per_class):
        if only_classes is not None and cls not in only_classes:
            continue
        idx = np.flatnonzero(classes == cls)
        if idx.size == 0:
            continue
        local = cluster_points(points[idx], params_per_class[cls])
        for k in range(local.max() + 1):
            members = idx[local == k]
            instances[members] = next_id
            conf[next_id] = float(np.mean(probs[members, cls]))
            owner[next_id] = cls
            next_id += 1
    return InstancePrediction(classes, instances, conf, owner)


def write_params(path, params_per_class: Mapping[int, DbscanParams]) -> None:
    lines = [f"{c} {p.eps!r} {p.min_pts} {p.velocity_weight!r}" for c, p in sorted(params_per_class.items())]
    Path(path).write_text("\n".join(lines) + "\n")


def read_params(path) -> dict[int, DbscanParams]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            c, eps, mp, vw = line.split()
            out[int(c)] = DbscanParams(float(eps), int(mp), float(vw))
    return out


def prediction_to_record(frame_id: int, pred: InstancePrediction) -> dict:
    return {"frame_id": int(frame_id), "classes": pred.classes.tolist(), "instances": pred.instances.tolist(),
            "instance_classes": {str(k): v for k, v in sorted(pred.instance_classes.items())},
            "confidences": {str(k): v for k, v in sorted(pred.confidences.items())}}


def prediction_from_record(record: dict) -> tuple[int, InstancePrediction]:
    return record["frame_id"], InstancePrediction(
        np.asarray(record["classes"], dtype=np.int64), np.asarray(record["instances"], dtype=np.int64),
        {int(k): float(v) for k, v in record["confidences"].items()},
        {int(k): int(v) for k, v in record["instance_classes"].items()})
