"""Frame sampling, class-balanced point selection and the per-class feature queue."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


class SelectionError(RuntimeError):
    """A class cannot be filled even with the queue."""

    def __init__(self, cls: int, available: int, needed: int):
        super().__init__(
            f"class {cls}: only {available} points in minibatch + queue, need {needed}; "
            "increase the minibatch size so the first minibatch holds enough points per class")
        self.cls = cls
        self.available = available
        self.needed = needed


def sample_frame(n_points: int, n_sample: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``n_sample`` points: with replacement iff the frame is smaller."""
    n_points = n_points if isinstance(n_points, (int, np.integer)) else len(n_points)
    if n_points < 1:
        raise ValueError("cannot sample from an empty frame")
    if n_points < n_sample:
        return rng.integers(0, n_points, size=n_sample)
    return rng.choice(n_points, size=n_sample, replace=False)


def covering_indices(n_points: int, n_sample: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Inference sampling: every point once, padded with copies of point 0.

    Repeated points do not change the extractor output, so small frames are
    scored in full.  Frames larger than ``n_sample`` are subsampled.
    """
    if n_points < 1:
        raise ValueError("cannot sample from an empty frame")
    if n_points >= n_sample:
        if n_points == n_sample:
            return np.arange(n_sample)
        rng = rng or np.random.default_rng(0)
        return np.sort(rng.choice(n_points, size=n_sample, replace=False))
    return np.concatenate([np.arange(n_points), np.zeros(n_sample - n_points, dtype=np.int64)])


def unique_first(keys: np.ndarray) -> np.ndarray:
    """Positions of the first occurrence of each row of ``keys`` in input order."""
    _, first = np.unique(keys, axis=0, return_index=True)
    return np.sort(first)


class FeatureQueue:
    """Per-class FIFO of detached projected features."""

    def __init__(self, n_class: int, capacity: int = 1024):
        self.n_class = n_class
        self.capacity = capacity
        self._items: list[deque] = [deque(maxlen=capacity) for _ in range(n_class)]

    def __len__(self) -> int:
        return sum(len(q) for q in self._items)

    def count(self, cls: int) -> int:
        return len(self._items[cls])

    def counts(self) -> np.ndarray:
        return np.array([len(q) for q in self._items])

    def entries(self, cls: int) -> list[tuple[np.ndarray, str]]:
        """Oldest first."""
        return list(self._items[cls])

    def newest(self, cls: int, k: int) -> np.ndarray:
        items = self._items[cls]
        if k == 0:
            return np.zeros((0, 0))
        return np.stack([items[-1 - i][0] for i in range(k)])

    def update(self, features: np.ndarray, labels: np.ndarray, tag: str | np.ndarray = "label") -> "FeatureQueue":
        features = np.asarray(features, dtype=np.float64)
        labels = np.asarray(labels)
        tags = np.broadcast_to(np.asarray(tag, dtype=object), labels.shape)
        for f, c, t in zip(features, labels, tags):
            if 0 <= c < self.n_class:
                self._items[int(c)].append((f.copy(), t))
        return self


def queue_update(queue: FeatureQueue, features: np.ndarray, labels: np.ndarray,
                 tag: str | np.ndarray = "label") -> FeatureQueue:
    return queue.update(features, labels, tag)


@dataclass
class SelectionSet:
    """``n_class * N`` entries grouped by class.

    ``rows`` index the candidate rows for minibatch entries and are -1 for
    queue entries.
    """

    features: np.ndarray
    labels: np.ndarray
    from_queue: np.ndarray
    rows: np.ndarray
    per_class: int

    def __len__(self) -> int:
        return len(self.labels)

    def assemble(self, candidates: dc.Tensor) -> dc.Tensor:
        """Selection features as a graph node: live rows for the minibatch, constants for the queue."""
        live = self.rows >= 0
        if live.all():
            return candidates.take(self.rows)
        order = np.concatenate([np.flatnonzero(live), np.flatnonzero(~live)])
        stacked = dc.concat([candidates.take(self.rows[live]), dc.constant(self.features[~live])], axis=0)
        return stacked.take(np.argsort(order))


def select_balanced(features: np.ndarray, labels: np.ndarray, queue: FeatureQueue,
                    per_class: int, rng: np.random.Generator) -> SelectionSet:
    """Pick exactly ``per_class`` entries of every class.

    Minibatch candidates (``labels < 0`` are ignored) are preferred, drawn
    uniformly without replacement when a class has a surplus; a deficit is
    filled with the newest queue entries.  The queue is only read.
    """
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    counts = np.array([(labels == c).sum() for c in range(queue.n_class)])
    for c in range(queue.n_class):
        if counts[c] + queue.count(c) < per_class:
            raise SelectionError(c, int(counts[c] + queue.count(c)), per_class)

    feats, labs, src, rows = [], [], [], []
    dim = features.shape[1]
    for c in range(queue.n_class):
        idx = np.flatnonzero(labels == c)
        if len(idx) > per_class:
            idx = np.sort(rng.choice(idx, size=per_class, replace=False))
        deficit = per_class - len(idx)
        feats.append(features[idx])
        rows.append(idx)
        if deficit:
            feats.append(queue.newest(c, deficit).reshape(deficit, dim))
            rows.append(np.full(deficit, -1))
        labs.append(np.full(per_class, c))
        src.append(np.r_[np.zeros(len(idx), bool), np.ones(deficit, bool)])
    return SelectionSet(np.vstack(feats), np.concatenate(labs), np.concatenate(src),
                        np.concatenate(rows).astype(np.int64), per_class)
