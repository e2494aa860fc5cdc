"""Synthetic radar scenes, frame interchange files, splitting and label masking."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

CLASS_NAMES = ("car", "pedestrian", "pedestrian_group", "large_vehicle", "two_wheeler")
N_CLASS = len(CLASS_NAMES)


class DataError(ValueError):
    pass


@dataclass
class RadarFrame:
    """One scan: points ``[n, 4]`` as (x, y, v_r, rcs) plus optional ground truth.

    Unlabeled frames carry no labels at all; ``labels`` and ``instances``
    return ``None`` for them.
    """

    frame_id: int
    points: np.ndarray
    _labels: np.ndarray | None = field(default=None, repr=False)
    _instances: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 4)
        if (self._labels is None) != (self._instances is None):
            raise DataError(f"frame {self.frame_id}: labels and instance ids must come together")
        if self._labels is not None:
            self._labels = np.asarray(self._labels, dtype=np.int64)
            self._instances = np.asarray(self._instances, dtype=np.int64)
            if self._labels.shape != (len(self.points),) or self._instances.shape != (len(self.points),):
                raise DataError(f"frame {self.frame_id}: ground truth length mismatch")

    def __len__(self) -> int:
        return len(self.points)

    @property
    def labeled(self) -> bool:
        return self._labels is not None

    @property
    def labels(self) -> np.ndarray | None:
        return self._labels

    @property
    def instances(self) -> np.ndarray | None:
        return self._instances

    def without_labels(self) -> "RadarFrame":
        return RadarFrame(self.frame_id, self.points.copy())

    def ground_truth(self) -> list[tuple[int, np.ndarray]]:
        """``(class id, sorted point indices)`` per instance, ordered by instance id."""
        if not self.labeled:
            raise DataError(f"frame {self.frame_id} is unlabeled")
        out = []
        for inst in np.unique(self._instances):
            idx = np.flatnonzero(self._instances == inst)
            out.append((int(self._labels[idx[0]]), idx))
        return out


@dataclass(frozen=True)
class ClassSpec:
    count: tuple[int, int]          # instances per frame, inclusive
    points: tuple[int, int]         # points per instance, inclusive
    extent: float                   # spatial spread (m)
    speed: tuple[float, float]      # m/s
    rcs_mean: float                 # dBsm
    rcs_spread: float
    velocity_jitter: float = 0.15   # m/s, per point
    along_road: float = 0.8         # probability the heading follows the road axis


DEFAULT_CLASSES = (
    ClassSpec(count=(0, 3), points=(3, 9), extent=1.5, speed=(3.0, 14.0), rcs_mean=6.0, rcs_spread=5.0),
    ClassSpec(count=(0, 3), points=(1, 4), extent=0.3, speed=(0.5, 2.0), rcs_mean=-6.0, rcs_spread=5.0,
              velocity_jitter=0.3, along_road=0.3),
    ClassSpec(count=(0, 1), points=(5, 12), extent=1.2, speed=(0.4, 1.8), rcs_mean=-3.0, rcs_spread=5.0,
              velocity_jitter=0.3, along_road=0.3),
    ClassSpec(count=(0, 1), points=(6, 16), extent=3.0, speed=(2.0, 12.0), rcs_mean=12.0, rcs_spread=5.0),
    ClassSpec(count=(0, 1), points=(3, 8), extent=0.7, speed=(2.0, 9.0), rcs_mean=0.0, rcs_spread=5.0,
              along_road=0.6),
)


@dataclass(frozen=True)
class SceneConfig:
    classes: tuple[ClassSpec, ...] = DEFAULT_CLASSES
    x_range: tuple[float, float] = (5.0, 70.0)
    y_range: tuple[float, float] = (-35.0, 35.0)
    min_points: int = 10
    max_points: int = 60
    min_separation: float = 2.0     # extra gap between instance footprints (m)
    clutterless: bool = True

    def validate(self) -> None:
        if not self.clutterless:
            raise DataError("clutter generation is not supported; set clutterless=True")
        for kind in self.classes:
            if kind.count[0] > kind.count[1] or kind.points[0] > kind.points[1] or kind.points[0] < 1:
                raise DataError(f"empty range in {kind}")
            if kind.extent <= 0 or kind.speed[0] > kind.speed[1]:
                raise DataError(f"invalid extent/speed in {kind}")
        if self.x_range[0] >= self.x_range[1] or self.y_range[0] >= self.y_range[1]:
            raise DataError("empty field of view")
        if not 1 <= self.min_points <= self.max_points:
            raise DataError("invalid frame size bounds")


def _draw_instances(config: SceneConfig, rng: np.random.Generator) -> list[int]:
    """Class id per instance, redrawn until the frame size fits the bounds."""
    while True:
        classes, lo, hi = [], 0, 0
        for cls, kind in enumerate(config.classes):
            k = int(rng.integers(kind.count[0], kind.count[1] + 1))
            classes += [cls] * k
            lo += k * kind.points[0]
            hi += k * kind.points[1]
        if classes and hi >= config.min_points and lo <= config.max_points:
            return classes


def generate_frame(config: SceneConfig, rng: np.random.Generator, frame_id: int = 0) -> RadarFrame:
    """Draw one labeled frame of moving objects."""
    config.validate()
    classes = _draw_instances(config, rng)
    while True:
        sizes = [int(rng.integers(config.classes[c].points[0], config.classes[c].points[1] + 1))
                 for c in classes]
        if config.min_points <= sum(sizes) <= config.max_points:
            break

    centers: list[np.ndarray] = []
    radii: list[float] = []
    pts, labels, insts = [], [], []
    for inst, (cls, size) in enumerate(zip(classes, sizes)):
        kind = config.classes[cls]
        radius = 3.0 * kind.extent
        for _attempt in range(100):
            c = np.array([rng.uniform(*config.x_range), rng.uniform(*config.y_range)])
            if all(np.linalg.norm(c - o) > radius + r + config.min_separation
                   for o, r in zip(centers, radii)):
                break
        centers.append(c)
        radii.append(radius)

        offsets = rng.normal(0.0, kind.extent / 2.0, size=(size, 2))
        norms = np.linalg.norm(offsets, axis=1, keepdims=True)
        offsets = np.where(norms > radius, offsets * (radius / np.maximum(norms, 1e-12)), offsets)
        xy = c + offsets

        speed = rng.uniform(*kind.speed)
        if rng.random() < kind.along_road:
            heading = rng.normal(0.0, 0.15) + (math.pi if rng.random() < 0.5 else 0.0)
        else:
            heading = rng.uniform(0.0, 2 * math.pi)
        velocity = speed * np.array([math.cos(heading), math.sin(heading)])
        base_vr = float(velocity @ c / np.linalg.norm(c))
        vr = base_vr + rng.normal(0.0, kind.velocity_jitter, size=size)

        rcs_inst = rng.normal(kind.rcs_mean, kind.rcs_spread / 2.0)
        rcs = rcs_inst + rng.normal(0.0, kind.rcs_spread / 2.0, size=size)

        pts.append(np.column_stack([xy, vr, rcs]))
        labels += [cls] * size
        insts += [inst] * size

    return RadarFrame(frame_id, np.vstack(pts), np.array(labels), np.array(insts))


def generate_corpus(n_frames: int, seed: int, config: SceneConfig | None = None) -> list[RadarFrame]:
    """Frames with per-frame seeds derived from ``(seed, frame id)``."""
    config = config or SceneConfig()
    return [generate_frame(config, np.random.default_rng([seed, i]), frame_id=i) for i in range(n_frames)]


def split_dataset(frames: Sequence[RadarFrame], ratios: tuple[int, int, int] = (8, 1, 1),
                  seed: int = 0) -> tuple[list[RadarFrame], list[RadarFrame], list[RadarFrame]]:
    """Shuffle and split into train/validation/test; each split keeps corpus order."""
    n = len(frames)
    if n < 10:
        raise DataError(f"need at least 10 frames to split, got {n}")
    total = sum(ratios)
    n_train = int(round(n * ratios[0] / total))
    n_val = int(round(n * ratios[1] / total))
    perm = np.random.default_rng(seed).permutation(n)
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    return tuple([frames[i] for i in sorted(p)] for p in parts)  # type: ignore[return-value]


def mask_labels(frames: Sequence[RadarFrame], fraction: float, seed: int = 0) -> list[RadarFrame]:
    """Keep ground truth on ``round(fraction * len(frames))`` frames, drop it elsewhere."""
    if not 0.0 < fraction <= 1.0:
        raise DataError(f"labeled fraction must be in (0, 1], got {fraction}")
    n = len(frames)
    keep = int(math.floor(fraction * n + 0.5))
    chosen = set(np.random.default_rng(seed).permutation(n)[:keep].tolist())
    return [f if i in chosen else f.without_labels() for i, f in enumerate(frames)]


# -- interchange ----------------------------------------------------------------

def frame_to_record(frame: RadarFrame) -> dict:
    rows = []
    for i, (x, y, vr, rcs) in enumerate(frame.points.tolist()):
        cls = int(frame.labels[i]) if frame.labeled else None
        inst = int(frame.instances[i]) if frame.labeled else None
        rows.append([x, y, vr, rcs, cls, inst])
    return {"frame_id": frame.frame_id, "labeled": frame.labeled, "points": rows}


def frame_from_record(record: dict) -> RadarFrame:
    rows = record["points"]
    points = np.array([r[:4] for r in rows], dtype=np.float64).reshape(-1, 4)
    if record.get("labeled"):
        if any(r[4] is None or r[5] is None for r in rows):
            raise DataError(f"frame {record['frame_id']}: labeled frame with missing labels")
        return RadarFrame(record["frame_id"], points,
                          np.array([r[4] for r in rows], dtype=np.int64),
                          np.array([r[5] for r in rows], dtype=np.int64))
    return RadarFrame(record["frame_id"], points)


def write_frames(path, frames: Iterable[RadarFrame]) -> int:
    count = 0
    with open(path, "w") as fh:
        for frame in frames:
            fh.write(json.dumps(frame_to_record(frame)) + "\n")
            count += 1
    return count


def read_frames(path) -> list[RadarFrame]:
    frames = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                frames.append(frame_from_record(json.loads(line)))
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise DataError(f"{path}:{lineno}: malformed frame record ({exc})") from None
    return frames
