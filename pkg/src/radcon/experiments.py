"""Multi-seed regime comparisons on the default synthetic corpus."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

from .config import TrainConfig
from .synthdata import generate_corpus, mask_labels, split_dataset
from .trainer import run_regime

log = logging.getLogger(__name__)


@dataclass
class RunResult:
    regime: str
    seed: int
    labeled_fraction: float
    map50: float
    mcov: float
    seconds: float


@dataclass
class TrendStudy:
    results: list[RunResult] = field(default_factory=list)

    def values(self, regime: str, fraction: float) -> dict[int, float]:
        return {r.seed: r.map50 for r in self.results
                if r.regime == regime and r.labeled_fraction == fraction}

    def mean(self, regime: str, fraction: float) -> float:
        v = self.values(regime, fraction)
        return sum(v.values()) / len(v)

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps([r.__dict__ for r in self.results], indent=1))

    @classmethod
    def load(cls, path) -> "TrendStudy":
        return cls([RunResult(**r) for r in json.loads(Path(path).read_text())])


def corpus_splits(seed: int, n_frames: int, fraction: float):
    frames = generate_corpus(n_frames, seed)
    train, val, test = split_dataset(frames, seed=seed)
    return mask_labels(train, fraction, seed), val, test


def run_trend_study(seeds: Sequence[int] = (0, 1, 2, 3, 4), n_frames: int = 2000,
                    fraction: float = 0.05, budgets: Sequence[float] = (0.2, 1.0),
                    base: TrainConfig | None = None) -> TrendStudy:
    """Supervised / non-joint / semi / joint at ``fraction`` plus non-joint at larger budgets.

    Each seed drives its own corpus, split, mask and training randomness.
    The semi-supervised run reuses the non-joint model of the same seed as
    its pseudo-labeler.
    """
    base = base or TrainConfig()
    study = TrendStudy()

    def record(art, seconds):
        cfg = art.config
        study.results.append(RunResult(cfg.regime, cfg.seed, cfg.labeled_fraction,
                                       art.metrics.map50, art.metrics.mcov, seconds))
        log.info("%-14s seed=%d p=%.2f mAP=%.4f (%.0fs)", cfg.regime, cfg.seed,
                 cfg.labeled_fraction, art.metrics.map50, seconds)
        return art

    for seed in seeds:
        train, val, test = corpus_splits(seed, n_frames, fraction)
        cfg = base.replace(seed=seed, labeled_fraction=fraction)
        arts = {}
        for regime in ("supervised", "nonjoint_full", "nonjoint_semi", "joint_full"):
            t0 = time.perf_counter()
            boot = arts["nonjoint_full"].model if regime == "nonjoint_semi" else None
            arts[regime] = record(run_regime(cfg.replace(regime=regime), train, val, test, bootstrap=boot),
                                  time.perf_counter() - t0)
        for p in budgets:
            train_p, val, test = corpus_splits(seed, n_frames, p)
            t0 = time.perf_counter()
            record(run_regime(cfg.replace(regime="nonjoint_full", labeled_fraction=p), train_p, val, test),
                   time.perf_counter() - t0)
    return study
