"""Training phases, the optimizer and schedule, and the five regimes end to end."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .clustering import DEFAULT_GRID, DbscanParams, write_params
from .config import TrainConfig, write_config
from .contrastive import selection_loss, total_loss
from .metrics import MetricsReport
from .netmodel import (ModelConfig, ModelParams, bind, classify, extract_features, init_model,
                       project, reset_classifier, set_freeze)
from .pipeline import infer, score, search_per_class
from .pseudolabel import PseudoLabel, generate_pseudo_labels, label_arrays, write_pseudo_labels
from .selection import FeatureQueue, SelectionError, sample_frame, select_balanced, unique_first
from .synthdata import RadarFrame

log = logging.getLogger(__name__)


class PhaseError(RuntimeError):
    def __init__(self, phase: str, cause: Exception):
        super().__init__(f"{phase} failed: {cause}")
        self.phase = phase


# -- schedule and optimizer -----------------------------------------------------

def lr_schedule(step: int, steps_per_epoch: int, lr_max: float, lr_min: float = 0.0,
                period: int = 10, mult: int = 2) -> float:
    """Cosine annealing with warm restarts; ``period`` is in epochs."""
    if step < 0:
        raise ValueError("step must be non-negative")
    cycle = period * steps_per_epoch
    t = step
    while t >= cycle:
        t -= cycle
        cycle *= mult
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / cycle))


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def optimizer_step(params: ModelParams, grads: dc.GradientTape, state: AdamState, lr: float) -> ModelParams:
    """Bias-corrected Adam update in place; frozen and absent names are skipped."""
    frozen = params.frozen_names()
    arrays = params.arrays()
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, g in grads.items():
        if name in frozen:
            continue
        m = state.m.get(name, np.zeros_like(g))
        v = state.v.get(name, np.zeros_like(g))
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        params.assign(name, arrays[name] - lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
    return params


def new_adam(config: TrainConfig) -> AdamState:
    return AdamState(config.beta1, config.beta2, config.adam_eps)


# -- minibatches ------------------------------------------------------------------

class FrameCycler:
    """Endless shuffled passes over a list of frame positions."""

    def __init__(self, positions: Sequence[int], rng: np.random.Generator):
        self.positions = np.asarray(positions, dtype=np.int64)
        self.rng = rng
        self._order = np.zeros(0, dtype=np.int64)

    def take(self, k: int) -> np.ndarray:
        out = []
        while k > 0:
            if self._order.size == 0:
                self._order = self.rng.permutation(self.positions)
            grab = self._order[:k]
            self._order = self._order[k:]
            out.append(grab)
            k -= grab.size
        return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


@dataclass
class Minibatch:
    points: np.ndarray        # [B, n_sample, 4]
    frame_pos: np.ndarray     # [B*n_sample]
    point_idx: np.ndarray     # [B*n_sample]
    unique_rows: np.ndarray   # first occurrence of every (frame, point)
    nce_labels: np.ndarray    # per unique row, -1 = unusable
    ce_labels: np.ndarray     # per unique row, ground truth only, -1 otherwise
    pseudo: np.ndarray        # per unique row, label came from a pseudo-label


class MinibatchSource:
    """Draws minibatches of frames, optionally stratified between labeled and unlabeled frames."""

    def __init__(self, frames: Sequence[RadarFrame], nce_labels: Sequence[np.ndarray],
                 n_frames: int, n_sample: int, rng: np.random.Generator):
        self.frames = frames
        self.nce_labels = nce_labels
        self.n_frames = n_frames
        self.n_sample = n_sample
        self.rng = rng
        labeled = [i for i, f in enumerate(frames) if f.labeled]
        unlabeled = [i for i, f in enumerate(frames) if not f.labeled]
        if not labeled:
            raise ValueError("no labeled frames")
        self.labeled = FrameCycler(labeled, rng)
        self.unlabeled = FrameCycler(unlabeled, rng) if unlabeled else None
        share = len(labeled) / len(frames)
        self.k_labeled = n_frames if self.unlabeled is None else max(1, int(round(n_frames * share)))

    def next(self) -> Minibatch:
        pos = self.labeled.take(min(self.k_labeled, self.n_frames))
        if self.unlabeled is not None and self.n_frames > pos.size:
            pos = np.concatenate([pos, self.unlabeled.take(self.n_frames - pos.size)])
        idx = [sample_frame(len(self.frames[p]), self.n_sample, self.rng) for p in pos]
        points = np.stack([self.frames[p].points[i] for p, i in zip(pos, idx)])
        frame_pos = np.repeat(pos, self.n_sample)
        point_idx = np.concatenate(idx)
        unique = unique_first(np.column_stack([frame_pos, point_idx]))
        fp, pi = frame_pos[unique], point_idx[unique]
        nce = np.array([self.nce_labels[f][p] for f, p in zip(fp, pi)], dtype=np.int64)
        is_gt = np.array([self.frames[f].labeled for f in fp], dtype=bool)
        ce = np.where(is_gt, nce, -1)
        return Minibatch(points, frame_pos, point_idx, unique, nce, ce, ~is_gt & (nce >= 0))


class TraceWriter:
    """Collects one record per optimisation step; optionally mirrors them to a file."""

    def __init__(self, path: Path | None = None):
        self.rows: list[dict] = []
        self.path = path
        if path is not None:
            path.write_text("")

    def add(self, row: dict) -> None:
        self.rows.append(row)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(row) + "\n")


def _ce_rows(batch: Minibatch, limit: int, rng: np.random.Generator) -> np.ndarray:
    rows = np.flatnonzero(batch.ce_labels >= 0)
    if rows.size > limit:
        rows = np.sort(rng.choice(rows, size=limit, replace=False))
    return rows


def _contrastive_term(params, config, batch, feats, queue, rng, tensors):
    """InfoNCE of one minibatch and the detached candidate features for the queue."""
    cand = np.flatnonzero(batch.nce_labels >= 0)
    z = project(params, feats.take(batch.unique_rows[cand]), tensors)
    labels = batch.nce_labels[cand]
    selection = select_balanced(z.data, labels, queue, config.per_class, rng)
    loss = selection_loss(selection, config.tau, selection.assemble(z))
    tags = np.where(batch.pseudo[cand], "pseudo", "label")
    return loss, (z.data.copy(), labels, tags)


def warm_queue(params: ModelParams, config: TrainConfig, source: "MinibatchSource",
               queue: FeatureQueue, max_batches: int = 50) -> int:
    """Fill the queue from minibatches, without updates, until every class can be balanced.

    Needed when pseudo-labels leave a class short in the first minibatch.
    Returns the number of minibatches consumed.
    """
    used = 0
    while True:
        short = [c for c in range(config.n_class) if queue.count(c) < config.per_class]
        if not short:
            return used
        if used == max_batches:
            raise SelectionError(short[0], queue.count(short[0]), config.per_class)
        batch = source.next()
        cand = np.flatnonzero(batch.nce_labels >= 0)
        feats = extract_features(params, batch.points).take(batch.unique_rows[cand])
        queue.update(project(params, feats).data, batch.nce_labels[cand],
                     np.where(batch.pseudo[cand], "pseudo", "label"))
        used += 1


# -- phases -------------------------------------------------------------------------

def train_representation(config: TrainConfig, params: ModelParams, frames: Sequence[RadarFrame],
                         labels: Sequence[np.ndarray], trace: TraceWriter | None = None) -> ModelParams:
    """Minimise the selection InfoNCE; the classification head is left untouched."""
    params = set_freeze(params.copy(), False)
    rng = np.random.default_rng([config.seed, 1])
    source = MinibatchSource(frames, labels, config.minibatch_frames, config.n_sample, rng)
    queue = FeatureQueue(config.n_class, config.queue_capacity)
    if config.semi:
        warm_queue(params, config, source, queue)
    state = new_adam(config)
    trace = trace or TraceWriter()
    names = [n for n in params.arrays() if not n.startswith("classifier.")]
    steps = config.epochs_representation * config.steps_per_epoch
    for step in range(steps):
        lr = lr_schedule(step, config.steps_per_epoch, config.lr_representation, config.lr_min,
                         config.restart_period, config.restart_mult)
        batch = source.next()
        tensors = bind(params, names)
        feats = extract_features(params, batch.points, tensors)
        loss, pushed = _contrastive_term(params, config, batch, feats, queue, rng, tensors)
        grads = dc.backward(loss, tensors)
        optimizer_step(params, grads, state, lr)
        queue.update(*pushed)
        report = total_loss(float(loss.data), 0.0, 0.0, config.tau)
        trace.add({"phase": "representation", "step": step, "l_nce": report.l_nce, "l_ce": report.l_ce,
                   "l_total": report.l_total, "lr": lr})
    return params


def _ce_phase(config: TrainConfig, params: ModelParams, frames: Sequence[RadarFrame], *, phase: str,
              epochs: int, lr_max: float, train_names: Sequence[str], rng_tag: int,
              trace: TraceWriter | None) -> ModelParams:
    rng = np.random.default_rng([config.seed, rng_tag])
    labeled = [f for f in frames if f.labeled]
    source = MinibatchSource(labeled, [f.labels for f in labeled], config.minibatch_frames,
                             config.n_sample, rng)
    state = new_adam(config)
    trace = trace or TraceWriter()
    train_backbone = any(n.startswith("extractor.") for n in train_names)
    for step in range(epochs * config.steps_per_epoch):
        lr = lr_schedule(step, config.steps_per_epoch, lr_max, config.lr_min,
                         config.restart_period, config.restart_mult)
        batch = source.next()
        tensors = bind(params, train_names)
        if train_backbone:
            feats = extract_features(params, batch.points, tensors)
        else:
            feats = extract_features(params, batch.points).detach()
        rows = _ce_rows(batch, config.ce_points, rng)
        logits = classify(params, feats.take(batch.unique_rows[rows]), True, rng, tensors)
        loss = dc.cross_entropy(logits, batch.ce_labels[rows])
        grads = dc.backward(loss, tensors, frozen=params.frozen_names())
        optimizer_step(params, grads, state, lr)
        report = total_loss(0.0, float(loss.data), 1.0)
        trace.add({"phase": phase, "step": step, "l_nce": report.l_nce, "l_ce": report.l_ce,
                   "l_total": report.l_total, "lr": lr})
    return params


def finetune(config: TrainConfig, params: ModelParams, frames: Sequence[RadarFrame],
             trace: TraceWriter | None = None) -> ModelParams:
    """Fresh classification head trained by cross-entropy on a frozen backbone."""
    if params is None:
        raise ValueError("fine-tuning needs a representation checkpoint")
    params = set_freeze(reset_classifier(params, config.seed + 7919), True)
    names = [n for n in params.arrays() if n.startswith("classifier.")]
    return _ce_phase(config, params, frames, phase="finetune", epochs=config.epochs_finetune,
                     lr_max=config.lr_finetune, train_names=names, rng_tag=2, trace=trace)


def train_supervised(config: TrainConfig, params: ModelParams, frames: Sequence[RadarFrame],
                     trace: TraceWriter | None = None) -> ModelParams:
    """Plain end-to-end cross-entropy training of extractor and classifier."""
    params = set_freeze(params.copy(), False)
    names = [n for n in params.arrays() if not n.startswith("projection.")]
    return _ce_phase(config, params, frames, phase="supervised", epochs=config.epochs_supervised,
                     lr_max=config.lr_supervised, train_names=names, rng_tag=3, trace=trace)


def train_joint(config: TrainConfig, params: ModelParams, frames: Sequence[RadarFrame],
                labels: Sequence[np.ndarray], trace: TraceWriter | None = None) -> ModelParams:
    """Minimise InfoNCE + alpha * cross-entropy with both heads attached.

    Cross-entropy only sees ground-truth labels; pseudo-labels (if any in
    ``labels``) only shape the contrastive positives and negatives.
    """
    if config.alpha <= 0:
        raise ValueError("joint training needs alpha > 0")
    params = set_freeze(params.copy(), False)
    rng = np.random.default_rng([config.seed, 4])
    source = MinibatchSource(frames, labels, config.minibatch_frames, config.n_sample, rng)
    queue = FeatureQueue(config.n_class, config.queue_capacity)
    if config.semi:
        warm_queue(params, config, source, queue)
    state = new_adam(config)
    trace = trace or TraceWriter()
    names = list(params.arrays())
    for step in range(config.epochs_joint * config.steps_per_epoch):
        lr = lr_schedule(step, config.steps_per_epoch, config.lr_joint, config.lr_min,
                         config.restart_period, config.restart_mult)
        batch = source.next()
        tensors = bind(params, names)
        feats = extract_features(params, batch.points, tensors)
        l_nce, pushed = _contrastive_term(params, config, batch, feats, queue, rng, tensors)
        rows = _ce_rows(batch, config.ce_points, rng)
        logits = classify(params, feats.take(batch.unique_rows[rows]), True, rng, tensors)
        l_ce = dc.cross_entropy(logits, batch.ce_labels[rows])
        loss = l_nce + l_ce * config.alpha
        grads = dc.backward(loss, tensors)
        optimizer_step(params, grads, state, lr)
        queue.update(*pushed)
        report = total_loss(float(l_nce.data), float(l_ce.data), config.alpha, config.tau)
        trace.add({"phase": "joint", "step": step, "l_nce": report.l_nce, "l_ce": report.l_ce,
                   "l_total": report.l_total, "lr": lr})
    return params


# -- regimes ---------------------------------------------------------------------------

@dataclass
class RunArtifacts:
    config: TrainConfig
    model: ModelParams
    checkpoints: dict[str, ModelParams]
    trace: list[dict]
    clustering: dict[int, DbscanParams]
    validation_map: float
    metrics: MetricsReport
    pseudo_labels: list[PseudoLabel] | None = None


def input_normalization(frames: Sequence[RadarFrame]) -> tuple[tuple[float, ...], tuple[float, ...]]:
    pts = np.vstack([f.points for f in frames if len(f)])
    scale = pts.std(axis=0)
    return tuple(pts.mean(axis=0).tolist()), tuple(np.where(scale > 0, scale, 1.0).tolist())


def model_config_for(config: TrainConfig, frames: Sequence[RadarFrame]) -> ModelConfig:
    offset, scale = input_normalization(frames)
    return ModelConfig(n_class=config.n_class, input_offset=offset, input_scale=scale)


def _phases(config: TrainConfig, train: Sequence[RadarFrame], trace: TraceWriter,
            bootstrap: ModelParams | None) -> tuple[ModelParams, dict[str, ModelParams], list[PseudoLabel] | None]:
    mcfg = model_config_for(config, train)
    labeled = [f for f in train if f.labeled]
    checkpoints: dict[str, ModelParams] = {}
    pseudo = None

    def run(name, fn, *args):
        try:
            return fn(*args)
        except Exception as exc:  # noqa: BLE001 - re-raised with the phase name
            raise PhaseError(name, exc) from exc

    if config.regime == "supervised":
        model = init_model(mcfg, config.seed, projection=False)
        model = run("supervised", train_supervised, config, model, labeled, trace)
        checkpoints["supervised"] = model
        return model, checkpoints, None

    if config.semi:
        if bootstrap is None:
            full = config.replace(regime="nonjoint_full")
            bootstrap, _, _ = _phases(full, train, TraceWriter(), None)
        checkpoints["bootstrap"] = bootstrap
        pseudo = run("pseudo-label", generate_pseudo_labels, bootstrap, train, config.threshold,
                     config.n_sample, config.seed)
        frames = list(train)
    else:
        frames = labeled
    labels = label_arrays(frames, pseudo or ())

    model = init_model(mcfg, config.seed)
    if config.regime.startswith("nonjoint"):
        model = run("representation", train_representation, config, model, frames, labels, trace)
        checkpoints["representation"] = model
        model = run("finetune", finetune, config, model, labeled, trace)
        checkpoints["finetune"] = model
    else:
        model = run("joint", train_joint, config, model, frames, labels, trace)
        checkpoints["joint"] = model
    return model, checkpoints, pseudo


def run_regime(config: TrainConfig, train: Sequence[RadarFrame], validation: Sequence[RadarFrame],
               test: Sequence[RadarFrame], run_dir: Path | None = None,
               bootstrap: ModelParams | None = None,
               grid: Sequence[DbscanParams] = DEFAULT_GRID) -> RunArtifacts:
    """Train the regime, pick clustering parameters on validation, evaluate on test.

    ``bootstrap`` optionally supplies the fully-supervised non-joint model
    that semi-supervised regimes use for pseudo-labels.
    """
    if run_dir is not None:
        run_dir = Path(run_dir)
        (run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        write_config(run_dir / "config.ini", config)
    trace = TraceWriter(run_dir / "loss_trace.jsonl" if run_dir else None)
    model, checkpoints, pseudo = _phases(config, train, trace, bootstrap)
    try:
        chosen, val_map = search_per_class(grid, model, validation, config.n_class, config.n_sample)
        report = score(test, infer(model, test, chosen, config.n_sample))
    except Exception as exc:  # noqa: BLE001
        raise PhaseError("evaluation", exc) from exc

    if run_dir is not None:
        provenance = {"train_config": config.to_dict()}
        for name, ckpt in checkpoints.items():
            ckpt.save(run_dir / "checkpoints" / f"{name}.ckpt", provenance)
        model.save(run_dir / "model.ckpt", provenance)
        if pseudo is not None:
            write_pseudo_labels(run_dir / "pseudo_labels.jsonl", pseudo)
        write_params(run_dir / "clustering_params.txt", chosen)
        report.write(run_dir / "metrics.jsonl")
    log.info("%s seed=%d p=%.2f: %s", config.regime, config.seed, config.labeled_fraction, report.summary())
    return RunArtifacts(config, model, checkpoints, trace.rows, chosen, val_map, report, pseudo)
