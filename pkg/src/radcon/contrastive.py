"""InfoNCE over class-defined positives/negatives and the joint objective."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .selection import SelectionSet


class LossError(ValueError):
    pass


def info_nce_point(anchor: np.ndarray, positives: np.ndarray, negatives: np.ndarray,
                   tau: float) -> float:
    """Loss of one anchor: mean over positives of -log softmax against all negatives."""
    if tau <= 0:
        raise LossError(f"temperature must be positive, got {tau}")
    positives = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if positives.size == 0 or negatives.size == 0:
        raise LossError("need at least one positive and one negative")
    anchor = np.asarray(anchor, dtype=np.float64)
    pos = positives @ anchor / tau
    neg = negatives @ anchor / tau
    m = max(pos.max(), neg.max())
    # fsum is correctly rounded, so reordering positives or negatives is bit-exact
    neg_sum = math.fsum(np.exp(neg - m))
    terms = np.log(np.exp(pos - m) + neg_sum) - (pos - m)
    return math.fsum(terms) / len(terms)


def info_nce_batch(features, labels: np.ndarray, tau: float,
                   anchors: np.ndarray | None = None) -> dc.Tensor:
    """Mean per-anchor InfoNCE over a selection, as a differentiable scalar.

    ``features`` holds unit rows (tensor or array).  Every row is a
    candidate positive/negative; ``anchors`` (bool mask, default all) picks
    the rows whose losses are averaged.
    """
    if tau <= 0:
        raise LossError(f"temperature must be positive, got {tau}")
    f = features if isinstance(features, dc.Tensor) else dc.constant(features)
    labels = np.asarray(labels)
    n = len(labels)
    anchors = np.ones(n, bool) if anchors is None else np.asarray(anchors, bool)
    a_idx = np.flatnonzero(anchors)
    if a_idx.size == 0:
        raise LossError("no anchors")

    same = labels[a_idx, None] == labels[None, :]
    pos_mask = same.copy()
    pos_mask[np.arange(a_idx.size), a_idx] = False
    neg_mask = ~same
    n_pos = pos_mask.sum(axis=1)
    if (n_pos == 0).any() or (neg_mask.sum(axis=1) == 0).any():
        raise LossError("every anchor needs at least one positive and one negative")

    sim = (f.take(a_idx) @ f.T) * (1.0 / tau)
    shift = sim.data.max(axis=1, keepdims=True)
    e = dc.exp(sim - shift)
    neg_sum = (e * neg_mask).sum(axis=1, keepdims=True)
    terms = dc.log(e + neg_sum) - (sim - shift)
    per_anchor = (terms * pos_mask).sum(axis=1) * (1.0 / n_pos)
    return per_anchor.mean()


def selection_loss(selection: SelectionSet, tau: float, features: dc.Tensor | None = None) -> dc.Tensor:
    """InfoNCE of a :class:`SelectionSet`; anchors are its minibatch entries."""
    f = selection.features if features is None else features
    return info_nce_batch(f, selection.labels, tau, anchors=~selection.from_queue)


@dataclass(frozen=True)
class LossReport:
    l_nce: float
    l_ce: float
    alpha: float
    l_total: float
    tau: float = float("nan")


def total_loss(l_nce: float, l_ce: float, alpha: float, tau: float = float("nan")) -> LossReport:
    if alpha < 0:
        raise LossError(f"alpha must be non-negative, got {alpha}")
    l_nce, l_ce = float(l_nce), float(l_ce)
    total = l_nce + alpha * l_ce
    if not np.isfinite(total):
        raise LossError("non-finite loss")
    return LossReport(l_nce, l_ce, float(alpha), total, tau)
