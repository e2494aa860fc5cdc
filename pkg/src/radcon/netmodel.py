"""Point-set feature extractor with a projection head and a point-wise classifier.

Extractor: shared per-point MLP (32, 64) -> max-pool over the frame ->
global vector concatenated back onto every point -> shared MLP (64, 64).
Every layer is affine + ReLU, so the output for a point depends only on the
point itself and the frame-level max, which makes the map permutation
equivariant and insensitive to repeated points.

Projection head: affine -> ReLU -> affine -> l2-normalize.
Classification head: affine -> batch-norm -> ReLU -> dropout -> affine.
"""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable

import numpy as np

from . import diffcore as dc
from .diffcore import BatchNormState, Tensor

EXTRACTOR_LAYERS = ("local0", "local1", "global0", "global1")


class ModelShapeError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_features: int = 4
    local_widths: tuple[int, int] = (32, 64)
    global_widths: tuple[int, int] = (64, 64)
    proj_hidden: int = 64
    proj_dim: int = 32
    cls_hidden: int = 64
    n_class: int = 5
    dropout: float = 0.3
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5
    input_offset: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    input_scale: tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)

    @property
    def feature_dim(self) -> int:
        return self.global_widths[-1]

    @classmethod
    def from_dict(cls, raw: dict) -> "ModelConfig":
        raw = dict(raw)
        for key in ("local_widths", "global_widths", "input_offset", "input_scale"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return cls(**raw)


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def _layer(rng, prefix: str, fan_in: int, fan_out: int) -> dict[str, np.ndarray]:
    return {f"{prefix}.w": _glorot(rng, fan_in, fan_out), f"{prefix}.b": np.zeros(fan_out)}


@dataclass
class ModelParams:
    """All weights of the network plus the batch-norm running statistics."""

    config: ModelConfig
    extractor: dict[str, np.ndarray]
    classifier: dict[str, np.ndarray]
    projection: dict[str, np.ndarray] | None = None
    bn: BatchNormState | None = None
    freeze_backbone: bool = False

    def arrays(self) -> dict[str, np.ndarray]:
        """Trainable arrays keyed by their fully qualified names."""
        out = {}
        for part in ("extractor", "projection", "classifier"):
            group = getattr(self, part)
            if group:
                out.update({f"{part}.{k}": v for k, v in group.items()})
        return out

    def frozen_names(self) -> set[str]:
        if not self.freeze_backbone:
            return set()
        return {f"extractor.{k}" for k in self.extractor}

    def copy(self) -> "ModelParams":
        return copy.deepcopy(self)

    def assign(self, name: str, value: np.ndarray) -> None:
        part, key = name.split(".", 1)
        getattr(self, part)[key] = value

    # -- persistence ---------------------------------------------------------
    def to_arrays(self) -> dict[str, np.ndarray]:
        out = self.arrays()
        if self.bn is not None:
            out["bn.running_mean"] = self.bn.running_mean
            out["bn.running_var"] = self.bn.running_var
        return out

    def header(self) -> dict:
        return {"model": asdict(self.config), "freeze_backbone": self.freeze_backbone,
                "has_projection": self.projection is not None}

    def save(self, path, extra: dict | None = None) -> None:
        header = self.header()
        if extra:
            header["extra"] = extra
        dc.save_checkpoint(path, self.to_arrays(), header)

    @classmethod
    def load(cls, path) -> "ModelParams":
        arrays, header = dc.load_checkpoint(path)
        config = ModelConfig.from_dict(header["model"])
        groups: dict[str, dict[str, np.ndarray]] = {"extractor": {}, "projection": {}, "classifier": {}}
        for name, value in arrays.items():
            part, key = name.split(".", 1)
            if part in groups:
                groups[part][key] = value
        bn = BatchNormState(arrays["bn.running_mean"], arrays["bn.running_var"],
                            config.bn_momentum, config.bn_eps)
        return cls(config, groups["extractor"], groups["classifier"],
                   groups["projection"] if header.get("has_projection") else None,
                   bn, header.get("freeze_backbone", False))


def init_extractor(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    l0, l1 = config.local_widths
    g0, g1 = config.global_widths
    params = {}
    params.update(_layer(rng, "local0", config.in_features, l0))
    params.update(_layer(rng, "local1", l0, l1))
    params.update(_layer(rng, "global0", 2 * l1, g0))
    params.update(_layer(rng, "global1", g0, g1))
    return params


def init_projection(config: ModelConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params = _layer(rng, "hidden", config.feature_dim, config.proj_hidden)
    params.update(_layer(rng, "out", config.proj_hidden, config.proj_dim))
    return params


def init_classifier(config: ModelConfig, rng: np.random.Generator) -> tuple[dict[str, np.ndarray], BatchNormState]:
    params = _layer(rng, "hidden", config.feature_dim, config.cls_hidden)
    params["bn.gamma"] = np.ones(config.cls_hidden)
    params["bn.beta"] = np.zeros(config.cls_hidden)
    params.update(_layer(rng, "out", config.cls_hidden, config.n_class))
    return params, BatchNormState.fresh(config.cls_hidden, config.bn_momentum, config.bn_eps)


def init_model(config: ModelConfig, seed: int, projection: bool = True) -> ModelParams:
    """Seeded Glorot-uniform initialization of all parts."""
    rng = np.random.default_rng(seed)
    extractor = init_extractor(config, rng)
    proj = init_projection(config, rng) if projection else None
    classifier, bn = init_classifier(config, rng)
    return ModelParams(config, extractor, classifier, proj, bn)


def reset_classifier(params: ModelParams, seed: int) -> ModelParams:
    out = params.copy()
    out.classifier, out.bn = init_classifier(params.config, np.random.default_rng(seed))
    return out


def set_freeze(params: ModelParams, frozen: bool) -> ModelParams:
    return replace(params, freeze_backbone=frozen)


# -- forward passes -------------------------------------------------------------

def bind(params: ModelParams, names: Iterable[str] | None = None) -> dict[str, Tensor]:
    """Wrap parameter arrays as graph leaves (optionally only ``names``)."""
    arrays = params.arrays()
    if names is not None:
        arrays = {k: arrays[k] for k in names}
    return {k: dc.parameter(v, k) for k, v in arrays.items()}


def _get(params: ModelParams, tensors: dict[str, Tensor] | None, name: str) -> Tensor:
    if tensors is not None and name in tensors:
        return tensors[name]
    part, key = name.split(".", 1)
    return dc.constant(getattr(params, part)[key], name=name)


def _dense(params, tensors, prefix: str, x: Tensor) -> Tensor:
    return dc.affine(x, _get(params, tensors, f"{prefix}.w"), _get(params, tensors, f"{prefix}.b"))


def extract_features(params: ModelParams, points: np.ndarray,
                     tensors: dict[str, Tensor] | None = None) -> Tensor:
    """Per-point features for a frame ``[N, F]`` or a batch ``[B, N, F]``.

    Returns a ``[B*N, D]`` tensor (rows in input order).
    """
    cfg = params.config
    points = np.asarray(points, dtype=np.float64)
    if points.ndim == 2:
        points = points[None]
    if points.ndim != 3 or points.shape[2] != cfg.in_features:
        raise ModelShapeError(f"expected points [..., {cfg.in_features}], got {points.shape}")
    b, n, f = points.shape
    x = (points.reshape(b * n, f) - np.asarray(cfg.input_offset)) / np.asarray(cfg.input_scale)
    h = dc.constant(x)
    h = dc.relu(_dense(params, tensors, "extractor.local0", h))
    h = dc.relu(_dense(params, tensors, "extractor.local1", h))
    width = h.shape[1]
    pooled = dc.max_reduce(h.reshape(b, n, width), axis=1)
    context = pooled.reshape(b, 1, width).expand((b, n, width)).reshape(b * n, width)
    h = dc.concat([h, context], axis=1)
    h = dc.relu(_dense(params, tensors, "extractor.global0", h))
    return dc.relu(_dense(params, tensors, "extractor.global1", h))


def project(params: ModelParams, features: Tensor,
            tensors: dict[str, Tensor] | None = None) -> Tensor:
    if params.projection is None:
        raise ValueError("model has no projection head")
    h = dc.relu(_dense(params, tensors, "projection.hidden", features))
    return dc.l2_normalize(_dense(params, tensors, "projection.out", h))


def classify(params: ModelParams, features: Tensor, training: bool = False,
             rng: np.random.Generator | None = None,
             tensors: dict[str, Tensor] | None = None) -> Tensor:
    """Class logits ``[rows, n_class]``; dropout and batch statistics only when training."""
    h = _dense(params, tensors, "classifier.hidden", features)
    h = dc.batch_norm(h, _get(params, tensors, "classifier.bn.gamma"),
                      _get(params, tensors, "classifier.bn.beta"), params.bn, training)
    h = dc.dropout(dc.relu(h), params.config.dropout, rng, training)
    return _dense(params, tensors, "classifier.out", h)


def predict_proba(params: ModelParams, points: np.ndarray) -> np.ndarray:
    """Evaluation-mode class probabilities, shape ``[B*N, n_class]``."""
    feats = extract_features(params, points)
    logits = classify(params, feats, training=False)
    return dc.softmax(logits, axis=1).data
