"""Training configuration and its plain-text ``[section]`` / ``key = value`` form."""
from __future__ import annotations

import configparser
import os
import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

REGIMES = ("supervised", "nonjoint_full", "nonjoint_semi", "joint_full", "joint_semi")


@dataclass(frozen=True)
class TrainConfig:
    regime: str = "nonjoint_full"
    seed: int = 0
    labeled_fraction: float = 0.05
    # contrastive objective
    tau: float = 0.1
    alpha: float = 3.0
    threshold: float = 0.9
    n_point: int = 250
    n_class: int = 5
    queue_capacity: int = 1024
    # data flow
    n_sample: int = 100
    n_minibatch: int = 32
    batch_size: int = 512
    steps_per_epoch: int = 20
    epochs_representation: int = 30
    epochs_finetune: int = 15
    epochs_joint: int = 40
    epochs_supervised: int = 40
    # optimisation
    lr_representation: float = 1e-2
    lr_finetune: float = 5e-4
    lr_joint: float = 1e-2
    lr_supervised: float = 1e-2
    lr_min: float = 0.0
    restart_period: int = 10
    restart_mult: int = 2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime!r}; choose from {', '.join(REGIMES)}")
        if self.n_point % self.n_class:
            raise ValueError(f"n_point={self.n_point} is not divisible by n_class={self.n_class}")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise ValueError("labeled_fraction must be in (0, 1]")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must be in (0, 1)")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.alpha < 0 or (self.regime.startswith("joint") and self.alpha == 0):
            raise ValueError("joint training needs alpha > 0")

    @property
    def per_class(self) -> int:
        return self.n_point // self.n_class

    @property
    def semi(self) -> bool:
        return self.regime.endswith("_semi")

    @property
    def minibatch_frames(self) -> int:
        return 2 * self.n_minibatch if self.semi else self.n_minibatch

    @property
    def ce_points(self) -> int:
        return 2 * self.batch_size if self.semi else self.batch_size

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {
    "run": ("regime", "seed", "labeled_fraction"),
    "contrastive": ("tau", "alpha", "threshold", "n_point", "n_class", "queue_capacity"),
    "data": ("n_sample", "n_minibatch", "batch_size", "steps_per_epoch", "epochs_representation",
             "epochs_finetune", "epochs_joint", "epochs_supervised"),
    "optimizer": ("lr_representation", "lr_finetune", "lr_joint", "lr_supervised", "lr_min",
                  "restart_period", "restart_mult", "beta1", "beta2", "adam_eps"),
}
_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(name: str, raw: str):
    kind = _TYPES[name]
    if kind in ("int", int):
        return int(raw)
    if kind in ("float", float):
        return float(raw)
    return raw.strip()


def write_config(path, config: TrainConfig) -> None:
    parser = configparser.ConfigParser()
    values = config.to_dict()
    for section, keys in _SECTIONS.items():
        parser[section] = {k: repr(values[k]) if isinstance(values[k], float) else str(values[k]) for k in keys}
    with open(path, "w") as fh:
        parser.write(fh)


def parse_overrides(raw: dict[str, str], source: str = "override") -> dict:
    """Type-convert ``key -> text`` pairs; unknown keys are an error."""
    out = {}
    for key, text in raw.items():
        if key not in _TYPES:
            raise ValueError(f"{source}: unknown config key {key!r}")
        out[key] = _coerce(key, text)
    return out


def read_config(path, base: TrainConfig | None = None, **overrides) -> TrainConfig:
    """Load a config file over ``base``; keyword overrides win over the file."""
    parser = configparser.ConfigParser()
    if not parser.read(path):
        raise FileNotFoundError(path)
    values = {}
    for section in parser.sections():
        values.update(parse_overrides(dict(parser[section]), f"{path} [{section}]"))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return (base or TrainConfig()).replace(**values)


def default_run_root() -> Path:
    return Path(os.environ.get("RADCON_RUN_ROOT", "runs"))
