"""Run configuration: JSON file + flag overrides, validated into a ``RunConfig``."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .datagen import BenchmarkSpec
from .errors import ParseError, PreconditionError


@dataclass
class LossWeights:
    gamma: float = 1.0        # target pseudo-label fusion loss
    alpha: float = 0.5        # class-agnostic alignment
    beta: float = 0.1         # class-aware alignment
    disentangle: float = 1.0  # source-stage entropy loss

    def validate(self, path: str = "weights") -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, float)) or v < 0:
                raise PreconditionError(f"{path}.{f.name} must be a number >= 0, got {v!r}")


@dataclass
class RunConfig:
    seed: int
    out: str = ""
    data_dir: str | None = None
    benchmark: dict = field(default_factory=dict)
    targets: list[str] | None = None
    tau_ss: float = 0.55
    tau_pl: float = 0.95
    weights: LossWeights = field(default_factory=LossWeights)
    lr: float = 1e-4
    lr_scale: float = 10.0
    momentum: float = 0.9
    weight_decay: float = 5e-4
    eta_min: float = 2e-5
    source_epochs: int = 20
    epochs: int = 20
    batch_size: int = 32
    k_per_class: int = 8
    source_batch_per_subject: int = 8
    blend_mmd_weight: float = 1.0
    hidden_dim: int = 64
    embed_dim: int = 32
    n_mixture: int = 10
    estimator_lr: float = 0.1
    cond_hidden: int = 512
    cond_layers: int = 3
    split: list[float] = field(default_factory=lambda: [0.6, 0.2, 0.2])
    source_holdout: float = 0.2
    mmd_sqrt: bool = False
    mi_variant: bool = True
    identity_aux_loss: bool = False
    pl_refresh_n: int = 1
    select_sources: bool = True
    ablate_kind: str = "loss_components"
    ablate_grid: list | None = None
    baselines: list[str] = field(default_factory=lambda: ["lower_visual", "lower_physio", "lower_fusion",
                                                         "blend_mmd_uda", "upper_finetune"])

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = _build(LossWeights, self.weights, "weights")
        if not self.out:
            self.out = os.environ.get("MSDA_LAB_OUT", "msda_out")
        self.validate()

    @property
    def base_lr(self) -> float:
        return self.lr * self.lr_scale

    def benchmark_spec(self) -> BenchmarkSpec:
        d = dict(self.benchmark)
        d.setdefault("seed", self.seed)
        return BenchmarkSpec.from_dict(d)

    def validate(self) -> None:
        if not isinstance(self.seed, int) or isinstance(self.seed, bool):
            raise PreconditionError(f"seed must be an integer, got {self.seed!r}")
        for key in ("tau_ss", "tau_pl"):
            v = getattr(self, key)
            if not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
                raise PreconditionError(f"{key} must lie in [0, 1], got {v!r}")
        self.weights.validate()
        for key in ("lr", "lr_scale", "estimator_lr"):
            if getattr(self, key) <= 0:
                raise PreconditionError(f"{key} must be > 0")
        if not 0.0 <= self.momentum < 1.0:
            raise PreconditionError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise PreconditionError("weight_decay must be >= 0")
        if self.eta_min > self.base_lr:
            raise PreconditionError(f"eta_min ({self.eta_min}) exceeds the effective learning rate ({self.base_lr})")
        for key in ("source_epochs", "epochs", "batch_size", "k_per_class", "source_batch_per_subject",
                    "hidden_dim", "embed_dim", "n_mixture", "cond_hidden", "cond_layers", "pl_refresh_n"):
            v = getattr(self, key)
            if not isinstance(v, int) or v < 1:
                raise PreconditionError(f"{key} must be a positive integer, got {v!r}")
        if len(self.split) != 3 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) < 0:
            raise PreconditionError(f"split must be three non-negative fractions summing to 1, got {self.split}")
        if not 0.0 < self.source_holdout < 1.0:
            raise PreconditionError("source_holdout must lie in (0, 1)")
        self.benchmark_spec()

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def _build(cls, values: dict, path: str):
    known = {f.name for f in fields(cls)}
    for key in values:
        if key not in known:
            raise PreconditionError(f"unknown config key {path + '.' if path else ''}{key}")
    return cls(**values)


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Load a JSON config (optional) and apply flag overrides; flags win over the file."""
    values: dict = {}
    if path is not None:
        try:
            values = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ParseError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(values, dict):
            raise ParseError(f"{path}: top level must be an object")
    for key, v in (overrides or {}).items():
        if v is None:
            continue
        if key == "weights" and isinstance(v, dict):
            values["weights"] = {**values.get("weights", {}), **v}
        else:
            values[key] = v
    if "seed" not in values:
        raise PreconditionError("missing required key seed")
    return _build(RunConfig, values, "")
