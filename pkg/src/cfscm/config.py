"""Run configuration: a JSON document with strict keys and documented defaults."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from cfscm.ladder import VARIANTS

SEED_ENV = "CFSCM_SEED"
MODEL_KINDS = VARIANTS + ("vq-glm",)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerBlock:
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 64


@dataclass(frozen=True)
class LambdaBlock:
    lr: float = 0.01
    damping: float = 0.1
    init: float = 0.0
    epochs: int = 20
    lr_model: float = 1e-3
    joint: bool = False


@dataclass(frozen=True)
class PredictorBlock:
    hidden: int = 64
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64


@dataclass(frozen=True)
class CodebookBlock:
    latent_dim: int = 8
    size: int = 64
    iterations: int = 50
    delta: float = 1e-8


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: str | None = None
    variant: str = "mediator"
    z_dims: tuple = (4, 8, 16)
    L: int | None = None
    h_dim: int = 32
    bu_dim: int = 64
    hidden: int = 64
    pi: float = 0.9
    optimizer: OptimizerBlock = field(default_factory=OptimizerBlock)
    predictor: PredictorBlock = field(default_factory=PredictorBlock)
    lagrangian: LambdaBlock = field(default_factory=LambdaBlock)
    codebook: CodebookBlock = field(default_factory=CodebookBlock)

    def __post_init__(self):
        if self.variant not in MODEL_KINDS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {MODEL_KINDS}")
        if self.L is not None and self.L != len(self.z_dims):
            raise ConfigError(f"L={self.L} disagrees with z_dims of length {len(self.z_dims)}")
        if not 0.0 <= self.pi <= 1.0:
            raise ConfigError("pi must lie in [0, 1]")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["z_dims"] = list(self.z_dims)
        return doc


_BLOCKS = {"optimizer": OptimizerBlock, "predictor": PredictorBlock, "lagrangian": LambdaBlock,
           "codebook": CodebookBlock}


def _build(cls, doc: dict, where: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{where} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(doc) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {', '.join(unknown)}")
    return doc


def from_json(doc: dict) -> RunConfig:
    doc = dict(_build(RunConfig, doc, "config"))
    for key, cls in _BLOCKS.items():
        if key in doc:
            doc[key] = cls(**_build(cls, doc[key], key))
    if "z_dims" in doc:
        doc["z_dims"] = tuple(int(d) for d in doc["z_dims"])
    try:
        return RunConfig(**doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load(path=None, seed_flag: int | None = None) -> RunConfig:
    """Read a config file (or defaults) and apply seed precedence: flag > environment > file."""
    if path is None:
        doc = {}
    else:
        try:
            doc = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = from_json(doc)
    return with_seed(cfg, resolve_seed(seed_flag, cfg.seed))


def resolve_seed(flag: int | None, configured: int) -> int:
    if flag is not None:
        return int(flag)
    env = os.environ.get(SEED_ENV)
    if env not in (None, ""):
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc
    return configured


def with_seed(cfg: RunConfig, seed: int) -> RunConfig:
    doc = cfg.to_json()
    doc["seed"] = seed
    return from_json(doc)


def defaults_help() -> str:
    lines = ["config keys and defaults:"]
    for f in fields(RunConfig):
        if f.name in _BLOCKS:
            block = _BLOCKS[f.name]()
            inner = ", ".join(f"{g.name}={getattr(block, g.name)!r}" for g in fields(block))
            lines.append(f"  {f.name}: {{{inner}}}")
        else:
            lines.append(f"  {f.name}={getattr(RunConfig(), f.name)!r}")
    return "\n".join(lines)
