"""Experiment configuration: plain dataclasses whose defaults reproduce the reference setup.

Configs are read from JSON.  Each top-level section maps onto one dataclass;
any field left out takes its default, unknown or ill-typed fields are
rejected with a :class:`ConfigError` naming the offending field.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


@dataclass(frozen=True)
class ScenarioConfig:
    num_agents: int = 20
    area: float = 50.0
    comm_range: float = 25.0
    noise: str = "awgn"
    sigma: float = 4.0
    prior_var: float = 10.0

    def check(self):
        _require(self.num_agents >= 1, "scenario.num_agents", "must be >= 1")
        _require(self.area > 0, "scenario.area", "must be positive")
        _require(self.comm_range > 0, "scenario.comm_range", "must be positive")
        _require(self.noise in ("awgn", "range"), "scenario.noise", "must be 'awgn' or 'range'")
        _require(self.sigma >= 0, "scenario.sigma", "must be non-negative")
        _require(self.prior_var > 0, "scenario.prior_var", "must be positive")


@dataclass(frozen=True)
class ModelConfig:
    """Layer widths are fixed by the architecture; ``input_scale`` divides
    positions and ranges before they enter the network and multiplies the
    position read-out."""

    M: int = 16
    D: int = 12
    K: int = 1024
    T: int = 3
    input_scale: float = 50.0

    def check(self):
        for name in ("M", "D", "K", "T"):
            _require(getattr(self, name) >= 1, f"model.{name}", "must be >= 1")
        _require(self.input_scale > 0, "model.input_scale", "must be positive")


@dataclass(frozen=True)
class TrainConfig:
    n_train: int = 3000
    n_val: int = 300
    epochs: int = 500
    patience: int = 30
    alpha: float = 0.1
    beta: float = 0.25
    batch_size: int = 32
    lr: float = 1e-3
    min_delta: float = 1e-6

    def check(self):
        _require(self.n_train >= 1, "train.n_train", "must be >= 1")
        _require(self.n_val >= 1, "train.n_val", "must be >= 1")
        _require(self.epochs >= 1, "train.epochs", "must be >= 1")
        _require(self.patience >= 1, "train.patience", "must be >= 1")
        _require(self.alpha > 0, "train.alpha", "must be positive")
        _require(self.beta > 0, "train.beta", "must be positive")
        _require(self.batch_size >= 1, "train.batch_size", "must be >= 1")
        _require(self.lr >= 0, "train.lr", "must be non-negative")


@dataclass(frozen=True)
class CommsConfig:
    Q: int = 32
    H: int = 32
    neighbors: int = 10
    J: int = 20
    C: int = 8
    N_p: int = 1000
    T_admm: int = 400
    clip_bound: float = 50.0

    def check(self):
        for name in ("Q", "neighbors", "J", "C", "N_p", "T_admm"):
            _require(getattr(self, name) >= 1, f"comms.{name}", "must be >= 1")
        _require(self.H >= 0, "comms.H", "must be >= 0")
        _require(self.clip_bound > 0, "comms.clip_bound", "must be positive")


@dataclass(frozen=True)
class EvalConfig:
    n_test: int = 300
    mode: str = "vq"
    lsq_iterations: int = 100

    def check(self):
        _require(self.n_test >= 1, "eval.n_test", "must be >= 1")
        _require(self.mode in MODES, "eval.mode", f"must be one of {MODES}")


@dataclass(frozen=True)
class SweepConfig:
    kind: str = "codebook"
    K_values: tuple[int, ...] = (64, 256, 1024)
    agent_counts: tuple[int, ...] = (10, 15, 20, 25, 30)

    def check(self):
        _require(self.kind in ("codebook", "agents"), "sweep.kind", "must be 'codebook' or 'agents'")
        _require(all(k >= 1 for k in self.K_values), "sweep.K_values", "entries must be >= 1")
        _require(all(n >= 1 for n in self.agent_counts), "sweep.agent_counts", "entries must be >= 1")


@dataclass(frozen=True)
class GenConfig:
    count: int = 10

    def check(self):
        _require(self.count >= 0, "gen.count", "must be >= 0")


MODES = ("vq", "mpnn", "prior", "lsq")

_SECTIONS = {
    "scenario": ScenarioConfig,
    "model": ModelConfig,
    "train": TrainConfig,
    "comms": CommsConfig,
    "eval": EvalConfig,
    "sweep": SweepConfig,
    "gen": GenConfig,
}


@dataclass(frozen=True)
class RunConfig:
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    comms: CommsConfig = field(default_factory=CommsConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    seeds: tuple[int, ...] = (0,)

    def check(self) -> "RunConfig":
        for name in _SECTIONS:
            getattr(self, name).check()
        _require(len(self.seeds) >= 1, "seeds", "needs at least one seed")
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seeds=(int(seed),))

    def replace(self, **sections) -> "RunConfig":
        """Override fields per section, e.g. ``cfg.replace(model={"K": 64})``."""
        updates = {}
        for name, changes in sections.items():
            if name == "seeds":
                updates[name] = tuple(changes)
            else:
                updates[name] = dataclasses.replace(getattr(self, name), **changes)
        return dataclasses.replace(self, **updates)


def _require(ok: bool, name: str, message: str):
    if not ok:
        raise ConfigError(name, message)


def _build_section(name: str, cls, raw) -> object:
    if not isinstance(raw, dict):
        raise ConfigError(name, "must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"{name}.{key}", "unknown field")
        default = getattr(cls(), key)
        kwargs[key] = _coerce(f"{name}.{key}", default, value)
    return cls(**kwargs)


def _coerce(name: str, default, value):
    if isinstance(default, bool) or value is None:
        raise ConfigError(name, f"unsupported value {value!r}")
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(name, "must be a list")
        return tuple(_coerce(name, default[0] if default else 0, v) for v in value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, f"must be an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, f"must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(name, f"must be a string, got {value!r}")
        return value
    raise ConfigError(name, "unsupported field type")


def config_from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    kwargs = {}
    for key, value in raw.items():
        if key == "seeds":
            kwargs["seeds"] = _coerce("seeds", (0,), value)
        elif key in _SECTIONS:
            kwargs[key] = _build_section(key, _SECTIONS[key], value)
        else:
            raise ConfigError(key, "unknown section")
    return RunConfig(**kwargs).check()


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig().check()
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError("--config", f"no such file {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from exc
    return config_from_dict(raw)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
