"""YAML configuration covering every tunable of the pipeline.

Unknown keys are rejected so typos fail loudly.  ``METATRADE_DATA_DIR``
overrides ``data.dir``.
"""

from __future__ import annotations

import copy
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass

import yaml

DATA_DIR_ENV = "METATRADE_DATA_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    dir: str = "data"
    csv: str = "bars.csv"


@dataclass
class ExitConfig:
    stop_loss_frac: float = 0.01
    target_frac: float = 0.01
    cost: float = 0.0


@dataclass
class MinerConfig:
    support: float = 0.01
    max_patterns: int = 200
    min_length: int = 3
    max_length: int = 6
    budget: int = 10_000
    unit: str = "bar"


@dataclass
class RankerConfig:
    n_trees: int = 200
    max_depth: int = 8
    min_leaf: int = 20
    feature_subsample: str = "sqrt"
    bootstrap: bool = True
    k: int = 10


@dataclass
class AgentSection:
    hidden_dim: int = 64
    reward_scale: float = 1.0


@dataclass
class PpoConfig:
    clip: float = 0.2
    gamma: float = 0.99
    lam: float = 0.95
    epochs: int = 4
    lr: float = 3e-4
    value_coef: float = 0.5
    entropy_coef: float = 0.01
    iterations: int = 100
    trials_per_iteration: int = 16
    tasks_per_trial: int = 2
    max_grad_norm: float | None = None
    checkpoint_every: int = 0


@dataclass
class GridConfig:
    n_symbols: list = field(default_factory=lambda: [1, 3, 6])
    m_days: list = field(default_factory=lambda: [5, 10, 15])
    feature_sets: list = field(default_factory=lambda: ["base"])
    modes: list = field(default_factory=lambda: ["vanilla", "rl2"])
    subsets: int = 4
    seed: int = 0


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    exit: ExitConfig = field(default_factory=ExitConfig)
    miner: MinerConfig = field(default_factory=MinerConfig)
    ranker: RankerConfig = field(default_factory=RankerConfig)
    agent: AgentSection = field(default_factory=AgentSection)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    grid: GridConfig = field(default_factory=GridConfig)

    def to_dict(self):
        return asdict(self)

    def to_yaml(self):
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def data_dir(self):
        return os.environ.get(DATA_DIR_ENV) or self.data.dir

    def updated(self, overrides):
        """Copy with a nested dict of overrides merged in."""
        return _build(Config, _merge(self.to_dict(), overrides), "")


def _merge(base, extra):
    out = copy.deepcopy(base)
    for k, v in (extra or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _coerce(value, default, where):
    if value is None or default is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(value, bool) and isinstance(value, int):
        return value
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    if isinstance(default, (str, list)) and isinstance(value, type(default)):
        return value
    if isinstance(default, str) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return value  # e.g. ranker.feature_subsample given as a count or fraction
    raise ConfigError(f"{where}: expected {type(default).__name__}, got {value!r}")


def _build(cls, raw, prefix):
    if not isinstance(raw, dict):
        raise ConfigError(f"{prefix or 'config'}: expected a mapping")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {prefix or 'config'}: {', '.join(unknown)}")
    defaults = cls()
    kwargs = {}
    for name, value in raw.items():
        where = f"{prefix}.{name}" if prefix else name
        default = getattr(defaults, name)
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, where)
        else:
            kwargs[name] = _coerce(value, default, where)
    return cls(**kwargs)


def load_config(path=None, overrides=None):
    """Read a YAML file (or defaults when ``path`` is None) and validate it."""
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except yaml.YAMLError as exc:
            raise ConfigError(f"invalid YAML in {path}: {exc}") from exc
    cfg = _build(Config, _merge(raw, overrides), "")
    _validate(cfg)
    return cfg


def _validate(cfg):
    from .agent import FEATURE_SETS, MODES

    for fs in cfg.grid.feature_sets:
        if fs not in FEATURE_SETS:
            raise ConfigError(f"grid.feature_sets: unknown {fs!r}; choose from {FEATURE_SETS}")
    for m in cfg.grid.modes:
        if m not in MODES:
            raise ConfigError(f"grid.modes: unknown {m!r}; choose from {MODES}")
    if cfg.grid.subsets < 1:
        raise ConfigError("grid.subsets must be >= 1")
    if any(int(n) < 1 for n in cfg.grid.n_symbols) or any(int(m) < 1 for m in cfg.grid.m_days):
        raise ConfigError("grid sizes must be positive")
    if not 0 < cfg.miner.support <= 1:
        raise ConfigError("miner.support must be in (0, 1]")
    if cfg.miner.unit not in ("bar", "episode"):
        raise ConfigError("miner.unit must be 'bar' or 'episode'")
    if not 2 <= cfg.miner.min_length <= cfg.miner.max_length:
        raise ConfigError("need 2 <= miner.min_length <= miner.max_length")
    if not 0 < cfg.ppo.clip < 1:
        raise ConfigError("ppo.clip must be in (0, 1)")
    if cfg.exit.stop_loss_frac <= 0 or cfg.exit.target_frac <= 0:
        raise ConfigError("exit fractions must be positive")
