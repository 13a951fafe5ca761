"""Flat ``key = value`` run configuration with ``#`` comments.

Every key has a default, unknown keys are rejected, and the resolved values
are what gets echoed into run manifests.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .evaluation import DEFAULT_LAMBDAS, DEFAULT_RATES, STRATEGIES
from .pipeline import TrainConfig

DEFAULT_MNIST_DIR = "/root/data/mnist"


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass(frozen=True)
class RunConfig:
    # model and training (mirrors TrainConfig)
    task: str = "classify"
    stage_one_rate: float = 1.0
    patterns: int = 0
    epochs: int = 10
    fine_tune_epochs: int = 10
    batch_size: int = 64
    learning_rate: float = 1e-3
    pattern_learning_rate: float = 5e-2
    schedule: str = "cosine"
    first_layer: str = "columns"
    seed: int = 0
    reduction_ratio: int = 16
    channels: int = 32
    hidden: int = 256
    # data
    dataset_dir: str = DEFAULT_MNIST_DIR
    synthetic: bool = False
    synthetic_count: int = 2000
    train_subset: int = 10000
    test_subset: int = 1000
    # studies
    rates: tuple = DEFAULT_RATES
    strategies: tuple = STRATEGIES
    lambdas: tuple = DEFAULT_LAMBDAS
    noise_sigma: float = 0.0
    workers: int = 1
    out: str = "run"

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in asdict(self).items() if k in names})

    def resolved(self) -> dict:
        d = asdict(self)
        for k in ("rates", "strategies", "lambdas"):
            d[k] = list(d[k])
        return d

    def with_overrides(self, **changes) -> "RunConfig":
        changes = {k: v for k, v in changes.items() if v is not None}
        unknown = set(changes) - {f.name for f in fields(self)}
        if unknown:
            key = sorted(unknown)[0]
            raise ConfigError(f"unknown config key {key!r}", key)
        return replace(self, **changes)


def _convert(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            return tuple(float(s) for s in items) if default and isinstance(default[0], float) else tuple(items)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}", key) from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    known = {f.name: getattr(base, f.name) for f in fields(base)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"unknown config key {key!r}", key)
        values[key] = _convert(key, raw, known[key])
    try:
        cfg = replace(base, **values)
        cfg.train_config()
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())


def format_config(cfg: RunConfig) -> str:
    """Inverse of ``parse_config``."""
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
