"""Run configuration: a flat JSON file whose keys mirror the CLI flags."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ConfigurationError
from .learning import STRATEGIES, Hyperparams
from .navsim import BenchmarkConfig

CONFIG_DIR_ENV = "LIFELONG_NAV_CONFIG_DIR"
DEFAULT_CONFIG_NAME = "default.json"

HP_KEYS = tuple(f.name for f in fields(Hyperparams))
BENCH_KEYS = tuple(f.name for f in fields(BenchmarkConfig))
RUN_KEYS = ("seed", "strategy", "out", "benchmark", "checkpoint", "resume", "max_tasks", "verbose")


@dataclass
class RunConfig:
    seed: int = 0
    strategy: str = "uniwalker"
    out: str | None = None
    benchmark: str | None = None
    checkpoint: str | None = None
    resume: str | None = None
    max_tasks: int | None = None
    verbose: int = 0
    hp: dict = field(default_factory=dict)
    bench: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigurationError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigurationError(f"seed must be a non-negative integer, got {self.seed!r}")

    def hyperparams(self) -> Hyperparams:
        return Hyperparams.from_dict(self.hp)

    def benchmark_config(self) -> BenchmarkConfig:
        return BenchmarkConfig(**self.bench)

    def to_flat(self) -> dict:
        d = {k: getattr(self, k) for k in RUN_KEYS}
        d.update(self.hp)
        d.update(self.bench)
        return d


def from_flat(d: dict) -> RunConfig:
    unknown = set(d) - set(RUN_KEYS) - set(HP_KEYS) - set(BENCH_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    run = {k: d[k] for k in RUN_KEYS if k in d}
    hp = {k: d[k] for k in HP_KEYS if k in d}
    bench = {k: d[k] for k in BENCH_KEYS if k in d}
    cfg = RunConfig(**run, hp=hp, bench=bench)
    cfg.hyperparams()  # validate early
    cfg.benchmark_config()
    return cfg


def resolve_config_path(name: str | None) -> Path | None:
    """An explicit path wins; otherwise look in the configured default directory."""
    base = os.environ.get(CONFIG_DIR_ENV)
    if name is None:
        if base and (Path(base) / DEFAULT_CONFIG_NAME).is_file():
            return Path(base) / DEFAULT_CONFIG_NAME
        return None
    p = Path(name)
    if p.is_file():
        return p
    if base and (Path(base) / name).is_file():
        return Path(base) / name
    raise ConfigurationError(f"config file not found: {name}")


def load_config_file(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            d = json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {path} is not valid JSON: {exc}") from None
    if not isinstance(d, dict):
        raise ConfigurationError(f"config {path} must hold a JSON object")
    return d


def merge(file_values: dict, flag_values: dict) -> RunConfig:
    """Flags given on the command line override the file."""
    merged = dict(file_values)
    merged.update({k: v for k, v in flag_values.items() if v is not None})
    return from_flat(merged)


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.to_flat(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def effective(cfg: RunConfig) -> dict:
    """The fully-resolved settings, defaults included, for manifests."""
    return {"run": {k: getattr(cfg, k) for k in RUN_KEYS},
            "hp": cfg.hyperparams().to_dict(),
            "bench": asdict(cfg.benchmark_config())}
