"""Run configuration: dataclasses, JSON files, dotted-key overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from .errors import ConfigError
from .losses import STRATEGIES, LossOptions
from .model import ModelConfig
from .numerics import derive_seed
from .synthdata import TaskSpec


@dataclass
class OptimConfig:
    learning_rate: float = 3e-3
    steps: int = 300
    batch_size: int = 16
    warmup_fraction: float = 0.05
    schedule: str = "cosine"
    weight_decay: float = 0.0
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.schedule != "cosine":
            raise ConfigError(f"only the cosine schedule is supported, got {self.schedule!r}")
        if self.steps < 0 or self.batch_size < 1 or not 0 <= self.warmup_fraction < 1:
            raise ConfigError("invalid optimizer settings")


@dataclass
class ArchConfig:
    n_layers: int
    n_heads: int
    hidden_dim: int
    max_seq_len: int = 256
    mlp_ratio: int = 4
    head_agg: str = "mean"

    def model_config(self, vocab_size: int, seed: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, seed=seed, **asdict(self))


@dataclass
class Seeds:
    data: int = 0
    init: int = 0
    train: int = 0
    eval: int = 0


@dataclass
class DataConfig:
    path: str = "data/dataset.jsonl"
    fractions: tuple[float, float, float] = (0.9, 0.05, 0.05)
    min_response_len_for_bias_eval: int = 32


@dataclass
class RunConfig:
    task: TaskSpec = field(default_factory=TaskSpec)
    n_records: int = 6000
    data: DataConfig = field(default_factory=DataConfig)
    teacher: ArchConfig = field(default_factory=lambda: ArchConfig(n_layers=4, n_heads=4, hidden_dim=64))
    student: ArchConfig = field(default_factory=lambda: ArchConfig(n_layers=2, n_heads=2, hidden_dim=32))
    teacher_optim: OptimConfig = field(default_factory=lambda: OptimConfig(learning_rate=3e-3, steps=3000, batch_size=32))
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(learning_rate=1e-2))
    strategy: str = "align-ti"
    d: int = 4
    sampling: str = "nucleus"
    nucleus_p: float = 0.9
    iva_source: str = "teacher"
    iva_layer: str | int = "auto"
    iva_uniform: bool = False
    irs_pairs: int = 256
    seeds: Seeds = field(default_factory=Seeds)
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {sorted(STRATEGIES)}")
        if self.sampling not in ("greedy", "nucleus"):
            raise ConfigError(f"unknown sampling {self.sampling!r}")
        if self.iva_source not in ("teacher", "student"):
            raise ConfigError(f"unknown iva_source {self.iva_source!r}")
        if not (self.iva_layer == "auto" or isinstance(self.iva_layer, int)):
            raise ConfigError(f"iva_layer must be 'auto' or an integer, got {self.iva_layer!r}")
        if not 0 < self.nucleus_p <= 1:
            raise ConfigError("nucleus_p must be in (0, 1]")
        if self.d < 1:
            raise ConfigError("d must be >= 1")

    @property
    def vocab_size(self) -> int:
        return self.task.vocab.size

    def teacher_model_config(self) -> ModelConfig:
        return self.teacher.model_config(self.vocab_size, derive_seed(self.seeds.init, 0))

    def student_model_config(self) -> ModelConfig:
        return self.student.model_config(self.vocab_size, derive_seed(self.seeds.init, 1))

    def loss_options(self, iva_layer: int | None) -> LossOptions:
        return LossOptions(
            strategy=self.strategy, d=self.d, sampling=self.sampling, nucleus_p=self.nucleus_p,
            iva_source=self.iva_source, iva_layer=iva_layer, iva_uniform=self.iva_uniform,
            head_agg=self.teacher.head_agg,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path


_NESTED = {"task": TaskSpec, "data": DataConfig, "teacher": ArchConfig, "student": ArchConfig,
           "teacher_optim": OptimConfig, "optim": OptimConfig, "seeds": Seeds}


def from_dict(d: dict) -> RunConfig:
    known = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs: dict[str, Any] = {}
    base = RunConfig()
    for k, v in d.items():
        if k in _NESTED:
            cls = _NESTED[k]
            if cls is TaskSpec:
                merged = {**getattr(base, k).to_dict(), **v}
                kwargs[k] = TaskSpec.from_dict(merged)
                continue
            sub_known = {f.name for f in dataclasses.fields(cls)}
            bad = set(v) - sub_known
            if bad:
                raise ConfigError(f"unknown keys under {k}: {sorted(bad)}")
            merged = {**asdict(getattr(base, k)), **v}
            if "fractions" in merged:
                merged["fractions"] = tuple(merged["fractions"])
            kwargs[k] = cls(**merged)
        else:
            kwargs[k] = v
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> RunConfig:
    """Config from a JSON file (or defaults) with ``key.sub=value`` overrides applied."""
    d: dict = {}
    if path is not None:
        try:
            d = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = d
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return from_dict(d)
