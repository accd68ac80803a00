"""Run configuration: a flat set of keys read from / echoed to YAML."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import yaml

from .errors import ConfigError

MODES = ("finetune", "double_finetune", "dynamic_finetune", "dlb_sequential", "dlb_random",
         "dynsdpb")


@dataclass
class RunConfig:
    # experiment
    task: str = "gaussian_blobs"
    mode: str = "dynsdpb"
    alpha: float = 0.6
    tau: float = 3.0
    dynamic: bool = True
    tau_min_frac: float = 0.05
    batch_size: int = 32
    epochs: int = 3
    seed: int = 0
    data_seed: Optional[int] = None
    out_dir: str = "runs/default"
    # optimizer
    lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_frac: float = 0.06
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # classifier tasks
    hidden: list = field(default_factory=lambda: [128, 128])
    num_classes: int = 3
    dim: int = 20
    n_train: int = 500
    n_test: int = 500
    label_noise: float = 0.2
    separation: float = 0.5
    # decoder tasks
    d_model: int = 64
    n_heads: int = 4
    n_blocks: int = 2
    max_len: int = 32
    vocab_size: int = 14
    min_str_len: int = 4
    max_str_len: int = 8
    min_digits: int = 1
    max_digits: int = 2
    lmbc_mode: str = "vmm"
    max_new: Optional[int] = None
    # instrumentation
    grad_norm_every: int = 0
    log_factors: bool = True

    @classmethod
    def keys(cls) -> list:
        return [f.name for f in dataclasses.fields(cls)]

    @classmethod
    def from_dict(cls, values: dict) -> "RunConfig":
        unknown = sorted(set(values) - set(cls.keys()))
        if unknown:
            raise ConfigError(
                f"unknown config key(s): {', '.join(unknown)}; valid keys: {', '.join(cls.keys())}")
        cfg = cls(**values)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path, **overrides) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        raw = yaml.safe_load(path.read_text()) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: expected a mapping of keys to values")
        raw.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(raw)

    def replace(self, **changes) -> "RunConfig":
        cfg = dataclasses.replace(self, **changes)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @property
    def family(self) -> str:
        from .data import TASKS

        return TASKS[self.task]

    def validate(self):
        from .data import TASKS

        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.task in TASKS, f"task must be one of {', '.join(TASKS)}, got {self.task!r}")
        need(self.mode in MODES, f"mode must be one of {', '.join(MODES)}, got {self.mode!r}")
        need(self.alpha >= 0, f"alpha must be >= 0, got {self.alpha}")
        need(self.tau > 0, f"tau must be > 0, got {self.tau}")
        need(0 < self.tau_min_frac <= 1, "tau_min_frac must lie in (0, 1]")
        need(isinstance(self.batch_size, int) and self.batch_size > 0 and self.batch_size % 2 == 0,
             f"batch_size must be a positive even integer, got {self.batch_size}")
        need(isinstance(self.epochs, int) and self.epochs >= 1, "epochs must be >= 1")
        need(isinstance(self.seed, int), "seed must be an integer")
        need(self.lr >= 0, "lr must be >= 0")
        need(0 <= self.warmup_frac < 1, "warmup_frac must lie in [0, 1)")
        need(self.lmbc_mode in ("vmm", "token"), "lmbc_mode must be 'vmm' or 'token'")
        need(self.grad_norm_every >= 0, "grad_norm_every must be >= 0")
        need(self.n_train >= self.batch_size, "n_train must be at least batch_size")
        need(self.n_test >= 1, "n_test must be >= 1")
        need(all(isinstance(h, int) and h > 0 for h in self.hidden) and len(self.hidden) > 0,
             "hidden must be a non-empty list of positive integers")
        return self
