"""Experiment configuration and seed derivation.

All randomness descends from ``ExperimentConfig.seed``. A named stream is
``numpy.random.SeedSequence([seed, STREAMS[name], *extra])`` where
``extra`` is e.g. the client id, so any single component can be replayed
on its own.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import mixing
from .datagen import default_similarity

STREAMS = {
    "data": 0,
    "backbone": 1,
    "adapters": 2,
    "order": 3,
    "noise": 4,
    "pretrain": 5,
    "holdout": 6,
}


def stream(seed: int, name: str, *extra: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), STREAMS[name], *[int(e) for e in extra]])


def stream_rng(seed: int, name: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(stream(seed, name, *extra))


def stream_int(seed: int, name: str, *extra: int) -> int:
    return int(stream(seed, name, *extra).generate_state(1)[0])


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("invalid config:\n  " + "\n  ".join(problems))


@dataclass
class ExperimentConfig:
    run_id: str = "run"
    method: str = mixing.FEDECIDER
    seed: int = 7
    # data
    csv_path: str | None = None
    num_domains: int = 3
    vocab_size: int = 100
    users_per_domain: int = 200
    num_clusters: int = 8
    similarity: list[list[float]] = field(default_factory=lambda: [list(r) for r in default_similarity(3)])
    pooled_size: int = 300
    # backbone
    embed_dim: int = 32
    max_seq_len: int = 20
    num_blocks: int = 2
    use_item_features: bool = True
    pretrain_epochs: int = 10
    pretrain_lr: float = 0.1
    # federated schedule
    rank: int = 8
    rounds: int = 20
    local_epochs: int = 5
    batch_size: int = 64
    lr_adapter: float = 1e-3
    lr_alpha: float = 1e-3
    alpha_init: float = 2.0
    fedprox_mu: float = 0.01
    optimizer: str = "sgd"
    ldp_epsilon: float | None = None
    post_epochs: int = 5
    k_list: list[int] = field(default_factory=lambda: [5, 10])
    output_dir: str | None = None

    def problems(self) -> list[str]:
        out = []
        if self.method not in mixing.ALL_MODES:
            out.append(f"method must be one of {', '.join(mixing.ALL_MODES)}; got {self.method!r}")
        positive_ints = [
            "num_domains", "vocab_size", "users_per_domain", "num_clusters", "embed_dim",
            "max_seq_len", "num_blocks", "rank", "rounds", "local_epochs", "batch_size",
        ]
        for name in positive_ints:
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v <= 0:
                out.append(f"{name} must be a positive integer, got {v!r}")
        for name in ("pooled_size", "pretrain_epochs", "post_epochs"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 0:
                out.append(f"{name} must be a non-negative integer, got {v!r}")
        for name in ("lr_adapter", "lr_alpha", "pretrain_lr", "fedprox_mu"):
            v = getattr(self, name)
            if not isinstance(v, (int, float)) or v < 0:
                out.append(f"{name} must be a non-negative number, got {v!r}")
        if self.optimizer not in ("sgd", "adam"):
            out.append(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if not isinstance(self.alpha_init, (int, float)):
            out.append(f"alpha_init must be a number, got {self.alpha_init!r}")
        if self.ldp_epsilon is not None and not (isinstance(self.ldp_epsilon, (int, float)) and self.ldp_epsilon > 0):
            out.append(f"ldp_epsilon must be > 0 when set, got {self.ldp_epsilon!r}")
        if not self.k_list or any(not isinstance(k, int) or k <= 0 for k in self.k_list):
            out.append(f"k_list must be positive integers, got {self.k_list!r}")
        if self.csv_path is None:
            sim = np.asarray(self.similarity, dtype=float)
            if sim.shape != (self.num_domains, self.num_domains):
                out.append(f"similarity must be {self.num_domains}x{self.num_domains}")
        if isinstance(self.rank, int) and isinstance(self.embed_dim, int) and self.rank > self.embed_dim:
            out.append(f"rank {self.rank} exceeds embed_dim {self.embed_dim}")
        return out

    def validate(self) -> "ExperimentConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown config key {k!r}" for k in unknown])
        return cls(**data)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)
