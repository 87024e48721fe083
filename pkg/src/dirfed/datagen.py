"""Synthetic multi-domain interaction data and CSV ingestion.

Every domain owns ``vocab_size`` items partitioned into clusters. Cluster
prototypes of different domains are correlated so that the cosine between
two domains' flattened prototype matrices equals the requested similarity.
Users walk a Markov chain over clusters whose transition scores come from
the prototypes and a per-domain successor operator drawn with the same
correlation, so similar domains also behave alike.

Global item ids: 0 is padding, domain ``k`` owns
``[1 + k * vocab_size, 1 + (k + 1) * vocab_size)``.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)

CSV_HEADER = ["user_id", "item_id", "timestamp", "domain"]


class ConfigError(ValueError):
    pass


class ParseError(ValueError):
    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")


class DataError(ValueError):
    pass


def default_similarity(k: int = 3) -> tuple[tuple[float, ...], ...]:
    s = np.full((k, k), 0.1)
    np.fill_diagonal(s, 1.0)
    if k >= 2:
        s[0, 1] = s[1, 0] = 0.8
    return tuple(tuple(float(x) for x in row) for row in s)


@dataclass(frozen=True)
class DomainWorld:
    num_domains: int = 3
    vocab_size: int = 100
    users_per_domain: int = 200
    num_clusters: int = 8
    similarity: tuple[tuple[float, ...], ...] = field(default_factory=default_similarity)
    seed: int = 7
    max_seq_len: int = 20
    min_seq_len: int = 5
    pooled_size: int = 300
    feature_dim: int = 32
    transition_temperature: float = 3.0
    item_noise: float = 0.3
    popularity_exponent: float = 1.0
    behavior_sharpness: float = 2.0

    @property
    def similarity_matrix(self) -> np.ndarray:
        return np.asarray(self.similarity, dtype=np.float64)

    def domain_offset(self, k: int) -> int:
        return 1 + k * self.vocab_size

    @property
    def total_items(self) -> int:
        return self.num_domains * self.vocab_size

    def validate(self):
        problems = []
        K = self.num_domains
        if K < 2:
            problems.append(f"num_domains must be >= 2, got {K}")
        if self.num_clusters < 2 or self.vocab_size < self.num_clusters:
            problems.append("need vocab_size >= num_clusters >= 2")
        if self.users_per_domain < 10:
            problems.append(f"users_per_domain must be >= 10, got {self.users_per_domain}")
        if not 3 <= self.min_seq_len <= self.max_seq_len:
            problems.append("need 3 <= min_seq_len <= max_seq_len")
        if self.num_clusters * self.feature_dim < K:
            problems.append("num_clusters * feature_dim must be >= num_domains")
        s = self.similarity_matrix
        if s.shape != (K, K):
            problems.append(f"similarity must be {K}x{K}, got {s.shape}")
        else:
            if not np.allclose(s, s.T):
                problems.append("similarity must be symmetric")
            if not np.allclose(np.diag(s), 1.0):
                problems.append("similarity diagonal must be 1")
            if np.any(s < 0) or np.any(s > 1):
                problems.append("similarity entries must lie in [0, 1]")
        if problems:
            raise ConfigError("; ".join(problems))


def psd_factor(s: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """``L`` with ``L @ L.T == s``; raises for indefinite ``s``."""
    evals, evecs = np.linalg.eigh(s)
    if evals.min() < -tol:
        raise ConfigError(f"similarity matrix is not positive semidefinite (min eigenvalue {evals.min():.3g})")
    return evecs * np.sqrt(np.clip(evals, 0.0, None))


def behavior_factor(s: np.ndarray, sharpness: float) -> np.ndarray:
    b = 1.0 - (1.0 - s) ** sharpness
    evals, evecs = np.linalg.eigh(b)
    f = evecs * np.sqrt(np.clip(evals, 0.0, None))
    return f / np.linalg.norm(f, axis=1, keepdims=True)


@dataclass
class Split:
    train: list[list[int]]
    val: list[tuple[list[int], int]]
    test: list[tuple[list[int], int]]
    users: list
    excluded: int = 0


def split_leave_one_out(sequences: Sequence[Sequence[int]], users: Sequence | None = None) -> Split:
    """Last item is the test target, second-to-last the validation target.

    Sequences shorter than 3 are dropped and counted in ``excluded``.
    """
    users = list(range(len(sequences))) if users is None else list(users)
    split = Split([], [], [], [])
    for user, seq in zip(users, sequences):
        seq = list(seq)
        if len(seq) < 3:
            split.excluded += 1
            continue
        split.train.append(seq[:-2])
        split.val.append((seq[:-2], seq[-2]))
        split.test.append((seq[:-1], seq[-1]))
        split.users.append(user)
    return split


@dataclass
class InteractionDataset:
    domain: int
    item_offset: int
    num_items: int
    users: list
    sequences: list[list[int]]
    split: Split
    # raw item label -> global id; filled on ingestion
    item_index: dict | None = None

    @property
    def candidates(self) -> np.ndarray:
        return np.arange(self.item_offset, self.item_offset + self.num_items)


@dataclass
class GeneratedWorld:
    world: DomainWorld
    datasets: list[InteractionDataset]
    pooled: list[tuple[int, list[int]]]  # (domain, sequence)
    prototypes: np.ndarray  # (K, C, m)
    item_clusters: np.ndarray  # (K, V)
    item_features: np.ndarray  # (K * V, m), row g-1 for global id g
    transitions: np.ndarray  # (K, C, C)

    def measured_similarity(self) -> np.ndarray:
        return prototype_cosines(self.prototypes)


def prototype_cosines(prototypes: np.ndarray) -> np.ndarray:
    flat = prototypes.reshape(prototypes.shape[0], -1)
    flat = flat / np.linalg.norm(flat, axis=1, keepdims=True)
    return flat @ flat.T


def generate_world(world: DomainWorld) -> GeneratedWorld:
    world.validate()
    K, V, C, m = world.num_domains, world.vocab_size, world.num_clusters, world.feature_dim
    factor = psd_factor(world.similarity_matrix)
    rng = np.random.default_rng(world.seed)

    # orthonormal shared draws make the flattened cosines exactly S
    q, _ = np.linalg.qr(rng.standard_normal((C * m, K)))
    protos = (q @ factor.T).T.reshape(K, C, m) * np.sqrt(C)

    clusters = np.stack([rng.permutation(np.arange(V) % C) for _ in range(K)])
    features = np.empty((K * V, m))
    for k in range(K):
        noise = rng.standard_normal((V, m)) * world.item_noise / np.sqrt(m)
        features[k * V:(k + 1) * V] = protos[k, clusters[k]] + noise

    # cluster-to-cluster logits correlated through the sharpened similarity
    shared_logits = rng.standard_normal((K, C, C))
    logits = np.einsum("ik,kab->iab", behavior_factor(world.similarity_matrix, world.behavior_sharpness), shared_logits)
    logits = world.transition_temperature * logits
    logits -= logits.max(axis=2, keepdims=True)
    transitions = np.exp(logits)
    transitions /= transitions.sum(axis=2, keepdims=True)

    popularity = []
    for k in range(K):
        weights = np.empty(V)
        for c in range(C):
            members = np.flatnonzero(clusters[k] == c)
            ranks = rng.permutation(len(members))
            w = 1.0 / (ranks + 1.0) ** world.popularity_exponent
            weights[members] = w / w.sum()
        popularity.append(weights)

    def walk(k: int) -> list[int]:
        length = int(rng.integers(world.min_seq_len, world.max_seq_len + 1))
        c = int(rng.integers(C))
        seq = []
        for _ in range(length):
            members = np.flatnonzero(clusters[k] == c)
            probs = popularity[k][members]
            item = int(rng.choice(members, p=probs / probs.sum()))
            seq.append(world.domain_offset(k) + item)
            c = int(rng.choice(C, p=transitions[k, c]))
        return seq

    datasets = []
    user_id = 0
    for k in range(K):
        users, seqs = [], []
        for _ in range(world.users_per_domain):
            users.append(user_id)
            seqs.append(walk(k))
            user_id += 1
        datasets.append(
            InteractionDataset(k, world.domain_offset(k), V, users, seqs, split_leave_one_out(seqs, users))
        )
    pooled = [(j % K, walk(j % K)) for j in range(world.pooled_size)]
    logger.debug("generated %d domains x %d users, %d pooled", K, world.users_per_domain, len(pooled))
    return GeneratedWorld(world, datasets, pooled, protos, clusters, features, transitions)


def make_examples(sequences: Sequence[Sequence[int]], max_len: int) -> list[tuple[list[int], int]]:
    """Every next-item prediction inside each sequence, contexts truncated to
    the last ``max_len`` items."""
    out = []
    for seq in sequences:
        for t in range(1, len(seq)):
            out.append((list(seq[max(0, t - max_len):t]), seq[t]))
    return out


# -- CSV ---------------------------------------------------------------------


def export_csv(datasets: Sequence[InteractionDataset], path) -> Path:
    """Write ``user_id,item_id,timestamp,domain`` rows; item ids are
    domain-local and timestamps are sequence positions."""
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_HEADER)
        for ds in datasets:
            for user, seq in zip(ds.users, ds.sequences):
                for t, item in enumerate(seq):
                    writer.writerow([user, item - ds.item_offset, t, ds.domain])
    return path


def _sort_key(label: str):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


def ingest_csv(path) -> list[InteractionDataset]:
    """Read an interaction log and build per-domain leave-one-out datasets.

    Domains are ordered by label (numerically when possible) and items are
    given dense ids in label order within each domain.
    """
    path = Path(path)
    rows: dict[str, dict[str, list]] = {}
    user_domain: dict[str, str] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != CSV_HEADER:
            raise ParseError(f"expected header {','.join(CSV_HEADER)}, got {header}", 1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise ParseError(f"expected 4 fields, got {len(row)}", lineno)
            user, item, ts_raw, domain = (x.strip() for x in row)
            if not user or not item or not domain:
                raise ParseError("empty field", lineno)
            try:
                ts = float(ts_raw)
            except ValueError:
                raise ParseError(f"non-numeric timestamp {ts_raw!r}", lineno) from None
            if not np.isfinite(ts):
                raise ParseError(f"non-finite timestamp {ts_raw!r}", lineno)
            owner = user_domain.setdefault(user, domain)
            if owner != domain:
                raise DataError(f"user {user!r} appears in domains {owner!r} and {domain!r} (line {lineno})")
            rows.setdefault(domain, {}).setdefault(user, []).append((ts, lineno, item))

    datasets = []
    offset = 1
    for k, domain in enumerate(sorted(rows, key=_sort_key)):
        per_user = rows[domain]
        labels = sorted({item for events in per_user.values() for _, _, item in events}, key=_sort_key)
        index = {label: offset + i for i, label in enumerate(labels)}
        users, seqs = [], []
        for user in sorted(per_user, key=_sort_key):
            events = sorted(per_user[user], key=lambda e: (e[0], e[1]))
            users.append(user)
            seqs.append([index[item] for _, _, item in events])
        datasets.append(
            InteractionDataset(k, offset, len(labels), users, seqs, split_leave_one_out(seqs, users), index)
        )
        offset += len(labels)
    return datasets
