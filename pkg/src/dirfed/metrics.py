"""Ranking metrics and personalized-weight trajectory analytics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_K = (5, 10)
METRIC_COLUMNS = ["run_id", "method", "client", "round", "split", "metric", "value"]


class EvaluationError(ValueError):
    pass


@dataclass
class MetricRecord:
    client: int
    round: int
    split: str
    values: dict[str, float] = field(default_factory=dict)
    num_users: int = 0

    def __getitem__(self, key: str) -> float:
        return self.values[key]


def ground_truth_ranks(scores: np.ndarray, candidates: np.ndarray, truth: Sequence[int]) -> np.ndarray:
    """1-based rank of each user's ground truth; ties go to the lower item id.

    ``scores`` is ``(U, C)`` aligned with ``candidates``.
    """
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    candidates = np.asarray(candidates)
    truth = np.asarray(truth)
    ranks = np.empty(len(truth), dtype=np.int64)
    for u, t in enumerate(truth):
        pos = np.flatnonzero(candidates == t)
        if len(pos) == 0:
            raise EvaluationError(f"ground truth {t} not among candidates")
        gt = scores[u, pos[0]]
        better = np.sum(scores[u] > gt)
        tied_before = np.sum((scores[u] == gt) & (candidates < t))
        ranks[u] = 1 + better + tied_before
    return ranks


def scores_from_ranks(ranks: Iterable[int], k_list: Sequence[int] = DEFAULT_K) -> dict[str, float]:
    ranks = np.asarray(list(ranks))
    out = {}
    for k in k_list:
        hit = ranks <= k
        out[f"H@{k}"] = float(np.mean(hit)) if len(ranks) else 0.0
        gains = np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)
        out[f"N@{k}"] = float(np.mean(gains)) if len(ranks) else 0.0
    return out


def rank_and_score(
    scores: np.ndarray,
    candidates: np.ndarray,
    truth: Sequence[int],
    k_list: Sequence[int] = DEFAULT_K,
    client: int = 0,
    round: int = 0,
    split: str = "test",
) -> MetricRecord:
    ranks = ground_truth_ranks(scores, candidates, truth)
    values = scores_from_ranks(ranks, k_list)
    ordered = {name: values[name] for prefix in ("H", "N") for name in (f"{prefix}@{k}" for k in k_list)}
    return MetricRecord(client, round, split, ordered, len(ranks))


# -- alpha trajectories ----------------------------------------------------------


@dataclass
class AlphaTrajectory:
    rounds: list[int]
    matrices: np.ndarray  # (R, K, K); row i holds client i's weights
    convergence_round: int | None

    def series(self, i: int, j: int) -> np.ndarray:
        return self.matrices[:, i, j]

    def at(self, round_idx: int) -> np.ndarray:
        return self.matrices[self.rounds.index(round_idx)]


def convergence_round(rounds: Sequence[int], matrices: np.ndarray, tol: float = 0.01, window: int = 3) -> int | None:
    """First round after which the max entrywise change stays below ``tol``
    for ``window`` consecutive rounds."""
    matrices = np.asarray(matrices)
    steps = [float(np.max(np.abs(matrices[t + 1] - matrices[t]))) for t in range(len(matrices) - 1)]
    for t in range(len(steps) - window + 1):
        if all(s < tol for s in steps[t:t + window]):
            return rounds[t]
    return None


def alpha_trajectory(logs, tol: float = 0.01, window: int = 3) -> AlphaTrajectory:
    """Collect round-indexed alpha matrices from round logs."""
    snaps = [(log.round, log.alpha) for log in logs if log.alpha is not None]
    if not snaps:
        raise ValueError("no alpha snapshots in the given logs")
    rounds = [r for r, _ in snaps]
    mats = np.stack([np.asarray(a, dtype=np.float64) for _, a in snaps])
    return AlphaTrajectory(rounds, mats, convergence_round(rounds, mats, tol, window))


def write_metric_csv(path, rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(x) for x in row])
    return path


def _fmt(x):
    if isinstance(x, float):
        return repr(x) if math.isfinite(x) else str(x)
    return x
