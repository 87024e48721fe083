"""Round orchestration and communication accounting.

The server holds no learnable state. For directional strategies it
normalizes every upload per layer and broadcasts the full ordered list;
for the baselines it aggregates factors and installs one adapter set on
every client.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import lowrank, mixing
from .client import ClientState, ProtocolError, Upload

logger = logging.getLogger(__name__)


@dataclass
class RoundLog:
    round: int
    method: str
    num_clients: int
    upload_params: dict[int, int] = field(default_factory=dict)
    upload_bytes: dict[int, int] = field(default_factory=dict)
    download_params: dict[int, int] = field(default_factory=dict)
    download_bytes: dict[int, int] = field(default_factory=dict)
    alpha: np.ndarray | None = None
    val_metrics: dict[int, dict[str, float]] = field(default_factory=dict)
    test_metrics: dict[int, dict[str, float]] = field(default_factory=dict)
    train_loss: dict[int, float] = field(default_factory=dict)
    skipped: list[tuple[int, str]] = field(default_factory=list)
    wall_time: float = 0.0

    def to_record(self) -> dict:
        rec = asdict(self)
        rec["alpha"] = None if self.alpha is None else np.asarray(self.alpha).tolist()
        rec["skipped"] = [list(s) for s in self.skipped]
        return rec

    def to_json(self, include_time: bool = True) -> str:
        rec = self.to_record()
        if not include_time:
            rec.pop("wall_time")
        return json.dumps(rec, sort_keys=True)


def _zero_component(template: lowrank.AdapterPair, source: int, round_idx: int) -> lowrank.DirectionalComponent:
    return lowrank.DirectionalComponent(
        source, round_idx, template.layer_id, np.zeros_like(template.a_mat), np.zeros_like(template.b_mat), 0.0
    )


def _check_uploads(clients: Sequence[ClientState], uploads: Sequence[Upload | None]):
    got = {u.client_id for u in uploads if u is not None}
    for c in clients:
        if c.client_id not in got:
            raise ProtocolError(f"missing upload from client {c.client_id}")
    ranks = {ad.rank for u in uploads for ad in u.adapters}
    if len(ranks) > 1:
        raise ProtocolError(f"mixed adapter ranks across uploads: {sorted(ranks)}")


def aggregate(strategy: str, uploads: Sequence[Upload]) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Factor-wise aggregation for the baseline strategies.

    fedavg / pfedavg / fedprox average A and B separately; ffa_lora averages B
    only and keeps the (shared, frozen) A.
    """
    if not uploads:
        raise ProtocolError("no uploads to aggregate")
    ranks = {ad.rank for u in uploads for ad in u.adapters}
    if len(ranks) > 1:
        raise ProtocolError(f"mixed adapter ranks across uploads: {sorted(ranks)}")
    by_layer: dict[str, list[lowrank.AdapterPair]] = {}
    for u in uploads:
        for ad in u.adapters:
            by_layer.setdefault(ad.layer_id, []).append(ad)
    out = {}
    for lid, pairs in by_layer.items():
        if len(pairs) != len(uploads):
            raise ProtocolError(f"layer {lid} missing from some uploads")
        b_mean = np.mean([p.b_mat for p in pairs], axis=0)
        if strategy in (mixing.FEDAVG, mixing.PFEDAVG, mixing.FEDPROX):
            a = np.mean([p.a_mat for p in pairs], axis=0)
        elif strategy == mixing.FFA_LORA:
            a = pairs[0].a_mat
            if any(not np.array_equal(p.a_mat, a) for p in pairs[1:]):
                raise ProtocolError(f"ffa_lora uploads disagree on frozen A for layer {lid}")
            a = np.array(a)
        else:
            raise ValueError(f"strategy {strategy!r} does not aggregate on the server")
        out[lid] = (a, b_mean)
    return out


class Server:
    def __init__(self, strategy: str, num_clients: int):
        if strategy not in mixing.ALL_MODES:
            raise ValueError(f"unknown strategy {strategy!r}")
        self.strategy = strategy
        self.num_clients = num_clients
        # last published list per layer; published lists are never mutated
        self.published: dict[str, tuple] = {}

    def run_round(self, clients: Sequence[ClientState], round_idx: int) -> RoundLog:
        """Collect uploads, then broadcast (directional) or aggregate (baselines).

        Callers must have finished every client's local training for this
        round before calling.
        """
        t0 = time.perf_counter()
        log = RoundLog(round_idx, self.strategy, len(clients))
        if self.strategy == mixing.LOCAL_ONLY:
            for c in clients:
                log.upload_params[c.client_id] = log.upload_bytes[c.client_id] = 0
                log.download_params[c.client_id] = log.download_bytes[c.client_id] = 0
            log.wall_time = time.perf_counter() - t0
            return log
        uploads = [c.make_upload() for c in clients]
        _check_uploads(clients, uploads)
        for u in uploads:
            log.upload_params[u.client_id] = u.num_params
            log.upload_bytes[u.client_id] = u.num_bytes
        if mixing.is_directional(self.strategy):
            self._broadcast(clients, uploads, round_idx, log)
        else:
            installed = aggregate(self.strategy, uploads)
            pairs = [lowrank.AdapterPair(lid, a, b) for lid, (a, b) in installed.items()]
            payload = lowrank.serialize_adapters(pairs)
            for c in clients:
                c.install_adapters(installed, round_idx)
                log.download_params[c.client_id] = lowrank.adapter_params(pairs)
                log.download_bytes[c.client_id] = len(payload)
        log.wall_time = time.perf_counter() - t0
        return log

    def _broadcast(self, clients, uploads: Sequence[Upload], round_idx: int, log: RoundLog):
        normalize = self.strategy in mixing.NORMALIZED_MODES
        order = sorted(uploads, key=lambda u: u.client_id)
        sent: list[lowrank.AdapterPair] = []
        published = {}
        for lid in [ad.layer_id for ad in order[0].adapters]:
            comps = []
            for u in order:
                pair = next(ad for ad in u.adapters if ad.layer_id == lid)
                if not normalize:
                    comps.append(pair)
                    sent.append(pair)
                    continue
                try:
                    comp = lowrank.normalize_direction(pair, u.client_id, round_idx)
                    sent.append(comp.as_pair())
                except lowrank.ZeroUpdate:
                    log.skipped.append((u.client_id, lid))
                    stale = self.published.get(lid)
                    comp = stale[u.client_id] if stale else _zero_component(pair, u.client_id, round_idx)
                comps.append(comp)
            published[lid] = tuple(comps)
        self.published = published
        payload_params = lowrank.adapter_params(sent)
        payload_bytes = len(lowrank.serialize_adapters(sent))
        for c in clients:
            c.install_components({lid: list(v) for lid, v in published.items()}, round_idx)
            log.download_params[c.client_id] = payload_params
            log.download_bytes[c.client_id] = payload_bytes
        if log.skipped:
            logger.info("round %d: skipped zero updates %s", round_idx, log.skipped)


def finalize_models(clients: Sequence[ClientState], strategy: str, post_epochs: int = 5) -> dict[int, dict]:
    """Final per-client deltas.

    Directional strategies combine the last components with the learned
    weights and train nothing further. pfedavg runs its local adaptation
    epochs here, once; later calls return the cached result.
    """
    out = {}
    for c in clients:
        if c.final_deltas is not None:
            out[c.client_id] = c.final_deltas
            continue
        if strategy == mixing.PFEDAVG and post_epochs > 0:
            c.local_train(post_epochs)
        deltas = {lid: np.array(d) for lid, d in c.build_update().items()}
        for d in deltas.values():
            d.setflags(write=False)
        c.final_deltas = deltas
        out[c.client_id] = deltas
    return out


@dataclass
class CommSummary:
    rows: list[dict]
    totals: dict[str, dict[str, int]]


def comm_accounting(logs: Sequence[RoundLog]) -> CommSummary:
    """Per-round and total parameter/byte counts; checks the download
    identities of fedecider (K x upload) and fedavg (= upload)."""
    if not logs:
        raise ValueError("no round logs")
    rows = []
    totals: dict[str, dict[str, int]] = {}
    for log in logs:
        for cid in sorted(log.upload_params):
            up, down = log.upload_params[cid], log.download_params.get(cid, 0)
            if not log.skipped:
                if log.method in mixing.DIRECTIONAL_MODES and down != log.num_clients * up:
                    raise AssertionError(f"round {log.round} client {cid}: download {down} != K x upload {up}")
                if log.method == mixing.FEDAVG and down != up:
                    raise AssertionError(f"round {log.round} client {cid}: fedavg download {down} != upload {up}")
            rows.append(
                {
                    "method": log.method,
                    "round": log.round,
                    "client": cid,
                    "upload_params": up,
                    "download_params": down,
                    "upload_bytes": log.upload_bytes.get(cid, 0),
                    "download_bytes": log.download_bytes.get(cid, 0),
                }
            )
            t = totals.setdefault(log.method, dict.fromkeys(
                ("upload_params", "download_params", "upload_bytes", "download_bytes"), 0))
            for key in t:
                t[key] += rows[-1][key]
    return CommSummary(rows, totals)
