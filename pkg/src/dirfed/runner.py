"""End-to-end experiment runner and result emission."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import backbone as bb
from . import datagen, metrics, mixing
from .client import ClientSettings, ClientState, init_adapters
from .config import ExperimentConfig, stream_int, stream_rng
from .server import CommSummary, RoundLog, Server, comm_accounting, finalize_models

logger = logging.getLogger(__name__)

_BACKBONE_CACHE: dict[tuple, bb.BackboneParams] = {}


@dataclass
class RunResult:
    config: ExperimentConfig
    logs: list[RoundLog]
    final: dict[int, metrics.MetricRecord]
    best_val: dict[int, metrics.MetricRecord]
    comm: CommSummary
    trajectory: metrics.AlphaTrajectory | None
    pretrain_history: list[float] = field(default_factory=list)
    excluded_users: int = 0

    def mean_final(self, name: str = "H@5") -> float:
        return float(np.mean([rec.values[name] for rec in self.final.values()]))

    def mean_best_val(self, name: str = "H@5") -> float:
        return float(np.mean([rec.values[name] for rec in self.best_val.values()]))


# -- setup -------------------------------------------------------------------------


def build_world(config: ExperimentConfig):
    """Client datasets, pooled pretraining sequences, and item features (or None)."""
    if config.csv_path is None:
        world = datagen.DomainWorld(
            num_domains=config.num_domains,
            vocab_size=config.vocab_size,
            users_per_domain=config.users_per_domain,
            num_clusters=config.num_clusters,
            similarity=tuple(tuple(float(x) for x in row) for row in config.similarity),
            seed=stream_int(config.seed, "data"),
            max_seq_len=config.max_seq_len,
            pooled_size=config.pooled_size,
            feature_dim=config.embed_dim,
        )
        gen = datagen.generate_world(world)
        return gen.datasets, gen.pooled, gen.item_features
    datasets, pooled = _holdout_pooled(datagen.ingest_csv(config.csv_path), config)
    return datasets, pooled, None


def _holdout_pooled(datasets, config: ExperimentConfig):
    """Move ``pooled_size`` seeded-random users out of the client datasets."""
    rng = stream_rng(config.seed, "holdout")
    everyone = [(k, u) for k, ds in enumerate(datasets) for u in range(len(ds.users))]
    n = min(config.pooled_size, len(everyone))
    chosen = {everyone[i] for i in rng.choice(len(everyone), size=n, replace=False)} if n else set()
    pooled, kept = [], []
    for k, ds in enumerate(datasets):
        users, seqs = [], []
        for u, (user, seq) in enumerate(zip(ds.users, ds.sequences)):
            if (k, u) in chosen:
                pooled.append((k, seq))
            else:
                users.append(user)
                seqs.append(seq)
        kept.append(
            datagen.InteractionDataset(
                ds.domain, ds.item_offset, ds.num_items, users, seqs,
                datagen.split_leave_one_out(seqs, users), ds.item_index,
            )
        )
    return kept, pooled


def pooled_batches(pooled, datasets, max_len: int, batch_size: int, rng: np.random.Generator):
    """Shuffled pretraining batches grouped by (domain, context length)."""
    examples = [(k, ctx, tgt) for k, seq in pooled for ctx, tgt in datagen.make_examples([seq], max_len)]
    order = rng.permutation(len(examples))
    groups: dict[tuple[int, int], list] = {}
    for i in order:
        k, ctx, tgt = examples[i]
        groups.setdefault((k, len(ctx)), []).append((ctx, tgt))
    chunks = [
        (key, members[s:s + batch_size])
        for key in sorted(groups)
        for members in [groups[key]]
        for s in range(0, len(members), batch_size)
    ]
    out = []
    for n in rng.permutation(len(chunks)):
        (k, _), members = chunks[n]
        out.append(
            bb.make_batch([c for c, _ in members], [t for _, t in members], datasets[k].candidates, ("pretrain", k))
        )
    return out


def build_backbone(config: ExperimentConfig, datasets, pooled, item_features):
    """Initialize, pretrain on the pooled sample, and freeze (memoized per process)."""
    vocab = 1 + sum(ds.num_items for ds in datasets)
    key = (
        config.seed, config.csv_path, config.num_domains, config.vocab_size, config.users_per_domain,
        config.num_clusters, json.dumps(config.similarity), config.pooled_size, config.embed_dim,
        config.max_seq_len, config.num_blocks, config.use_item_features, config.pretrain_epochs,
        config.pretrain_lr, config.batch_size,
    )
    if key in _BACKBONE_CACHE:
        params, history = _BACKBONE_CACHE[key]
        return params, history
    bcfg = bb.BackboneConfig(
        vocab_size=vocab,
        embed_dim=config.embed_dim,
        max_seq_len=config.max_seq_len,
        num_blocks=config.num_blocks,
        seed=stream_int(config.seed, "backbone"),
    )
    feats = item_features if (config.use_item_features and item_features is not None) else None
    params = bb.init_backbone(bcfg, feats)
    rng = stream_rng(config.seed, "pretrain")
    if pooled and config.pretrain_epochs > 0:
        params, history = bb.pretrain_backbone(
            params,
            lambda _e: pooled_batches(pooled, datasets, config.max_seq_len, config.batch_size, rng),
            config.pretrain_epochs,
            config.pretrain_lr,
        )
    else:
        params, history = params.freeze(), []
    _BACKBONE_CACHE[key] = (params, history)
    return params, history


def build_clients(config: ExperimentConfig, datasets, backbone: bb.BackboneParams) -> list[ClientState]:
    settings = ClientSettings(
        rank=config.rank,
        lr_adapter=config.lr_adapter,
        lr_alpha=config.lr_alpha,
        batch_size=config.batch_size,
        alpha_init=config.alpha_init,
        fedprox_mu=config.fedprox_mu,
        ldp_epsilon=config.ldp_epsilon,
        optimizer=config.optimizer,
    )
    # one shared adapter initialization, as a server would distribute
    init = init_adapters(backbone.target_shapes(), config.rank, stream_rng(config.seed, "adapters"))
    return [
        ClientState(
            client_id=k,
            num_clients=len(datasets),
            dataset=ds,
            backbone=backbone,
            mode=config.method,
            settings=settings,
            own=init,
            rng=stream_rng(config.seed, "order", k),
            noise_seed=stream_int(config.seed, "noise", k),
        )
        for k, ds in enumerate(datasets)
    ]


# -- main loop -----------------------------------------------------------------------


def _best_round(logs: list[RoundLog], cid: int) -> RoundLog:
    # highest val H@5, then N@5, earliest round first
    return max(logs, key=lambda lg: (lg.val_metrics[cid]["H@5"], lg.val_metrics[cid]["N@5"], -lg.round))


def run_experiment(config: ExperimentConfig, out_dir=None) -> RunResult:
    """Pretrain, run the local/communication rounds, finalize, evaluate.

    Each round ``t``: every client trains ``local_epochs`` epochs (the first
    round is the pre-communication phase for directional methods), the
    server collects uploads and broadcasts or aggregates, then every client
    is evaluated on val and test.
    """
    config.validate()
    datasets, pooled, features = build_world(config)
    backbone, history = build_backbone(config, datasets, pooled, features)
    clients = build_clients(config, datasets, backbone)
    server = Server(config.method, len(clients))
    checksum = backbone.checksum()
    k_list = tuple(config.k_list)

    logs: list[RoundLog] = []
    for t in range(1, config.rounds + 1):
        losses = {c.client_id: c.local_train(config.local_epochs)[-1] for c in clients}
        # barrier: uploads are collected only after every client finished
        log = server.run_round(clients, t)
        log.train_loss = losses
        for c in clients:
            c.current_round = t
            log.val_metrics[c.client_id] = c.evaluate("val", k_list).values
            log.test_metrics[c.client_id] = c.evaluate("test", k_list).values
        if mixing.is_directional(config.method):
            log.alpha = np.stack([c.alpha.copy() for c in clients])
        logs.append(log)
        logger.info(
            "%s round %d: val H@5 %s", config.method, t,
            " ".join(f"{log.val_metrics[c]['H@5']:.3f}" for c in sorted(log.val_metrics)),
        )

    finals = finalize_models(clients, config.method, config.post_epochs)
    final = {}
    for c in clients:
        rec = c.evaluate("test", k_list, deltas=finals[c.client_id])
        rec.round, rec.split = config.rounds, "final_test"
        final[c.client_id] = rec
    best = {}
    for c in clients:
        lg = _best_round(logs, c.client_id)
        best[c.client_id] = metrics.MetricRecord(c.client_id, lg.round, "best_val_test", dict(lg.test_metrics[c.client_id]))
    if backbone.checksum() != checksum:
        raise bb.ContractViolation("frozen backbone changed during the run")

    trajectory = metrics.alpha_trajectory(logs) if mixing.is_directional(config.method) else None
    result = RunResult(
        config, logs, final, best, comm_accounting(logs), trajectory, history,
        sum(ds.split.excluded for ds in datasets),
    )
    out_dir = out_dir if out_dir is not None else config.output_dir
    if out_dir is not None:
        emit_results(result, out_dir)
    return result


# -- emission ----------------------------------------------------------------------------


def metric_rows(result: RunResult):
    cfg = result.config
    for log in result.logs:
        for split, table in (("val", log.val_metrics), ("test", log.test_metrics)):
            for cid in sorted(table):
                for name, value in table[cid].items():
                    yield [cfg.run_id, cfg.method, cid, log.round, split, name, value]
    for table in (result.final, result.best_val):
        for cid in sorted(table):
            rec = table[cid]
            for name, value in rec.values.items():
                yield [cfg.run_id, cfg.method, cid, rec.round, rec.split, name, value]


def alpha_rows(result: RunResult):
    if result.trajectory is None:
        return
    for r, mat in zip(result.trajectory.rounds, result.trajectory.matrices):
        for i in range(mat.shape[0]):
            for j in range(mat.shape[1]):
                yield [result.config.run_id, r, i, j, float(mat[i, j])]


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(x) if isinstance(x, float) else x for x in row])


def emit_results(result: RunResult, out_dir) -> dict[str, Path]:
    """Write metric, alpha, comm, and plot-ready tables plus round logs and
    the resolved config. Re-emission overwrites with identical content."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    cfg = result.config
    paths = {
        "metrics": out / "metrics.csv",
        "alpha": out / "alpha.csv",
        "comm": out / "comm.csv",
        "alpha_long": out / "alpha_plot.csv",
        "round_logs": out / "round_logs.jsonl",
        "config": out / "config.json",
        "summary": out / "summary.json",
    }
    metrics.write_metric_csv(paths["metrics"], metric_rows(result))
    _write_csv(paths["alpha"], ["run_id", "round", "i", "j", "alpha"], alpha_rows(result))
    comm_cols = ["round", "client", "upload_params", "download_params", "upload_bytes", "download_bytes"]
    _write_csv(
        paths["comm"],
        ["run_id", "method"] + comm_cols,
        ([cfg.run_id, row["method"]] + [row[c] for c in comm_cols] for row in result.comm.rows),
    )
    _write_csv(
        paths["alpha_long"],
        ["run_id", "method", "client", "source", "series", "round", "alpha"],
        (
            [run_id, cfg.method, i, j, f"alpha_{i + 1}{j + 1}", r, a]
            for run_id, r, i, j, a in alpha_rows(result)
        ),
    )
    with paths["round_logs"].open("w", encoding="utf-8") as fh:
        for log in result.logs:
            fh.write(log.to_json() + "\n")
    paths["config"].write_text(cfg.to_json() + "\n", encoding="utf-8")
    summary = {
        "run_id": cfg.run_id,
        "method": cfg.method,
        "final_test_mean": {k: result.mean_final(k) for k in next(iter(result.final.values())).values},
        "best_val_test_mean": {k: result.mean_best_val(k) for k in next(iter(result.best_val.values())).values},
        "convergence_round": None if result.trajectory is None else result.trajectory.convergence_round,
        "comm_totals": result.comm.totals,
        "excluded_users": result.excluded_users,
        "pretrain_history": result.pretrain_history,
    }
    paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return paths
