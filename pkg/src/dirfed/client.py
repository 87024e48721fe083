"""Per-domain client: local training, update construction, uploads, evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import backbone as bb
from . import lowrank, metrics, mixing
from .datagen import InteractionDataset, make_examples

logger = logging.getLogger(__name__)

PRE_COMMUNICATION = "pre_communication"
FEDERATED = "federated"


class ProtocolError(RuntimeError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class ClientSettings:
    rank: int = 8
    lr_adapter: float = 1e-3
    lr_alpha: float = 1e-3
    batch_size: int = 64
    alpha_init: float = 2.0
    fedprox_mu: float = 0.01
    ldp_epsilon: float | None = None
    ldp_clip: float = 0.1
    optimizer: str = "sgd"  # "sgd" or "adam"


@dataclass
class Upload:
    client_id: int
    adapters: list[lowrank.AdapterPair]
    payload: bytes

    @property
    def num_params(self) -> int:
        return lowrank.adapter_params(self.adapters)

    @property
    def num_bytes(self) -> int:
        return len(self.payload)


def init_adapters(shapes: Mapping[str, tuple[int, int]], rank: int, rng: np.random.Generator):
    """``A`` uniform in ``[-1/sqrt(r), 1/sqrt(r)]``, ``B`` zero."""
    out = {}
    bound = 1.0 / np.sqrt(rank)
    for lid, (d_out, d_in) in shapes.items():
        if not 1 <= rank <= min(d_out, d_in):
            raise ConfigError(f"rank {rank} invalid for layer {lid} of shape {(d_out, d_in)}")
        out[lid] = (rng.uniform(-bound, bound, size=(rank, d_in)), np.zeros((d_out, rank)))
    return out


def apply_ldp_noise(
    adapters: Sequence[lowrank.AdapterPair], epsilon: float, seed, clip: float = 0.1
) -> list[lowrank.AdapterPair]:
    """Clip every entry to ``[-clip, clip]`` and add Laplace noise of scale
    ``2 * clip / epsilon``."""
    if not epsilon > 0:
        raise ConfigError(f"LDP epsilon must be > 0, got {epsilon}")
    rng = np.random.default_rng(seed)
    scale = 2.0 * clip / epsilon
    out = []
    for ad in adapters:
        a = np.clip(ad.a_mat, -clip, clip) + rng.laplace(0.0, scale, size=ad.a_mat.shape)
        b = np.clip(ad.b_mat, -clip, clip) + rng.laplace(0.0, scale, size=ad.b_mat.shape)
        out.append(lowrank.AdapterPair(ad.layer_id, a, b))
    return out


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(eq=False)
class ClientState:
    client_id: int
    num_clients: int
    dataset: InteractionDataset
    backbone: bb.BackboneParams
    mode: str
    settings: ClientSettings
    own: dict[str, tuple[np.ndarray, np.ndarray]]
    rng: np.random.Generator
    noise_seed: int = 0
    phase: str = PRE_COMMUNICATION
    alpha: np.ndarray = field(default=None)
    received: dict[str, list] | None = None
    anchor: dict[str, tuple[np.ndarray, np.ndarray]] | None = None
    current_round: int = 0
    final_deltas: dict | None = None
    _examples: list | None = field(default=None, repr=False)
    _opt: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.mode not in mixing.ALL_MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.alpha is None:
            if self.mode == mixing.WO_PER:
                self.alpha = np.full(self.num_clients, 1.0 / self.num_clients)
            else:
                self.alpha = np.full(self.num_clients, float(self.settings.alpha_init))
        self.own = {lid: (np.array(a, dtype=np.float64), np.array(b, dtype=np.float64)) for lid, (a, b) in self.own.items()}
        if self.anchor is None and self.mode == mixing.FEDPROX:
            self.anchor = {lid: (_frozen(a), _frozen(b)) for lid, (a, b) in self.own.items()}
        if self.settings.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.settings.optimizer!r}")

    def _descent(self, key, grad: np.ndarray, lr: float) -> np.ndarray:
        """Parameter change for one step: ``-lr * grad`` or an Adam step."""
        if self.settings.optimizer == "sgd":
            return -lr * grad
        b1, b2, eps = 0.9, 0.999, 1e-8
        m, v, t = self._opt.get(key, (np.zeros_like(grad), np.zeros_like(grad), 0))
        t += 1
        m = b1 * m + (1 - b1) * grad
        v = b2 * v + (1 - b2) * grad * grad
        self._opt[key] = (m, v, t)
        return -lr * (m / (1 - b1**t)) / (np.sqrt(v / (1 - b2**t)) + eps)

    # -- derived views -----------------------------------------------------------

    @property
    def alpha_trainable(self) -> bool:
        return self.mode in (mixing.FEDECIDER, mixing.WO_DECOMP, mixing.WO_SEP) and self.phase == FEDERATED

    @property
    def _effective_mode(self) -> str:
        if mixing.is_directional(self.mode) and self.phase == PRE_COMMUNICATION:
            return mixing.LOCAL_ONLY
        return self.mode

    def _received_factors(self):
        if self._effective_mode not in mixing.DIRECTIONAL_MODES:
            return None
        if self.received is None:
            raise ProtocolError(f"client {self.client_id}: no components received")
        out = {}
        for lid in self.own:
            comps = self.received.get(lid)
            if comps is None or len(comps) != self.num_clients:
                raise ProtocolError(f"client {self.client_id}: missing components for layer {lid}")
            out[lid] = [c.factors for c in comps]
        return out

    def build_update(self) -> dict[str, np.ndarray]:
        """Per-layer delta injected into the frozen backbone."""
        mode = self._effective_mode
        received = self._received_factors()
        deltas = {}
        for lid, own in self.own.items():
            if received is None:
                factors = [own]
            else:
                factors = list(received[lid])
                factors[self.client_id] = own
            deltas[lid] = mixing.combine(mode, factors, self.alpha)
        return deltas

    # -- protocol hooks ------------------------------------------------------------

    def install_components(self, components: Mapping[str, Sequence], round_idx: int):
        """Receive the ordered per-layer component list of a broadcast.

        The client's own entry becomes its trainable factors.
        """
        self.received = {lid: list(comps) for lid, comps in components.items()}
        for lid in self.own:
            a, b = self.received[lid][self.client_id].factors
            self.own[lid] = (np.array(a), np.array(b))
        self.phase = FEDERATED
        self.current_round = round_idx

    def install_adapters(self, adapters: Mapping[str, tuple[np.ndarray, np.ndarray]], round_idx: int):
        """Replace own factors with a server aggregate (baseline strategies)."""
        for lid, (a, b) in adapters.items():
            self.own[lid] = (np.array(a), np.array(b))
        if self.mode == mixing.FEDPROX:
            self.anchor = {lid: (_frozen(a), _frozen(b)) for lid, (a, b) in adapters.items()}
        self.phase = FEDERATED
        self.current_round = round_idx

    def own_pairs(self) -> list[lowrank.AdapterPair]:
        return [lowrank.AdapterPair(lid, a, b) for lid, (a, b) in self.own.items()]

    def make_upload(self) -> Upload:
        pairs = self.own_pairs()
        if self.settings.ldp_epsilon is not None and self.mode in mixing.NORMALIZED_MODES:
            # local normalization before perturbation; the server renormalizes
            pairs = [lowrank.normalize_direction(p, self.client_id, self.current_round).as_pair() for p in pairs]
            seed = np.random.SeedSequence([self.noise_seed, self.current_round])
            pairs = apply_ldp_noise(pairs, self.settings.ldp_epsilon, seed, self.settings.ldp_clip)
        return Upload(self.client_id, pairs, lowrank.serialize_adapters(pairs))

    # -- training ----------------------------------------------------------------

    def _train_examples(self):
        if self._examples is None:
            self._examples = make_examples(self.dataset.split.train, self.backbone.config.max_seq_len)
        return self._examples

    def epoch_batches(self) -> list[bb.Batch]:
        """Shuffled batches; each batch holds contexts of one length."""
        examples = self._train_examples()
        order = self.rng.permutation(len(examples))
        buckets: dict[int, list[int]] = {}
        for idx in order:
            buckets.setdefault(len(examples[idx][0]), []).append(idx)
        bs = self.settings.batch_size
        chunks = [
            members[s:s + bs]
            for length in sorted(buckets)
            for members in [buckets[length]]
            for s in range(0, len(members), bs)
        ]
        cand = self.dataset.candidates
        batches = []
        for n in self.rng.permutation(len(chunks)):
            idxs = chunks[n]
            batches.append(
                bb.make_batch([examples[i][0] for i in idxs], [examples[i][1] for i in idxs], cand)
            )
        return batches

    def step(self, batch: bb.Batch) -> float:
        """One plain gradient-descent step on this client's trainables."""
        mode = self._effective_mode
        g = bb.grad_trainables(
            self.backbone, mode, self.own, self._received_factors(), self.alpha, self.client_id, batch
        )
        loss = g.loss
        lr = self.settings.lr_adapter
        prox = self.mode == mixing.FEDPROX and self.anchor is not None
        mu = self.settings.fedprox_mu
        for lid, (a, b) in self.own.items():
            da, db = g.d_a[lid], g.d_b[lid]
            if prox:
                a0, b0 = self.anchor[lid]
                loss += 0.5 * mu * (np.sum((a - a0) ** 2) + np.sum((b - b0) ** 2))
                da = da + mu * (a - a0)
                db = db + mu * (b - b0)
            if self.mode != mixing.FFA_LORA:
                a += self._descent((lid, "a"), da, lr)
            b += self._descent((lid, "b"), db, lr)
        if self.alpha_trainable and g.d_alpha is not None:
            self.alpha = self.alpha + self._descent("alpha", g.d_alpha, self.settings.lr_alpha)
        if not np.isfinite(loss):
            raise bb.NumericError("non-finite loss", batch.batch_id)
        return loss

    def local_train(self, epochs: int) -> list[float]:
        """Run ``epochs`` passes; returns the mean loss of each epoch."""
        if not self.backbone.frozen:
            raise bb.ContractViolation("backbone must be frozen before local training")
        history = []
        for epoch in range(epochs):
            losses, sizes = [], []
            for step, batch in enumerate(self.epoch_batches()):
                batch = batch._replace(batch_id=(self.client_id, self.current_round, epoch, step))
                losses.append(self.step(batch))
                sizes.append(len(batch.targets))
            history.append(float(np.average(losses, weights=sizes)) if losses else float("nan"))
        return history

    # -- evaluation ----------------------------------------------------------------

    def score_users(self, split: str, deltas=None):
        """Candidate logits for every user of ``split``; returns (scores, truth)."""
        pairs = self.dataset.split.val if split == "val" else self.dataset.split.test
        if split not in ("val", "test"):
            raise ValueError(f"unknown split {split!r}")
        if not pairs:
            raise ValueError(f"client {self.client_id}: empty {split} split")
        T = self.backbone.config.max_seq_len
        deltas = self.build_update() if deltas is None else deltas
        cand = self.dataset.candidates
        contexts = [list(ctx[-T:]) for ctx, _ in pairs]
        truth = np.array([t for _, t in pairs])
        scores = np.empty((len(pairs), len(cand)))
        by_len: dict[int, list[int]] = {}
        for u, ctx in enumerate(contexts):
            by_len.setdefault(len(ctx), []).append(u)
        for idxs in by_len.values():
            scores[idxs] = bb.score(self.backbone, deltas, [contexts[u] for u in idxs], cand)
        return scores, truth

    def evaluate(self, split: str, k_list=metrics.DEFAULT_K, deltas=None) -> metrics.MetricRecord:
        scores, truth = self.score_users(split, deltas)
        return metrics.rank_and_score(
            scores, self.dataset.candidates, truth, k_list, self.client_id, self.current_round, split
        )
