"""A tiny frozen sequential recommender with adapter injection points.

Architecture: token + positional embeddings, ``num_blocks`` residual blocks
of single-head causal self-attention (no norms, no MLP), and an output
projection read at the last position. Every attention projection
``W_Q, W_K, W_V, W_O`` accepts an additive delta. Gradients are computed by
a hand-written reverse pass.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import mixing

PROJECTIONS = ("q", "k", "v", "o")
_MAGIC = b"BKBN"


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


class ContractViolation(RuntimeError):
    pass


class NumericError(FloatingPointError):
    def __init__(self, message: str, batch_id=None):
        self.batch_id = batch_id
        super().__init__(f"{message} (batch {batch_id})")


def layer_id(block: int, proj: str) -> str:
    return f"block{block}.{proj}"


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int
    embed_dim: int = 32
    max_seq_len: int = 20
    num_blocks: int = 2
    seed: int = 0

    def validate(self):
        problems = []
        if self.embed_dim < 2:
            problems.append(f"embed_dim must be >= 2, got {self.embed_dim}")
        if self.vocab_size < 2:
            problems.append(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.max_seq_len < 2:
            problems.append(f"max_seq_len must be >= 2, got {self.max_seq_len}")
        if self.num_blocks < 1:
            problems.append(f"num_blocks must be >= 1, got {self.num_blocks}")
        if problems:
            raise ConfigError("; ".join(problems))

    @property
    def layer_ids(self) -> list[str]:
        return [layer_id(b, p) for b in range(self.num_blocks) for p in PROJECTIONS]


@dataclass(eq=False)
class BackboneParams:
    config: BackboneConfig
    token_embedding: np.ndarray
    positional_embedding: np.ndarray
    attention: dict[str, np.ndarray]
    output_projection: np.ndarray
    frozen: bool = False

    @property
    def layer_ids(self) -> list[str]:
        return self.config.layer_ids

    def target_shapes(self) -> dict[str, tuple[int, int]]:
        return {lid: self.attention[lid].shape for lid in self.layer_ids}

    def arrays(self) -> dict[str, np.ndarray]:
        out = {
            "token_embedding": self.token_embedding,
            "positional_embedding": self.positional_embedding,
            "output_projection": self.output_projection,
        }
        out.update({lid: self.attention[lid] for lid in self.layer_ids})
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def copy(self) -> "BackboneParams":
        return BackboneParams(
            config=self.config,
            token_embedding=self.token_embedding.copy(),
            positional_embedding=self.positional_embedding.copy(),
            attention={k: v.copy() for k, v in self.attention.items()},
            output_projection=self.output_projection.copy(),
            frozen=False,
        )

    def freeze(self) -> "BackboneParams":
        for arr in self.arrays().values():
            arr.setflags(write=False)
        self.frozen = True
        return self

    def to_bytes(self) -> bytes:
        arrays = self.arrays()
        header = {
            "config": self.config.__dict__,
            "frozen": self.frozen,
            "arrays": [[name, list(arr.shape)] for name, arr in arrays.items()],
        }
        raw = json.dumps(header, sort_keys=True).encode("utf-8")
        buf = io.BytesIO()
        buf.write(_MAGIC)
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        for arr in arrays.values():
            buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "BackboneParams":
        if data[:4] != _MAGIC:
            raise ValueError("not a backbone snapshot")
        (n,) = struct.unpack_from("<I", data, 4)
        header = json.loads(data[8:8 + n].decode("utf-8"))
        pos = 8 + n
        arrays = {}
        for name, shape in header["arrays"]:
            count = int(np.prod(shape))
            arrays[name] = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * count
        config = BackboneConfig(**header["config"])
        params = cls(
            config=config,
            token_embedding=arrays["token_embedding"],
            positional_embedding=arrays["positional_embedding"],
            attention={lid: arrays[lid] for lid in config.layer_ids},
            output_projection=arrays["output_projection"],
        )
        if header["frozen"]:
            params.freeze()
        return params


def init_backbone(config: BackboneConfig, item_features: np.ndarray | None = None) -> BackboneParams:
    """Uniform ``[-1/sqrt(d), 1/sqrt(d)]`` init from ``config.seed``.

    ``item_features``, when given, must have shape ``(vocab_size - 1, d)``;
    it overwrites the token-embedding and output-projection rows of the real
    items (row 0 is the padding id) after the seeded draw, standing in for
    pretrained item semantics.
    """
    config.validate()
    d = config.embed_dim
    bound = 1.0 / np.sqrt(d)
    rng = np.random.default_rng(config.seed)

    def draw(*shape):
        return rng.uniform(-bound, bound, size=shape)

    token = draw(config.vocab_size, d)
    pos = draw(config.max_seq_len, d)
    attention = {lid: draw(d, d) for lid in config.layer_ids}
    out = draw(config.vocab_size, d)
    if item_features is not None:
        item_features = np.asarray(item_features, dtype=np.float64)
        if item_features.shape != (config.vocab_size - 1, d):
            raise ConfigError(
                f"item_features shape {item_features.shape} != {(config.vocab_size - 1, d)}"
            )
        token[1:] = item_features
        out[1:] = item_features
    return BackboneParams(config, token, pos, attention, out)


# -- batches -----------------------------------------------------------------


class Batch(NamedTuple):
    """Equal-length contexts scored against one candidate id set."""

    tokens: np.ndarray  # (B, T) global item ids
    targets: np.ndarray  # (B,) global item ids
    candidates: np.ndarray  # (C,) sorted global item ids
    batch_id: object = None


def make_batch(contexts: Sequence[Sequence[int]], targets, candidates, batch_id=None) -> Batch:
    tokens = np.asarray(contexts, dtype=np.int64)
    if tokens.ndim != 2:
        raise InputError("contexts in one batch must share a length")
    return Batch(tokens, np.asarray(targets, dtype=np.int64), np.asarray(candidates, dtype=np.int64), batch_id)


def _check_batch(params: BackboneParams, batch: Batch):
    cfg = params.config
    T = batch.tokens.shape[1]
    if T < 1 or T > cfg.max_seq_len:
        raise InputError(f"sequence length {T} outside [1, {cfg.max_seq_len}]")
    if batch.tokens.min() < 1 or batch.tokens.max() >= cfg.vocab_size:
        raise InputError("unknown item id in sequence")
    cand = batch.candidates
    if cand.min() < 1 or cand.max() >= cfg.vocab_size:
        raise InputError("unknown item id among candidates")


def _check_deltas(params: BackboneParams, deltas: Mapping[str, np.ndarray]):
    shapes = params.target_shapes()
    for lid, delta in deltas.items():
        if lid not in shapes:
            raise InputError(f"delta for unknown layer {lid!r}")
        if delta.shape != shapes[lid]:
            raise InputError(f"delta for {lid} has shape {delta.shape}, expected {shapes[lid]}")


# -- forward / backward ------------------------------------------------------


@dataclass
class _Cache:
    tokens: np.ndarray
    weights: dict[str, np.ndarray]
    blocks: list = field(default_factory=list)
    h: np.ndarray | None = None


def _softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def _forward(params: BackboneParams, deltas: Mapping[str, np.ndarray], tokens: np.ndarray) -> _Cache:
    cfg = params.config
    d = cfg.embed_dim
    scale = 1.0 / np.sqrt(d)
    T = tokens.shape[1]
    weights = {}
    for lid in cfg.layer_ids:
        w = params.attention[lid]
        delta = deltas.get(lid)
        weights[lid] = w if delta is None else w + delta
    cache = _Cache(tokens=tokens, weights=weights)
    mask = np.triu(np.ones((T, T), dtype=bool), k=1)
    x = params.token_embedding[tokens] + params.positional_embedding[:T]
    for b in range(cfg.num_blocks):
        wq, wk, wv, wo = (weights[layer_id(b, p)] for p in PROJECTIONS)
        q = x @ wq.T
        k = x @ wk.T
        v = x @ wv.T
        s = np.matmul(q, k.transpose(0, 2, 1)) * scale
        s[:, mask] = -np.inf
        p = _softmax(s)
        hh = np.matmul(p, v)
        o = hh @ wo.T
        cache.blocks.append((x, q, k, v, p, hh))
        x = x + o
    cache.h = x[:, -1, :]
    return cache


def _target_index(batch: Batch) -> np.ndarray:
    idx = np.searchsorted(batch.candidates, batch.targets)
    idx = np.minimum(idx, len(batch.candidates) - 1)
    if not np.all(batch.candidates[idx] == batch.targets):
        raise InputError("target id not among candidates")
    return idx


def _backward(params: BackboneParams, cache: _Cache, batch: Batch, dlogits: np.ndarray, full: bool):
    """Gradients of a scalar w.r.t. effective attention weights (and, if
    ``full``, embeddings and output projection) given ``dlogits``."""
    cfg = params.config
    d = cfg.embed_dim
    scale = 1.0 / np.sqrt(d)
    out_rows = params.output_projection[batch.candidates]
    grads: dict[str, np.ndarray] = {}
    dh = dlogits @ out_rows
    if full:
        d_out = np.zeros_like(params.output_projection)
        np.add.at(d_out, batch.candidates, dlogits.T @ cache.h)
        grads["output_projection"] = d_out
    B, T = cache.tokens.shape
    dx = np.zeros((B, T, d))
    dx[:, -1, :] = dh
    for b in reversed(range(cfg.num_blocks)):
        x, q, k, v, p, hh = cache.blocks[b]
        lq, lk, lv, lo = (layer_id(b, pr) for pr in PROJECTIONS)
        wq, wk, wv, wo = (cache.weights[l] for l in (lq, lk, lv, lo))
        do = dx
        grads[lo] = do.reshape(-1, d).T @ hh.reshape(-1, d)
        dhh = do @ wo
        dp = np.matmul(dhh, v.transpose(0, 2, 1))
        dv = np.matmul(p.transpose(0, 2, 1), dhh)
        ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) * scale
        dq = np.matmul(ds, k)
        dk = np.matmul(ds.transpose(0, 2, 1), q)
        xf = x.reshape(-1, d)
        grads[lq] = dq.reshape(-1, d).T @ xf
        grads[lk] = dk.reshape(-1, d).T @ xf
        grads[lv] = dv.reshape(-1, d).T @ xf
        dx = dx + dq @ wq + dk @ wk + dv @ wv
    if full:
        d_tok = np.zeros_like(params.token_embedding)
        np.add.at(d_tok, cache.tokens, dx)
        d_pos = np.zeros_like(params.positional_embedding)
        d_pos[:T] = dx.sum(axis=0)
        grads["token_embedding"] = d_tok
        grads["positional_embedding"] = d_pos
    return grads


def _loss_and_dlogits(logits: np.ndarray, tidx: np.ndarray):
    B = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.sum(np.exp(z), axis=1, keepdims=True))
    loss = -np.mean(logp[np.arange(B), tidx])
    dlogits = np.exp(logp)
    dlogits[np.arange(B), tidx] -= 1.0
    return loss, dlogits / B


def score(params: BackboneParams, deltas: Mapping[str, np.ndarray], tokens, candidates) -> np.ndarray:
    """Logits of every candidate for each context row, shape ``(B, C)``."""
    tokens = np.atleast_2d(np.asarray(tokens, dtype=np.int64))
    candidates = np.asarray(candidates, dtype=np.int64)
    _check_batch(params, Batch(tokens, tokens[:, -1], candidates))
    _check_deltas(params, deltas)
    cache = _forward(params, deltas, tokens)
    return cache.h @ params.output_projection[candidates].T


def batch_loss(params: BackboneParams, deltas: Mapping[str, np.ndarray], batch: Batch) -> float:
    _check_batch(params, batch)
    _check_deltas(params, deltas)
    cache = _forward(params, deltas, batch.tokens)
    logits = cache.h @ params.output_projection[batch.candidates].T
    loss, _ = _loss_and_dlogits(logits, _target_index(batch))
    return float(loss)


def forward_loss(
    params: BackboneParams,
    deltas: Mapping[str, np.ndarray],
    sequence: Sequence[int],
    target: int,
    candidates: Sequence[int],
) -> tuple[float, np.ndarray]:
    """NLL of ``target`` after ``sequence`` with softmax over ``candidates``.

    Returns the loss and the candidate logits.
    """
    batch = make_batch([list(sequence)], [target], np.asarray(candidates))
    _check_batch(params, batch)
    _check_deltas(params, deltas)
    cache = _forward(params, deltas, batch.tokens)
    logits = cache.h @ params.output_projection[batch.candidates].T
    loss, _ = _loss_and_dlogits(logits, _target_index(batch))
    return float(loss), logits[0]


def loss_and_delta_grads(
    params: BackboneParams, deltas: Mapping[str, np.ndarray], batch: Batch, full: bool = False
) -> tuple[float, dict[str, np.ndarray]]:
    """Mean batch NLL and its gradient w.r.t. each effective attention matrix.

    Since ``W_eff = W + delta``, these are also the gradients w.r.t. the
    deltas. With ``full=True`` gradients for the embeddings and output
    projection are included too.
    """
    _check_batch(params, batch)
    _check_deltas(params, deltas)
    cache = _forward(params, deltas, batch.tokens)
    logits = cache.h @ params.output_projection[batch.candidates].T
    loss, dlogits = _loss_and_dlogits(logits, _target_index(batch))
    if not np.isfinite(loss):
        raise NumericError("non-finite loss", batch.batch_id)
    return float(loss), _backward(params, cache, batch, dlogits, full)


class TrainableGrads(NamedTuple):
    loss: float
    d_a: dict[str, np.ndarray]
    d_b: dict[str, np.ndarray]
    d_alpha: np.ndarray | None


def grad_trainables(
    params: BackboneParams,
    mode: str,
    own: Mapping[str, tuple[np.ndarray, np.ndarray]],
    received: Mapping[str, Sequence[tuple[np.ndarray, np.ndarray]]] | None,
    alpha: np.ndarray | None,
    self_index: int,
    batch: Batch,
) -> TrainableGrads:
    """Exact gradients of the mean batch loss w.r.t. a client's trainables.

    ``own`` maps layer id to the client's ``(A, B)``; ``received`` maps layer
    id to the ordered factor list of every client (the entry at
    ``self_index`` is ignored and replaced by ``own``). Only the client's own
    factors and ``alpha`` receive gradients.
    """
    if not params.frozen:
        raise ContractViolation("backbone must be frozen before adapter training")
    factors = _layer_factors(mode, own, received, self_index)
    deltas = {lid: mixing.combine(mode, f, alpha) for lid, f in factors.items()}
    loss, g = loss_and_delta_grads(params, deltas, batch)
    d_a, d_b = {}, {}
    d_alpha = None
    for lid, f in factors.items():
        da, db, dal = mixing.combine_backward(mode, f, alpha, self_index, g[lid])
        d_a[lid], d_b[lid] = da, db
        if dal is not None:
            d_alpha = dal if d_alpha is None else d_alpha + dal
    return TrainableGrads(loss, d_a, d_b, d_alpha)


def _layer_factors(mode, own, received, self_index):
    if not mixing.is_directional(mode):
        return {lid: [f] for lid, f in own.items()}
    out = {}
    for lid, f in own.items():
        if received is None or lid not in received:
            raise ContractViolation(f"no received components for layer {lid}")
        lst = list(received[lid])
        lst[self_index] = f
        out[lid] = lst
    return out


# -- pretraining ---------------------------------------------------------------


def pretrain_backbone(
    params: BackboneParams,
    batches: Sequence[Batch] | callable,
    epochs: int,
    lr: float,
) -> tuple[BackboneParams, list[float]]:
    """Full-parameter SGD on the NLL, then freeze.

    ``batches`` is either a list of batches or a callable ``epoch -> batches``
    (for reshuffling). Returns the frozen params and the running mean loss
    of each epoch.
    """
    if params.frozen:
        raise ContractViolation("pretrain_backbone called on frozen params")
    get = batches if callable(batches) else (lambda _e: batches)
    if len(get(0)) == 0:
        raise ContractViolation("pooled pretraining data is empty")
    p = params.copy()
    history = []
    for epoch in range(epochs):
        losses, sizes = [], []
        for batch in get(epoch):
            loss, g = loss_and_delta_grads(p, {}, batch, full=True)
            losses.append(loss)
            sizes.append(len(batch.targets))
            p.token_embedding -= lr * g["token_embedding"]
            p.positional_embedding -= lr * g["positional_embedding"]
            p.output_projection -= lr * g["output_projection"]
            for lid in p.layer_ids:
                p.attention[lid] -= lr * g[lid]
        history.append(float(np.average(losses, weights=sizes)))
    return p.freeze(), history


def mean_loss(params: BackboneParams, batches: Sequence[Batch], deltas=None) -> float:
    deltas = deltas or {}
    losses = [batch_loss(params, deltas, b) for b in batches]
    sizes = [len(b.targets) for b in batches]
    return float(np.average(losses, weights=sizes))
