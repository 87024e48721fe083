"""Low-rank adapter algebra.

Adapters are stored as dense float64 factor pairs ``(A, B)`` with
``A`` of shape ``(r, d_in)`` and ``B`` of shape ``(d_out, r)`` so that the
composed update is ``B @ A``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

ZERO_THRESHOLD = 1e-12

_MAGIC = b"LRAD"
_VERSION = 1


class DimensionError(ValueError):
    """Raised when matrix shapes are incompatible."""


class ZeroUpdate(ValueError):
    """Raised when an update is too small to define a direction."""

    def __init__(self, norm: float, layer_id: str | None = None):
        self.norm = norm
        self.layer_id = layer_id
        super().__init__(f"update norm {norm:.3e} below threshold (layer {layer_id!r})")


def _as_matrix(x) -> np.ndarray:
    m = np.array(x, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionError(f"expected a 2-d matrix, got shape {m.shape}")
    m.setflags(write=False)
    return m


@dataclass(frozen=True, eq=False)
class AdapterPair:
    """One layer's raw low-rank factors."""

    layer_id: str
    a_mat: np.ndarray
    b_mat: np.ndarray

    def __post_init__(self):
        a = _as_matrix(self.a_mat)
        b = _as_matrix(self.b_mat)
        if b.shape[1] != a.shape[0]:
            raise DimensionError(
                f"{self.layer_id}: B has {b.shape[1]} columns but A has {a.shape[0]} rows"
            )
        r = a.shape[0]
        if r < 1 or r > min(a.shape[1], b.shape[0]):
            raise DimensionError(f"{self.layer_id}: invalid rank {r} for shapes {b.shape}x{a.shape}")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
            raise ValueError(f"{self.layer_id}: non-finite adapter entries")
        object.__setattr__(self, "a_mat", a)
        object.__setattr__(self, "b_mat", b)

    @property
    def rank(self) -> int:
        return self.a_mat.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        """Shape of the composed update, ``(d_out, d_in)``."""
        return (self.b_mat.shape[0], self.a_mat.shape[1])

    @property
    def factors(self) -> tuple[np.ndarray, np.ndarray]:
        return self.a_mat, self.b_mat

    @property
    def num_params(self) -> int:
        return self.a_mat.size + self.b_mat.size


@dataclass(frozen=True, eq=False)
class DirectionalComponent:
    """A jointly rescaled adapter pair whose composition has unit norm.

    ``source_magnitude`` is kept for diagnostics on the server side and is
    never part of what clients receive.
    """

    source_client: int
    round: int
    layer_id: str
    a_tilde: np.ndarray
    b_tilde: np.ndarray
    source_magnitude: float

    def __post_init__(self):
        object.__setattr__(self, "a_tilde", _as_matrix(self.a_tilde))
        object.__setattr__(self, "b_tilde", _as_matrix(self.b_tilde))

    @property
    def factors(self) -> tuple[np.ndarray, np.ndarray]:
        return self.a_tilde, self.b_tilde

    @property
    def rank(self) -> int:
        return self.a_tilde.shape[0]

    @property
    def num_params(self) -> int:
        return self.a_tilde.size + self.b_tilde.size

    def as_pair(self) -> AdapterPair:
        return AdapterPair(self.layer_id, self.a_tilde, self.b_tilde)


def compose(adapter: AdapterPair) -> np.ndarray:
    """Return ``B @ A``."""
    a, b = adapter.factors
    if b.shape[1] != a.shape[0]:
        raise DimensionError(f"cannot compose {b.shape} with {a.shape}")
    return b @ a


def frob_inner(m1, m2) -> float:
    m1 = np.asarray(m1, dtype=np.float64)
    m2 = np.asarray(m2, dtype=np.float64)
    if m1.shape != m2.shape:
        raise DimensionError(f"shape mismatch {m1.shape} vs {m2.shape}")
    return float(np.sum(m1 * m2))


def frob_norm(m) -> float:
    return float(np.sqrt(frob_inner(m, m)))


def normalize_direction(
    adapter: AdapterPair,
    source_client: int,
    round: int,
    threshold: float = ZERO_THRESHOLD,
) -> DirectionalComponent:
    """Rescale both factors by ``||BA||_F ** -1/2`` so the product has unit norm."""
    magnitude = frob_norm(compose(adapter))
    if not magnitude > threshold:
        raise ZeroUpdate(magnitude, adapter.layer_id)
    s = (1.0 / magnitude) ** 0.5
    return DirectionalComponent(
        source_client=source_client,
        round=round,
        layer_id=adapter.layer_id,
        a_tilde=s * adapter.a_mat,
        b_tilde=s * adapter.b_mat,
        source_magnitude=magnitude,
    )


def weighted_combine(components: Sequence, weights: Sequence[float]) -> np.ndarray:
    """Sum of ``weights[j] * B_j @ A_j`` over components sharing one layer."""
    if len(components) == 0:
        raise ValueError("weighted_combine needs at least one component")
    if len(components) != len(weights):
        raise ValueError(f"{len(components)} components but {len(weights)} weights")
    layer_ids = {c.layer_id for c in components}
    if len(layer_ids) != 1:
        raise DimensionError(f"components span several layers: {sorted(layer_ids)}")
    a0, b0 = components[0].factors
    out = np.zeros((b0.shape[0], a0.shape[1]))
    for comp, w in zip(components, weights):
        a, b = comp.factors
        if (b.shape[0], a.shape[1]) != out.shape:
            raise DimensionError(f"component shape {(b.shape[0], a.shape[1])} != {out.shape}")
        out += float(w) * (b @ a)
    return out


# -- serialization ---------------------------------------------------------
#
# Layout (little-endian):
#   magic "LRAD", u16 version, u32 layer count, then per layer:
#   u16 id length, utf-8 id, u32 rank, u32 d_out, u32 d_in,
#   rank*d_in f64 (A row-major), d_out*rank f64 (B row-major).


def serialize_adapters(adapters: Iterable[AdapterPair]) -> bytes:
    adapters = list(adapters)
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<HI", _VERSION, len(adapters)))
    for ad in adapters:
        lid = ad.layer_id.encode("utf-8")
        d_out, d_in = ad.shape
        buf.write(struct.pack("<H", len(lid)))
        buf.write(lid)
        buf.write(struct.pack("<III", ad.rank, d_out, d_in))
        buf.write(np.ascontiguousarray(ad.a_mat, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(ad.b_mat, dtype="<f8").tobytes())
    return buf.getvalue()


def deserialize_adapters(data: bytes) -> list[AdapterPair]:
    view = memoryview(data)
    if bytes(view[:4]) != _MAGIC:
        raise ValueError("not an adapter archive")
    version, n = struct.unpack_from("<HI", view, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported adapter archive version {version}")
    pos = 10
    out = []
    for _ in range(n):
        (id_len,) = struct.unpack_from("<H", view, pos)
        pos += 2
        lid = bytes(view[pos:pos + id_len]).decode("utf-8")
        pos += id_len
        r, d_out, d_in = struct.unpack_from("<III", view, pos)
        pos += 12
        a = np.frombuffer(view, dtype="<f8", count=r * d_in, offset=pos).reshape(r, d_in)
        pos += 8 * r * d_in
        b = np.frombuffer(view, dtype="<f8", count=d_out * r, offset=pos).reshape(d_out, r)
        pos += 8 * d_out * r
        out.append(AdapterPair(lid, a.astype(np.float64), b.astype(np.float64)))
    if pos != len(data):
        raise ValueError(f"{len(data) - pos} trailing bytes in adapter archive")
    return out


def header_bytes(adapters: Iterable[AdapterPair]) -> int:
    """Bytes of a serialized archive that are not matrix entries."""
    adapters = list(adapters)
    return 10 + sum(2 + len(a.layer_id.encode("utf-8")) + 12 for a in adapters)


def adapter_params(adapters: Mapping[str, AdapterPair] | Iterable[AdapterPair]) -> int:
    items = adapters.values() if isinstance(adapters, Mapping) else adapters
    return sum(a.num_params for a in items)
