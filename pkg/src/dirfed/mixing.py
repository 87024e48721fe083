"""How a client turns adapter factors and weights into per-layer deltas.

Every mode maps ``(own factors, received factors, alpha)`` to one dense
delta per layer. ``combine_backward`` pulls a gradient with respect to that
delta back onto the client's trainables.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

FEDECIDER = "fedecider"
WO_DECOMP = "wo_decomp"
WO_PER = "wo_per"
WO_SEP = "wo_sep"
LOCAL_ONLY = "local_only"
FEDAVG = "fedavg"
PFEDAVG = "pfedavg"
FEDPROX = "fedprox"
FFA_LORA = "ffa_lora"

# modes whose clients exchange per-client components and learn alpha
DIRECTIONAL_MODES = (FEDECIDER, WO_DECOMP, WO_PER, WO_SEP)
# modes where the delta is the client's own adapter product
OWN_ONLY_MODES = (LOCAL_ONLY, FEDAVG, PFEDAVG, FEDPROX, FFA_LORA)
ALL_MODES = DIRECTIONAL_MODES + OWN_ONLY_MODES
# directional modes whose broadcast is normalized by the server
NORMALIZED_MODES = (FEDECIDER, WO_PER)

Factors = tuple[np.ndarray, np.ndarray]  # (A, B)


def is_directional(mode: str) -> bool:
    return mode in DIRECTIONAL_MODES


def combine(mode: str, factors: Sequence[Factors], alpha: np.ndarray | None) -> np.ndarray:
    """Delta for one layer.

    ``factors`` is the full ordered list (own factors already substituted at
    the client's index) for directional modes, or a single entry otherwise.
    """
    if mode in (FEDECIDER, WO_DECOMP, WO_PER):
        out = np.zeros((factors[0][1].shape[0], factors[0][0].shape[1]))
        for (a, b), w in zip(factors, alpha):
            out += w * (b @ a)
        return out
    if mode == WO_SEP:
        a_bar = sum(w * a for (a, _), w in zip(factors, alpha))
        b_bar = sum(w * b for (_, b), w in zip(factors, alpha))
        return b_bar @ a_bar
    if mode in OWN_ONLY_MODES:
        a, b = factors[0]
        return b @ a
    raise ValueError(f"unknown mode {mode!r}")


def combine_backward(
    mode: str,
    factors: Sequence[Factors],
    alpha: np.ndarray | None,
    self_index: int,
    grad_delta: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Return ``(dA_own, dB_own, dalpha)`` for one layer.

    ``dalpha`` is ``None`` for modes without weights.
    """
    g = grad_delta
    if mode in (FEDECIDER, WO_DECOMP, WO_PER):
        a_i, b_i = factors[self_index]
        w = alpha[self_index]
        d_a = w * (b_i.T @ g)
        d_b = w * (g @ a_i.T)
        # <G, B_j A_j> = <B_j^T G, A_j>, avoids forming d x d products
        d_alpha = np.array([np.sum((b.T @ g) * a) for a, b in factors])
        return d_a, d_b, d_alpha
    if mode == WO_SEP:
        a_bar = sum(w * a for (a, _), w in zip(factors, alpha))
        b_bar = sum(w * b for (_, b), w in zip(factors, alpha))
        d_b_bar = g @ a_bar.T
        d_a_bar = b_bar.T @ g
        w = alpha[self_index]
        d_alpha = np.array([np.sum(d_a_bar * a) + np.sum(d_b_bar * b) for a, b in factors])
        return w * d_a_bar, w * d_b_bar, d_alpha
    if mode in OWN_ONLY_MODES:
        a, b = factors[0]
        return b.T @ g, g @ a.T, None
    raise ValueError(f"unknown mode {mode!r}")
