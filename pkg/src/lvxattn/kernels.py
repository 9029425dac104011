"""Exact attention math: dense oracle, blockwise forward, state merging, backward.

All tensors use the layout [heads, rows, cols]. Every kernel computes
internally in float64 regardless of the public dtype, so f32 results are the
rounding of the f64 computation and the f64 path is directly comparable to
the dense oracle. Softmax statistics travel as a single per-row logsumexp
L = m + log(l); a row with L = -inf and O = 0 is the empty state and is the
identity element of merge_states.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_TILE_ROWS = 64


@dataclass(frozen=True)
class AttentionState:
    """Partial attention output O [h, rows, d] plus row logsumexp L [h, rows]."""

    O: np.ndarray
    L: np.ndarray

    def __post_init__(self):
        if self.O.ndim != 3 or self.L.ndim != 2:
            raise ValueError(f"state shapes must be [h,rows,d] and [h,rows], "
                             f"got {self.O.shape} and {self.L.shape}")
        if self.O.shape[:2] != self.L.shape:
            raise ValueError(f"O {self.O.shape} and L {self.L.shape} disagree on heads/rows")

    @property
    def heads(self) -> int:
        return self.O.shape[0]

    @property
    def rows(self) -> int:
        return self.O.shape[1]


@dataclass(frozen=True)
class GradientBundle:
    dQ: np.ndarray
    dK: np.ndarray
    dV: np.ndarray


def empty_state(heads: int, rows: int, d: int, dtype=np.float64) -> AttentionState:
    """The merge identity: O = 0, L = -inf."""
    return AttentionState(
        O=np.zeros((heads, rows, d), dtype=dtype),
        L=np.full((heads, rows), -np.inf, dtype=dtype),
    )


def default_scale(d: int) -> float:
    return 1.0 / np.sqrt(d)


def validate_qkv(Q: np.ndarray, K: np.ndarray, V: np.ndarray) -> None:
    for name, t in (("Q", Q), ("K", K), ("V", V)):
        if t.ndim != 3:
            raise ValueError(f"{name} must be [heads, rows, d], got shape {t.shape}")
    if not (Q.shape[0] == K.shape[0] == V.shape[0]):
        raise ValueError(f"head counts differ: Q {Q.shape[0]}, K {K.shape[0]}, V {V.shape[0]}")
    if K.shape[1] != V.shape[1]:
        raise ValueError(f"K rows {K.shape[1]} != V rows {V.shape[1]}")
    if Q.shape[2] != K.shape[2]:
        raise ValueError(f"Q cols {Q.shape[2]} != K cols {K.shape[2]}")
    if V.shape[2] != Q.shape[2]:
        raise ValueError(f"V cols {V.shape[2]} != Q cols {Q.shape[2]}")


def _out_dtype(*arrays) -> np.dtype:
    return np.result_type(*arrays)


def dense_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray,
                    scale: float | None = None) -> AttentionState:
    """Brute-force oracle: O = softmax(scale * Q K^T) V with the full score
    matrix materialized and a max-subtracted row softmax. L is the exact row
    logsumexp of the scaled scores."""
    validate_qkv(Q, K, V)
    if scale is None:
        scale = default_scale(Q.shape[2])
    out_dt = _out_dtype(Q, K, V)
    h, s_q, d = Q.shape
    s_kv = K.shape[1]
    if s_kv == 0:
        return empty_state(h, s_q, d, out_dt)
    Qf = Q.astype(np.float64, copy=False)
    Kf = K.astype(np.float64, copy=False)
    Vf = V.astype(np.float64, copy=False)
    S = scale * (Qf @ Kf.transpose(0, 2, 1))        # [h, s_q, s_kv]
    m = S.max(axis=2)
    P = np.exp(S - m[..., None])
    l = P.sum(axis=2)
    O = (P @ Vf) / l[..., None]
    L = m + np.log(l)
    return AttentionState(O=O.astype(out_dt), L=L.astype(out_dt))


def blockwise_attention(Q: np.ndarray, K: np.ndarray, V: np.ndarray,
                        scale: float | None = None,
                        tile_rows: int = DEFAULT_TILE_ROWS) -> AttentionState:
    """Partial state for one KV block, via a running (m, l) online softmax over
    KV tiles of at most tile_rows rows (clamped to the block size). Restricted
    to this block, the result equals dense_attention on it."""
    validate_qkv(Q, K, V)
    if scale is None:
        scale = default_scale(Q.shape[2])
    if tile_rows < 1:
        raise ValueError(f"tile_rows must be >= 1, got {tile_rows}")
    out_dt = _out_dtype(Q, K, V)
    h, s_q, d = Q.shape
    s_kv = K.shape[1]
    if s_kv == 0:
        return empty_state(h, s_q, d, out_dt)
    Qf = Q.astype(np.float64, copy=False)
    Kf = K.astype(np.float64, copy=False)
    Vf = V.astype(np.float64, copy=False)
    tile = min(tile_rows, s_kv)

    m = np.full((h, s_q), -np.inf)
    l = np.zeros((h, s_q))
    O = np.zeros((h, s_q, d))
    for t0 in range(0, s_kv, tile):
        Kt = Kf[:, t0:t0 + tile]
        Vt = Vf[:, t0:t0 + tile]
        St = scale * (Qf @ Kt.transpose(0, 2, 1))
        m_new = np.maximum(m, St.max(axis=2))
        p = np.exp(St - m_new[..., None])
        alpha = np.exp(m - m_new)                   # first tile: exp(-inf) = 0
        l = alpha * l + p.sum(axis=2)
        O = alpha[..., None] * O + p @ Vt
        m = m_new
    O = O / l[..., None]
    L = m + np.log(l)
    return AttentionState(O=O.astype(out_dt), L=L.astype(out_dt))


def merge_states(a: AttentionState, b: AttentionState) -> AttentionState:
    """Combine two partial states over disjoint KV blocks.

    L = logaddexp(L_a, L_b); O = exp(L_a - L) O_a + exp(L_b - L) O_b.
    Merging with the empty state returns the other operand exactly."""
    if a.O.shape != b.O.shape:
        raise ValueError(f"state shape mismatch: {a.O.shape} vs {b.O.shape}")
    out_dt = _out_dtype(a.O, b.O)
    La = a.L.astype(np.float64, copy=False)
    Lb = b.L.astype(np.float64, copy=False)
    L = np.logaddexp(La, Lb)
    # rows where both inputs are empty keep L = -inf, O = 0; exp() below
    # yields exactly 0 for them because La - Lsafe = -inf
    Lsafe = np.where(np.isneginf(L), 0.0, L)
    wa = np.exp(La - Lsafe)[..., None]
    wb = np.exp(Lb - Lsafe)[..., None]
    O = wa * a.O.astype(np.float64, copy=False) + wb * b.O.astype(np.float64, copy=False)
    return AttentionState(O=O.astype(out_dt), L=L.astype(out_dt))


def attention_row_stats(state: AttentionState, dO: np.ndarray) -> np.ndarray:
    """D = rowsum(dO * O), the per-row statistic the backward pass reuses."""
    if dO.shape != state.O.shape:
        raise ValueError(f"dO shape {dO.shape} != O shape {state.O.shape}")
    return np.sum(dO.astype(np.float64, copy=False) * state.O.astype(np.float64, copy=False),
                  axis=2)


def dense_attention_backward(Q: np.ndarray, K: np.ndarray, V: np.ndarray,
                             O: np.ndarray, L: np.ndarray, dO: np.ndarray,
                             scale: float | None = None) -> GradientBundle:
    """Full softmax-attention backward from the saved forward stats.

    P = exp(scale QK^T - L); D = rowsum(dO * O); dV = P^T dO;
    dS = P * (dO V^T - D); dQ = scale dS K; dK = scale dS^T Q.
    """
    validate_qkv(Q, K, V)
    if O.shape != Q.shape or dO.shape != Q.shape:
        raise ValueError(f"O/dO must match Q shape {Q.shape}, got {O.shape}/{dO.shape}")
    if L.shape != Q.shape[:2]:
        raise ValueError(f"L shape {L.shape} != {Q.shape[:2]}")
    if scale is None:
        scale = default_scale(Q.shape[2])
    D = np.sum(dO.astype(np.float64, copy=False) * O.astype(np.float64, copy=False), axis=2)
    dQ, dK, dV = blockwise_attention_backward(Q, K, V, L, D, dO, scale)
    return GradientBundle(dQ=dQ, dK=dK, dV=dV)


def blockwise_attention_backward(Q_block: np.ndarray, K_block: np.ndarray,
                                 V_block: np.ndarray, L_full: np.ndarray,
                                 D_full: np.ndarray, dO_block: np.ndarray,
                                 scale: float | None = None):
    """Additive gradient contributions of one (Q block, KV block) pair.

    L_full and D_full must be the final forward statistics for these query
    rows, taken over all KV blocks; summing the returned (dQ+, dK+, dV+)
    over every KV block reproduces the dense backward.
    """
    validate_qkv(Q_block, K_block, V_block)
    if dO_block.shape != Q_block.shape:
        raise ValueError(f"dO shape {dO_block.shape} != Q shape {Q_block.shape}")
    if L_full.shape != Q_block.shape[:2] or D_full.shape != Q_block.shape[:2]:
        raise ValueError(f"L/D shapes {L_full.shape}/{D_full.shape} != {Q_block.shape[:2]}")
    if scale is None:
        scale = default_scale(Q_block.shape[2])
    out_dt = _out_dtype(Q_block, K_block, V_block)
    Qf = Q_block.astype(np.float64, copy=False)
    Kf = K_block.astype(np.float64, copy=False)
    Vf = V_block.astype(np.float64, copy=False)
    dOf = dO_block.astype(np.float64, copy=False)
    Lf = L_full.astype(np.float64, copy=False)
    Df = D_full.astype(np.float64, copy=False)

    S = scale * (Qf @ Kf.transpose(0, 2, 1))
    P = np.exp(S - Lf[..., None])
    dV = P.transpose(0, 2, 1) @ dOf
    dP = dOf @ Vf.transpose(0, 2, 1)
    dS = P * (dP - Df[..., None])
    dQ = scale * (dS @ Kf)
    dK = scale * (dS.transpose(0, 2, 1) @ Qf)
    return dQ.astype(out_dt), dK.astype(out_dt), dV.astype(out_dt)


def project(x: np.ndarray, W: np.ndarray, heads: int) -> np.ndarray:
    """x [S, d_embed] @ W [d_embed, h*d] reshaped to [h, S, d]; head k owns
    column block [k*d, (k+1)*d)."""
    if x.ndim != 2 or W.ndim != 2:
        raise ValueError(f"expected 2-D input and weight, got {x.shape} and {W.shape}")
    if x.shape[1] != W.shape[0]:
        raise ValueError(f"inner dims disagree: input {x.shape[1]} vs weight {W.shape[0]}")
    if W.shape[1] % heads != 0:
        raise ValueError(f"weight cols {W.shape[1]} not divisible by heads {heads}")
    out_dt = _out_dtype(x, W)
    d = W.shape[1] // heads
    flat = x.astype(np.float64, copy=False) @ W.astype(np.float64, copy=False)
    out = flat.reshape(x.shape[0], heads, d).transpose(1, 0, 2)
    return np.ascontiguousarray(out).astype(out_dt)


def project_backward(x: np.ndarray, W: np.ndarray, dOut: np.ndarray):
    """Backward of project: returns (dInput = dOut_flat W^T, dW = x^T dOut_flat)."""
    heads = dOut.shape[0]
    if dOut.ndim != 3 or dOut.shape[1] != x.shape[0] or heads * dOut.shape[2] != W.shape[1]:
        raise ValueError(f"dOut shape {dOut.shape} inconsistent with input {x.shape} "
                         f"and weight {W.shape}")
    out_dt = _out_dtype(x, W)
    s = x.shape[0]
    dflat = dOut.astype(np.float64, copy=False).transpose(1, 0, 2).reshape(s, W.shape[1])
    dX = dflat @ W.astype(np.float64, copy=False).T
    dW = x.astype(np.float64, copy=False).T @ dflat
    return dX.astype(out_dt), dW.astype(out_dt)
