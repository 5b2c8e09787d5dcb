"""Parameterized building blocks: GRU cells, bidirectional sequence encoding,
additive word attention, and the co-attention block that fuses two sentence
sequences through an affinity matrix.

All layers are pure functions of (inputs, params). Parameters are plain
Tensors with ``requires_grad=True``; masks are numpy boolean arrays (True
marks a real, non-padding position).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (
    DegenerateMaskError,
    ShapeError,
    Tensor,
    add,
    concat,
    matmul,
    mul,
    sigmoid,
    slice_cols,
    softmax_rows,
    sub,
    tanh,
    transpose,
)


def uniform_init(rows: int, cols: int, rng: np.random.Generator) -> Tensor:
    """Weight matrix drawn from U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    bound = 1.0 / np.sqrt(cols)
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)


def zeros_init(rows: int, cols: int) -> Tensor:
    return Tensor(np.zeros((rows, cols)), requires_grad=True)


@dataclass
class GruParams:
    """Weights for one GRU direction: per gate an input matrix [h x in],
    a recurrent matrix [h x h], and a bias column [h x 1]."""

    w_reset: Tensor
    u_reset: Tensor
    b_reset: Tensor
    w_update: Tensor
    u_update: Tensor
    b_update: Tensor
    w_cand: Tensor
    u_cand: Tensor
    b_cand: Tensor

    @property
    def hidden_size(self) -> int:
        return self.w_reset.shape[0]

    @property
    def input_size(self) -> int:
        return self.w_reset.shape[1]

    @staticmethod
    def create(input_size: int, hidden_size: int, rng: np.random.Generator) -> "GruParams":
        def w():
            return uniform_init(hidden_size, input_size, rng)

        def u():
            return uniform_init(hidden_size, hidden_size, rng)

        def b():
            return zeros_init(hidden_size, 1)

        return GruParams(w(), u(), b(), w(), u(), b(), w(), u(), b())

    def named(self) -> dict:
        return {
            "reset.w": self.w_reset, "reset.u": self.u_reset, "reset.b": self.b_reset,
            "update.w": self.w_update, "update.u": self.u_update, "update.b": self.b_update,
            "cand.w": self.w_cand, "cand.u": self.u_cand, "cand.b": self.b_cand,
        }


@dataclass
class WordAttentionParams:
    """Additive attention over word states: proj [h x 2h], bias [h x 1],
    context [1 x h]."""

    proj: Tensor
    bias: Tensor
    context: Tensor

    @staticmethod
    def create(hidden_size: int, rng: np.random.Generator) -> "WordAttentionParams":
        return WordAttentionParams(
            proj=uniform_init(hidden_size, 2 * hidden_size, rng),
            bias=zeros_init(hidden_size, 1),
            context=uniform_init(1, hidden_size, rng),
        )

    def named(self) -> dict:
        return {"proj": self.proj, "bias": self.bias, "context": self.context}


@dataclass
class CoAttentionParams:
    """Affinity and interaction weights; primary is the news side."""

    w_affinity: Tensor      # [2h x 2h]
    w_primary: Tensor       # [2h x 2h]
    w_secondary: Tensor     # [2h x 2h]
    score_primary: Tensor   # [1 x 2h]
    score_secondary: Tensor  # [1 x 2h]

    @staticmethod
    def create(hidden_size: int, rng: np.random.Generator) -> "CoAttentionParams":
        d = 2 * hidden_size
        return CoAttentionParams(
            w_affinity=uniform_init(d, d, rng),
            w_primary=uniform_init(d, d, rng),
            w_secondary=uniform_init(d, d, rng),
            score_primary=uniform_init(1, d, rng),
            score_secondary=uniform_init(1, d, rng),
        )

    def named(self) -> dict:
        return {
            "w_affinity": self.w_affinity,
            "w_primary": self.w_primary,
            "w_secondary": self.w_secondary,
            "score_primary": self.score_primary,
            "score_secondary": self.score_secondary,
        }


@dataclass
class CoAttentionOutput:
    affinity: Tensor             # [E x N]
    interaction_primary: Tensor  # [2h x N]
    interaction_secondary: Tensor  # [2h x E]
    attn_primary: Tensor         # [1 x N]
    attn_secondary: Tensor       # [1 x E]
    pooled_primary: Tensor       # [1 x 2h]
    pooled_secondary: Tensor     # [1 x 2h]


def gru_cell(x: Tensor, h_prev: Tensor, p: GruParams) -> Tensor:
    """One GRU step: h = (1 - z) * h_prev + z * h_cand.

    ``x`` may be a single column [in x 1] or a column batch [in x B]; the
    batch dimension is carried through unchanged.
    """
    if x.shape[0] != p.input_size:
        raise ShapeError(f"gru_cell input has {x.shape[0]} rows, params expect {p.input_size}")
    if h_prev.shape[0] != p.hidden_size:
        raise ShapeError(f"gru_cell state has {h_prev.shape[0]} rows, params expect {p.hidden_size}")
    if x.shape[1] != h_prev.shape[1]:
        raise ShapeError(f"gru_cell batch mismatch: x {x.shape} vs h_prev {h_prev.shape}")
    r = sigmoid(add(add(matmul(p.w_reset, x), matmul(p.u_reset, h_prev)), p.b_reset))
    z = sigmoid(add(add(matmul(p.w_update, x), matmul(p.u_update, h_prev)), p.b_update))
    cand = tanh(add(add(matmul(p.w_cand, x), matmul(p.u_cand, mul(r, h_prev))), p.b_cand))
    # (1 - z) * h_prev + z * cand, written to avoid a constant tensor
    return add(h_prev, mul(z, sub(cand, h_prev)))


def _masked_step(x_t: Tensor, h: Tensor, p: GruParams, keep_t) -> Tensor:
    """GRU step where masked-out columns carry the previous state through."""
    cell = gru_cell(x_t, h, p)
    if keep_t is None:
        return cell
    return add(h, mul(keep_t, sub(cell, h)))


def gru_sequence(columns: list, p: GruParams, keep: list | None = None,
                 reverse: bool = False) -> list:
    """Run a GRU over a list of [in x B] columns from a zero initial state.

    Returns the state after each position, in position order. ``keep`` is an
    optional list of [1 x B] float tensors; where 0, the state passes through
    unchanged (padding positions do not advance the recurrence).
    """
    if not columns:
        raise ShapeError("gru_sequence over an empty sequence")
    batch = columns[0].shape[1]
    h = Tensor(np.zeros((p.hidden_size, batch)))
    order = range(len(columns) - 1, -1, -1) if reverse else range(len(columns))
    states = [None] * len(columns)
    for t in order:
        h = _masked_step(columns[t], h, p, keep[t] if keep is not None else None)
        states[t] = h
    return states


def bigru(seq: Tensor, p_fwd: GruParams, p_bwd: GruParams, mask=None) -> Tensor:
    """Bidirectional GRU over the columns of ``seq`` [in x T] -> [2h x T].

    Column t stacks the forward state after steps 1..t on the backward state
    after steps T..t; both directions start from zero. With ``mask`` given
    (boolean [T]), padding positions neither advance the recurrences nor
    change the carried states.
    """
    if seq.data.ndim != 2:
        raise ShapeError(f"bigru needs a 2-D sequence, got shape {seq.data.shape}")
    T = seq.shape[1]
    if T == 0:
        raise ShapeError("bigru over an empty sequence")
    cols = [slice_cols(seq, t, t + 1) for t in range(T)]
    keep = None
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        if m.shape != (T,):
            raise ShapeError(f"bigru mask shape {m.shape} does not match T={T}")
        keep = [Tensor(np.array([[1.0 if m[t] else 0.0]])) for t in range(T)]
    fwd = gru_sequence(cols, p_fwd, keep, reverse=False)
    bwd = gru_sequence(cols, p_bwd, keep, reverse=True)
    return concat([concat(fwd, axis=1), concat(bwd, axis=1)], axis=0)


def word_attention(v: Tensor, mask, p: WordAttentionParams):
    """Pool word states [2h x M] into one sentence vector.

    Scores come from a tanh projection of each column against a learned
    context vector; a masked softmax turns them into weights. Returns
    (pooled [2h x 1], weights [1 x M]).
    """
    keys = tanh(add(matmul(p.proj, v), p.bias))
    scores = matmul(p.context, keys)
    m = None if mask is None else np.asarray(mask, dtype=bool).reshape(1, -1)
    if m is not None and not m.any():
        raise DegenerateMaskError("word_attention over a fully masked sentence")
    weights = softmax_rows(scores, m)
    pooled = matmul(v, transpose(weights))
    return pooled, weights


def co_attention(s: Tensor, d: Tensor, mask_s, mask_d, p: CoAttentionParams) -> CoAttentionOutput:
    """Fuse a primary sequence S [2h x N] with a secondary sequence D [2h x E].

    The affinity matrix F = tanh(D^T Wr S) couples every secondary column to
    every primary column; the interaction maps mix each side with the
    affinity-weighted other side; masked softmax rows give one attention
    distribution per side, and the pooled vectors are the attention-weighted
    column averages.
    """
    if s.shape[0] != d.shape[0]:
        raise ShapeError(f"co_attention feature dims differ: S {s.shape} vs D {d.shape}")
    if s.shape[0] != p.w_affinity.shape[0]:
        raise ShapeError(f"co_attention params sized {p.w_affinity.shape} for features {s.shape[0]}")
    n, e = s.shape[1], d.shape[1]
    ms = None if mask_s is None else np.asarray(mask_s, dtype=bool)
    md = None if mask_d is None else np.asarray(mask_d, dtype=bool)
    if ms is not None and ms.shape != (n,):
        raise ShapeError(f"mask_s shape {ms.shape} does not match N={n}")
    if md is not None and md.shape != (e,):
        raise ShapeError(f"mask_d shape {md.shape} does not match E={e}")
    if ms is not None and not ms.any():
        raise DegenerateMaskError("co_attention primary side fully masked")
    if md is not None and not md.any():
        raise DegenerateMaskError("co_attention secondary side fully masked")

    affinity = tanh(matmul(matmul(transpose(d), p.w_affinity), s))      # [E x N]
    proj_s = matmul(p.w_primary, s)                                      # [2h x N]
    proj_d = matmul(p.w_secondary, d)                                    # [2h x E]
    inter_s = tanh(add(proj_s, matmul(proj_d, affinity)))                # [2h x N]
    inter_d = tanh(add(proj_d, matmul(proj_s, transpose(affinity))))     # [2h x E]
    attn_s = softmax_rows(matmul(p.score_primary, inter_s), None if ms is None else ms.reshape(1, -1))
    attn_d = softmax_rows(matmul(p.score_secondary, inter_d), None if md is None else md.reshape(1, -1))
    pooled_s = matmul(attn_s, transpose(s))                              # [1 x 2h]
    pooled_d = matmul(attn_d, transpose(d))                              # [1 x 2h]
    return CoAttentionOutput(affinity, inter_s, inter_d, attn_s, attn_d, pooled_s, pooled_d)


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map w @ x + b for column inputs."""
    return add(matmul(w, x), b)
