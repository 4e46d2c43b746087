"""Bidirectional multi-head co-attention block.

One block takes two token sequences A and B and produces two fused
sequences: each side queries the other's keys/values through multi-head
cross-attention, then goes through the usual post-norm transformer tail
(residual + LayerNorm, position-wise FFN, residual + LayerNorm). Padded
key positions receive zero attention weight and padded query rows are
zeroed in the output, so padding is invisible to valid tokens.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Iterator, Optional, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Node, Tensor
from .errors import DimensionError, InvalidInputError


@dataclass(frozen=True)
class TokenSequence:
    """An n-by-d token matrix plus a validity mask (False marks padding).

    Padded rows must be all-zero; at least one token must be valid.
    """

    tokens: Node
    mask: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "tokens", ad.as_node(self.tokens))
        mask = np.asarray(self.mask, dtype=bool)
        object.__setattr__(self, "mask", mask)
        data = self.tokens.value.data
        if data.ndim != 2:
            raise DimensionError(f"token sequence must be a matrix, got {data.shape}")
        if mask.shape != (data.shape[0],):
            raise DimensionError(
                f"mask length {mask.shape} does not match {data.shape[0]} tokens"
            )
        if not mask.any():
            raise InvalidInputError("token sequence has no valid tokens")
        if not np.all(data[~mask] == 0):
            raise InvalidInputError("padded rows must be all-zero")

    @classmethod
    def dense(cls, tokens) -> "TokenSequence":
        """Sequence with every token valid."""
        node = ad.as_node(tokens)
        return cls(node, np.ones(node.value.shape[0], dtype=bool))

    @property
    def length(self) -> int:
        return self.tokens.value.shape[0]

    @property
    def width(self) -> int:
        return self.tokens.value.shape[1]

    @property
    def valid_count(self) -> int:
        return int(self.mask.sum())


@dataclass
class CoAttentionSide:
    """Per-direction weights: the side's own Q/K/V projections plus the
    output projection, FFN, and the two LayerNorms applied on its output
    path."""

    wq: Node
    wk: Node
    wv: Node
    wo: Node
    ffn_w1: Node
    ffn_b1: Node
    ffn_w2: Node
    ffn_b2: Node
    ln1_gain: Node
    ln1_bias: Node
    ln2_gain: Node
    ln2_bias: Node

    def named(self, prefix: str) -> Iterator[Tuple[str, Node]]:
        for f in fields(self):
            yield f"{prefix}.{f.name}", getattr(self, f.name)

    @property
    def width(self) -> int:
        return self.wq.value.shape[0]


@dataclass
class CoAttentionParams:
    side_a: CoAttentionSide
    side_b: CoAttentionSide

    def named(self, prefix: str) -> Iterator[Tuple[str, Node]]:
        yield from self.side_a.named(f"{prefix}.a")
        yield from self.side_b.named(f"{prefix}.b")

    def swapped(self) -> "CoAttentionParams":
        return CoAttentionParams(side_a=self.side_b, side_b=self.side_a)

    @property
    def width(self) -> int:
        return self.side_a.width


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int, dtype) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), dtype=dtype)


def init_side(
    d: int, d_ff: int, rng: np.random.Generator, dtype="float32"
) -> CoAttentionSide:
    def proj():
        return ad.parameter(_glorot(rng, d, d, dtype))

    return CoAttentionSide(
        wq=proj(),
        wk=proj(),
        wv=proj(),
        wo=proj(),
        ffn_w1=ad.parameter(_glorot(rng, d, d_ff, dtype)),
        ffn_b1=ad.parameter(Tensor(np.zeros(d_ff), dtype=dtype)),
        ffn_w2=ad.parameter(_glorot(rng, d_ff, d, dtype)),
        ffn_b2=ad.parameter(Tensor(np.zeros(d), dtype=dtype)),
        ln1_gain=ad.parameter(Tensor(np.ones(d), dtype=dtype)),
        ln1_bias=ad.parameter(Tensor(np.zeros(d), dtype=dtype)),
        ln2_gain=ad.parameter(Tensor(np.ones(d), dtype=dtype)),
        ln2_bias=ad.parameter(Tensor(np.zeros(d), dtype=dtype)),
    )


def init_coattention(
    d: int, d_ff: int, rng: np.random.Generator, dtype="float32"
) -> CoAttentionParams:
    return CoAttentionParams(
        side_a=init_side(d, d_ff, rng, dtype),
        side_b=init_side(d, d_ff, rng, dtype),
    )


def multi_head_cross_attention(
    q_tokens: Node,
    kv_tokens: Node,
    wq: Node,
    wk: Node,
    wv: Node,
    wo: Node,
    heads: int,
    key_mask: Optional[np.ndarray] = None,
) -> Node:
    """Attend q_tokens over kv_tokens with ``heads`` parallel heads.

    Projected Q/K/V are split into head slabs of width d/heads, each head
    attends with scale 1/sqrt(d/heads), outputs are concatenated and sent
    through the output projection.
    """
    d = wq.value.shape[1]
    if q_tokens.value.shape[1] != wq.value.shape[0]:
        raise DimensionError(
            f"query width {q_tokens.value.shape[1]} vs projection {wq.value.shape}"
        )
    if kv_tokens.value.shape[1] != wk.value.shape[0]:
        raise DimensionError(
            f"key/value width {kv_tokens.value.shape[1]} vs projection {wk.value.shape}"
        )
    if heads < 1 or d % heads != 0:
        raise DimensionError(f"heads={heads} must divide width {d}")
    d_h = d // heads
    scale = 1.0 / math.sqrt(d_h)

    q = ad.matmul(q_tokens, wq)
    k = ad.matmul(kv_tokens, wk)
    v = ad.matmul(kv_tokens, wv)

    head_outputs = []
    for h in range(heads):
        qs = ad.narrow(q, 1, h * d_h, d_h)
        ks = ad.narrow(k, 1, h * d_h, d_h)
        vs = ad.narrow(v, 1, h * d_h, d_h)
        logits = ad.mul(ad.matmul(qs, ad.transpose(ks)), scale)
        weights = ad.softmax_rows(logits, key_mask=key_mask)
        head_outputs.append(ad.matmul(weights, vs))
    merged = head_outputs[0] if heads == 1 else ad.concat(head_outputs, axis=1)
    return ad.matmul(merged, wo)


def _mask_column(seq: TokenSequence, dtype) -> Node:
    return ad.constant(Tensor(seq.mask.astype(dtype)[:, None]))


def _fused_output(
    e: TokenSequence,
    other: TokenSequence,
    side: CoAttentionSide,
    other_side: CoAttentionSide,
    heads: int,
    dropout_rate: float,
    training: bool,
    rng,
    activation: str,
    ln_eps: float,
) -> TokenSequence:
    attn = multi_head_cross_attention(
        e.tokens,
        other.tokens,
        wq=side.wq,
        wk=other_side.wk,
        wv=other_side.wv,
        wo=side.wo,
        heads=heads,
        key_mask=other.mask,
    )
    attn = ad.dropout(attn, dropout_rate, training, rng)
    h1 = ad.layer_norm(ad.add(e.tokens, attn), side.ln1_gain, side.ln1_bias, ln_eps)
    ff = ad.add(
        ad.matmul(
            ad.activation(ad.add(ad.matmul(h1, side.ffn_w1), side.ffn_b1), activation),
            side.ffn_w2,
        ),
        side.ffn_b2,
    )
    ff = ad.dropout(ff, dropout_rate, training, rng)
    h2 = ad.layer_norm(ad.add(h1, ff), side.ln2_gain, side.ln2_bias, ln_eps)
    dtype = e.tokens.value.dtype
    return TokenSequence(ad.mul(h2, _mask_column(e, dtype)), e.mask)


def co_attend(
    e_a: TokenSequence,
    e_b: TokenSequence,
    params: CoAttentionParams,
    heads: int,
    dropout_rate: float = 0.0,
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
    activation: str = "relu",
    ln_eps: float = 1e-5,
) -> Tuple[TokenSequence, TokenSequence]:
    """Fuse two sequences both ways; returns (H_A, H_B) with input masks."""
    d = params.width
    if e_a.width != d or e_b.width != d:
        raise DimensionError(
            f"sequence widths {e_a.width}/{e_b.width} do not match parameters ({d})"
        )
    training = mode == "train"
    h_a = _fused_output(
        e_a, e_b, params.side_a, params.side_b,
        heads, dropout_rate, training, rng, activation, ln_eps,
    )
    h_b = _fused_output(
        e_b, e_a, params.side_b, params.side_a,
        heads, dropout_rate, training, rng, activation, ln_eps,
    )
    return h_a, h_b
