"""Post-norm transformer encoder with key-padding masks.

Token layout is channels-first: a sequence is a (d, len) matrix whose columns
are tokens.  ``scaled_dot_attention`` alone works in (len, d_k) orientation,
matching the usual score-matrix formulation.  Positional encodings enter the
query and key paths only; the value path stays clean.
"""

from __future__ import annotations

from typing import Iterator, Optional, Sequence, Union

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, ShapeError

ParamIter = Iterator[tuple[str, Tensor]]


def xavier(rng: np.random.Generator, fan_out: int, fan_in: int, shape=None) -> Tensor:
    """Uniform Glorot init: U(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    a = np.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-a, a, size=shape if shape is not None else (fan_out, fan_in))
    return Tensor(data, requires_grad=True, dtype=ag.get_default_dtype())


def zeros_param(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, dtype=ag.get_default_dtype())


def ones_param(*shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True, dtype=ag.get_default_dtype())


def _col(b: Tensor) -> Tensor:
    # bias (d,) -> (d,1) so it broadcasts across token columns
    return ag.reshape(b, (b.size, 1))


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None,
                         need_weights: bool = False):
    """softmax(q·kᵀ/√d_k)·v over (len, d_k) inputs; mask hides key positions."""
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise ShapeError(f"attention expects matrices, got {q.shape}, {k.shape}, {v.shape}")
    if q.shape[1] != k.shape[1] or k.shape[0] != v.shape[0]:
        raise ShapeError(f"attention shapes disagree: q {q.shape}, k {k.shape}, v {v.shape}")
    scores = ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / np.sqrt(q.shape[1]))
    key_mask = None
    if mask is not None:
        m = np.asarray(mask, dtype=bool).reshape(-1)
        if m.size != k.shape[0]:
            raise ContractError(f"mask length {m.size} != key count {k.shape[0]}")
        key_mask = m[None, :]
    weights = ag.softmax(scores, axis=1, mask=key_mask)
    out = ag.matmul(weights, v)
    return (out, weights) if need_weights else out


class AttentionParams:
    """Projections for multi-head self-attention over model dim d."""

    def __init__(self, d: int, heads: int, rng: np.random.Generator):
        if d % heads != 0:
            raise ConfigError(f"model dim {d} not divisible by {heads} heads")
        self.d = d
        self.heads = heads
        self.dk = d // heads
        self.wq = xavier(rng, d, d)
        self.wk = xavier(rng, d, d)
        self.wv = xavier(rng, d, d)
        self.wo = xavier(rng, d, d)
        self.bq = zeros_param(d)
        self.bk = zeros_param(d)
        self.bv = zeros_param(d)
        self.bo = zeros_param(d)

    def named_parameters(self, prefix: str = "") -> ParamIter:
        for n in ("wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo"):
            yield prefix + n, getattr(self, n)


def multi_head_self_attention(x: Tensor, params: AttentionParams, mask=None,
                              pos: Optional[Tensor] = None,
                              need_weights: bool = False):
    """Self-attention over a (d, len) sequence; pos offsets queries and keys."""
    if x.ndim != 2 or x.shape[0] != params.d:
        raise ShapeError(f"expected ({params.d}, len) input, got {x.shape}")
    n = x.shape[1]
    if mask is not None and np.asarray(mask).reshape(-1).size != n:
        raise ContractError(f"mask length {np.asarray(mask).size} != sequence length {n}")
    if pos is not None:
        if pos.shape != x.shape:
            raise ContractError(f"positions {pos.shape} do not match input {x.shape}")
        xqk = x + pos
    else:
        xqk = x
    q = ag.matmul(params.wq, xqk) + _col(params.bq)
    k = ag.matmul(params.wk, xqk) + _col(params.bk)
    v = ag.matmul(params.wv, x) + _col(params.bv)
    heads = []
    weights = []
    for i in range(params.heads):
        lo = i * params.dk
        qi = ag.transpose(ag.narrow(q, 0, lo, params.dk))
        ki = ag.transpose(ag.narrow(k, 0, lo, params.dk))
        vi = ag.transpose(ag.narrow(v, 0, lo, params.dk))
        oi, wi = scaled_dot_attention(qi, ki, vi, mask=mask, need_weights=True)
        heads.append(ag.transpose(oi))
        if need_weights:
            weights.append(wi.data)
    out = ag.matmul(params.wo, ag.concat(heads, axis=0)) + _col(params.bo)
    if need_weights:
        return out, np.stack(weights)  # (heads, len, len)
    return out


class EncoderLayerParams:
    """One post-norm encoder layer: attention, FFN, two layer norms."""

    def __init__(self, d: int, heads: int, d_ff: int, dropout: float,
                 rng: np.random.Generator):
        if not 0.0 <= dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {dropout}")
        self.d = d
        self.dropout = dropout
        self.attn = AttentionParams(d, heads, rng)
        self.w1 = xavier(rng, d_ff, d)
        self.b1 = zeros_param(d_ff)
        self.w2 = xavier(rng, d, d_ff)
        self.b2 = zeros_param(d)
        self.ln1_g = ones_param(d)
        self.ln1_b = zeros_param(d)
        self.ln2_g = ones_param(d)
        self.ln2_b = zeros_param(d)

    def named_parameters(self, prefix: str = "") -> ParamIter:
        yield from self.attn.named_parameters(prefix + "attn.")
        for n in ("w1", "b1", "w2", "b2", "ln1_g", "ln1_b", "ln2_g", "ln2_b"):
            yield prefix + n, getattr(self, n)


def encoder_layer(x: Tensor, params: EncoderLayerParams, mask=None,
                  pos: Optional[Tensor] = None, train: bool = False,
                  rng: Optional[np.random.Generator] = None,
                  need_weights: bool = False):
    """x' = LN(x + MSA(x)); out = LN(x' + FFN(x')); dropout only in training."""
    msa = multi_head_self_attention(x, params.attn, mask=mask, pos=pos,
                                    need_weights=need_weights)
    if need_weights:
        msa, weights = msa
    msa = ag.dropout(msa, params.dropout, train, rng)
    x1 = ag.layer_norm(x + msa, params.ln1_g, params.ln1_b, axis=0)
    hidden = ag.relu(ag.matmul(params.w1, x1) + _col(params.b1))
    hidden = ag.dropout(hidden, params.dropout, train, rng)
    ffn = ag.matmul(params.w2, hidden) + _col(params.b2)
    out = ag.layer_norm(x1 + ffn, params.ln2_g, params.ln2_b, axis=0)
    if need_weights:
        return out, weights
    return out


class PositionalEncoding:
    """Per-token offsets added to queries and keys: sine grid, learned, or none."""

    def __init__(self, kind: str, table: Optional[Tensor] = None,
                 trainable: bool = False):
        if kind not in ("sine-2d", "learnable-1d", "none"):
            raise ConfigError(f"unknown positional encoding kind {kind!r}")
        self.kind = kind
        self.table = table
        self.trainable = trainable

    @classmethod
    def none(cls) -> "PositionalEncoding":
        return cls("none")

    @classmethod
    def sine_2d(cls, h: int, w: int, d: int,
                temperature: float = 10000.0) -> "PositionalEncoding":
        return cls("sine-2d", Tensor(sine_2d_positions(h, w, d, temperature)))

    @classmethod
    def learnable(cls, d: int, max_len: int,
                  rng: np.random.Generator) -> "PositionalEncoding":
        return cls("learnable-1d", xavier(rng, d, max_len), trainable=True)

    def slots(self, length: int) -> Optional[Tensor]:
        """The (d, length) offset block, or None when kind is 'none'."""
        if self.kind == "none":
            return None
        if self.table.shape[1] < length:
            raise ContractError(
                f"positional table covers {self.table.shape[1]} slots, need {length}")
        if self.table.shape[1] == length:
            return self.table
        return ag.narrow(self.table, 1, 0, length)

    def named_parameters(self, prefix: str = "") -> ParamIter:
        if self.trainable:
            yield prefix + "table", self.table


def sine_2d_positions(h: int, w: int, d: int,
                      temperature: float = 10000.0) -> np.ndarray:
    """Fixed grid encoding, (d, h*w): first half row waves, second half column."""
    if d % 4 != 0:
        raise ConfigError(f"sine-2d needs a dim divisible by 4, got {d}")
    half = d // 2
    freq = temperature ** (2 * (np.arange(half) // 2) / half)  # (half,)
    rows = np.repeat(np.arange(h, dtype=np.float64), w)
    cols = np.tile(np.arange(w, dtype=np.float64), h)

    def waves(idx):
        arg = idx[None, :] / freq[:, None]  # (half, h*w)
        out = np.empty_like(arg)
        out[0::2] = np.sin(arg[0::2])
        out[1::2] = np.cos(arg[1::2])
        return out

    enc = np.concatenate([waves(rows), waves(cols)], axis=0)
    return enc.astype(ag.get_default_dtype())


class EncoderStack:
    """A pile of encoder layers sharing one mask and positional scheme.

    `positions` is either a single PositionalEncoding reused at every layer's
    input or a list with one entry per layer.
    """

    def __init__(self, layers: Sequence[EncoderLayerParams],
                 positions: Union[PositionalEncoding, Sequence[PositionalEncoding]]):
        self.layers = list(layers)
        if isinstance(positions, PositionalEncoding):
            self.shared = positions
            self.per_layer = None
        else:
            if len(positions) != len(self.layers):
                raise ConfigError(
                    f"{len(positions)} positional tables for {len(self.layers)} layers")
            self.shared = None
            self.per_layer = list(positions)

    def _pos_for(self, i: int) -> PositionalEncoding:
        return self.shared if self.per_layer is None else self.per_layer[i]

    def forward(self, x: Tensor, mask=None, train: bool = False,
                rng: Optional[np.random.Generator] = None,
                need_weights: bool = False):
        """Returns the final states; with need_weights, also per-layer (h,n,n) maps."""
        n = x.shape[1]
        all_weights = []
        for i, layer in enumerate(self.layers):
            pos = self._pos_for(i).slots(n)
            x = encoder_layer(x, layer, mask=mask, pos=pos, train=train, rng=rng,
                              need_weights=need_weights)
            if need_weights:
                x, weights = x
                all_weights.append(weights)
        if need_weights:
            return x, all_weights
        return x

    def named_parameters(self, prefix: str = "") -> ParamIter:
        for i, layer in enumerate(self.layers):
            yield from layer.named_parameters(f"{prefix}layer{i}.")
        if self.shared is not None:
            yield from self.shared.named_parameters(prefix + "pos.")
        else:
            for i, enc in enumerate(self.per_layer):
                yield from enc.named_parameters(f"{prefix}pos{i}.")


def make_stack(n_layers: int, d: int, heads: int, d_ff: int, dropout: float,
               positions: Union[PositionalEncoding, Sequence[PositionalEncoding]],
               rng: np.random.Generator) -> EncoderStack:
    return EncoderStack(
        [EncoderLayerParams(d, heads, d_ff, dropout, rng) for _ in range(n_layers)],
        positions)
