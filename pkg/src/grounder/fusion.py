"""Joint visual-linguistic fusion and the box-regression head.

Both modality streams are projected to a shared width, concatenated as
[visual tokens, linguistic tokens, regression token], run through the joint
transformer, and the regression token's final state is decoded to one
normalized (cx, cy, w, h) box through a small MLP with logistic squashing.

The regression token's starting state has six variants: a dedicated learned
parameter (default), average/max pooling over either modality's valid
tokens, or sharing the [CLS] slot (which appends no extra token at all).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ContractError, MaskError
from .language import LinguisticTokens
from .transformer import (EncoderStack, ParamIter, PositionalEncoding,
                          make_stack, xavier, zeros_param)
from .visual import VisualTokens

REG_MODES = ("learnable", "avg-pool-visual", "max-pool-visual",
             "avg-pool-linguistic", "max-pool-linguistic", "share-cls")


@dataclass
class JointSequence:
    embeddings: Tensor       # (C_p, L)
    mask: np.ndarray         # (L,) bool; the regression slot is always valid
    reg_index: int


class FusionHead:
    """Projections, regression token, joint transformer, prediction MLP."""

    def __init__(self, c_v: int, c_l: int, c_p: int, n_v: int, n_l: int,
                 layers: int, heads: int, d_ff: int, dropout: float,
                 reg_mode: str, rng: np.random.Generator,
                 pos_per_layer: bool = False):
        if reg_mode not in REG_MODES:
            raise ConfigError(f"unknown reg_init mode {reg_mode!r}")
        self.c_v, self.c_l, self.c_p = c_v, c_l, c_p
        self.n_v, self.n_l = n_v, n_l
        self.reg_mode = reg_mode
        self.vproj_w = xavier(rng, c_p, c_v)
        self.vproj_b = zeros_param(c_p)
        self.lproj_w = xavier(rng, c_p, c_l)
        self.lproj_b = zeros_param(c_p)
        self.reg = (Tensor(rng.normal(0.0, 0.02, c_p), requires_grad=True,
                           dtype=ag.get_default_dtype())
                    if reg_mode == "learnable" else None)
        max_len = n_v + n_l + 1
        if pos_per_layer:
            pos = [PositionalEncoding.learnable(c_p, max_len, rng)
                   for _ in range(layers)]
        else:
            pos = PositionalEncoding.learnable(c_p, max_len, rng)
        self.encoder: EncoderStack = make_stack(layers, c_p, heads, d_ff,
                                                dropout, pos, rng)
        self.mlp_w1 = xavier(rng, c_p, c_p)
        self.mlp_b1 = zeros_param(c_p)
        self.mlp_w2 = xavier(rng, c_p, c_p)
        self.mlp_b2 = zeros_param(c_p)
        self.mlp_w3 = xavier(rng, 4, c_p)
        self.mlp_b3 = zeros_param(4)

    def named_parameters(self, prefix: str = "") -> ParamIter:
        yield prefix + "vproj.w", self.vproj_w
        yield prefix + "vproj.b", self.vproj_b
        yield prefix + "lproj.w", self.lproj_w
        yield prefix + "lproj.b", self.lproj_b
        if self.reg is not None:
            yield prefix + "reg", self.reg
        yield from self.encoder.named_parameters(prefix + "enc.")
        for n in ("mlp_w1", "mlp_b1", "mlp_w2", "mlp_b2", "mlp_w3", "mlp_b3"):
            yield prefix + n.replace("_", "."), getattr(self, n)


def _col(b: Tensor) -> Tensor:
    return ag.reshape(b, (b.size, 1))


def project_modalities(f_v: Tensor, f_l: Tensor,
                       head: FusionHead) -> tuple[Tensor, Tensor]:
    """Affine maps taking both streams to the shared width c_p."""
    if f_v.shape[0] != head.c_v:
        raise ContractError(f"visual stream has {f_v.shape[0]} channels, want {head.c_v}")
    if f_l.shape[0] != head.c_l:
        raise ContractError(f"linguistic stream has {f_l.shape[0]} channels, want {head.c_l}")
    p_v = ag.matmul(head.vproj_w, f_v) + _col(head.vproj_b)
    p_l = ag.matmul(head.lproj_w, f_l) + _col(head.lproj_b)
    return p_v, p_l


def _masked_mean(tokens: Tensor, mask: np.ndarray) -> Tensor:
    count = int(mask.sum())
    if count == 0:
        raise MaskError("pooling over a fully masked token set")
    weights = (mask.astype(tokens.dtype) / count)[None, :]
    return ag.sum_(tokens * weights, axis=1, keepdims=True)


def assemble_joint(p_v: Tensor, p_l: Tensor, head: FusionHead,
                   v_mask: np.ndarray, l_mask: np.ndarray,
                   cls_index: int = 0) -> JointSequence:
    """Concatenate [visual, linguistic, reg]; reg slot depends on the mode."""
    n_v, n_l = p_v.shape[1], p_l.shape[1]
    if v_mask.size != n_v or l_mask.size != n_l:
        raise ContractError(
            f"masks ({v_mask.size}, {l_mask.size}) do not match token counts "
            f"({n_v}, {n_l})")
    mode = head.reg_mode
    if mode == "share-cls":
        emb = ag.concat([p_v, p_l], axis=1)
        mask = np.concatenate([v_mask, l_mask])
        return JointSequence(emb, mask, reg_index=n_v + cls_index)
    if mode == "learnable":
        reg = ag.reshape(head.reg, (head.c_p, 1))
    elif mode == "avg-pool-visual":
        reg = _masked_mean(p_v, v_mask)
    elif mode == "max-pool-visual":
        reg = ag.amax(p_v, axis=1, mask=v_mask[None, :])
    elif mode == "avg-pool-linguistic":
        reg = _masked_mean(p_l, l_mask)
    else:  # max-pool-linguistic
        reg = ag.amax(p_l, axis=1, mask=l_mask[None, :])
    emb = ag.concat([p_v, p_l, reg], axis=1)
    mask = np.concatenate([v_mask, l_mask, [True]])
    return JointSequence(emb, mask, reg_index=n_v + n_l)


def vl_forward(joint: JointSequence, head: FusionHead, grid: tuple[int, int],
               train: bool = False, rng: Optional[np.random.Generator] = None
               ) -> tuple[Tensor, list[np.ndarray]]:
    """Joint encoding plus, per layer, the regression query's attention over
    the visual grid (head-averaged, reshaped to (H, W))."""
    h, w = grid
    n_v = h * w
    states, per_layer = head.encoder.forward(joint.embeddings, mask=joint.mask,
                                             train=train, rng=rng,
                                             need_weights=True)
    heatmaps = [weights[:, joint.reg_index, :n_v].mean(axis=0).reshape(h, w)
                for weights in per_layer]
    return states, heatmaps


def predict_box(reg_state: Tensor, head: FusionHead) -> Tensor:
    """MLP decode of the regression state to (cx, cy, w, h), squashed to (0,1)."""
    x = ag.reshape(reg_state, (head.c_p, 1))
    x = ag.relu(ag.matmul(head.mlp_w1, x) + _col(head.mlp_b1))
    x = ag.relu(ag.matmul(head.mlp_w2, x) + _col(head.mlp_b2))
    raw = ag.matmul(head.mlp_w3, x) + _col(head.mlp_b3)
    return ag.sigmoid(ag.reshape(raw, (4,)))


def fusion_forward(vis: VisualTokens, lin: LinguisticTokens, head: FusionHead,
                   train: bool = False,
                   rng: Optional[np.random.Generator] = None
                   ) -> tuple[Tensor, list[np.ndarray]]:
    """Full fusion pass: returns the predicted box and per-layer heatmaps."""
    p_v, p_l = project_modalities(vis.embeddings, lin.embeddings, head)
    joint = assemble_joint(p_v, p_l, head, vis.token_mask, lin.token_mask,
                           cls_index=lin.cls_index)
    states, heatmaps = vl_forward(joint, head, vis.grid, train=train, rng=rng)
    reg_state = ag.narrow(states, 1, joint.reg_index, 1)
    return predict_box(reg_state, head), heatmaps
