"""End-to-end grounding model: two branches feeding the fusion head.

Parameters split into two optimizer groups by name prefix: `visual.` and
`lang.` form the branch group, everything under `fusion.` (projections,
regression token, joint transformer, prediction MLP) forms the fusion group.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autograd import Tensor
from .boxes import Box
from .config import RunConfig
from .errors import ConfigError
from .fusion import FusionHead, fusion_forward
from .language import LinguisticBranch
from .transformer import ParamIter, PositionalEncoding, make_stack
from .visual import ConvStemParams, ImageInput, VisualBranch

BRANCH_PREFIXES = ("visual.", "lang.")


@dataclass
class ModelOutput:
    box: Tensor                  # (4,) normalized cxcywh, each in (0,1)
    heatmaps: list[np.ndarray]   # per joint layer, (H, W) attention of the reg query
    grid: tuple[int, int]


class GroundingModel:
    def __init__(self, visual: VisualBranch, lang: LinguisticBranch,
                 fusion: FusionHead, config: RunConfig):
        self.visual = visual
        self.lang = lang
        self.fusion = fusion
        self.config = config

    def forward(self, image: ImageInput, ids: np.ndarray, mask: np.ndarray,
                train: bool = False,
                rng: Optional[np.random.Generator] = None) -> ModelOutput:
        vis = self.visual.forward(image, train=train, rng=rng)
        lin = self.lang.forward(ids, mask, train=train, rng=rng)
        box, heatmaps = fusion_forward(vis, lin, self.fusion, train=train, rng=rng)
        return ModelOutput(box, heatmaps, vis.grid)

    def predict(self, image: ImageInput, ids: np.ndarray,
                mask: np.ndarray) -> Box:
        out = self.forward(image, ids, mask, train=False)
        cx, cy, w, h = (float(v) for v in out.box.data)
        return Box(cx, cy, w, h)

    def named_parameters(self) -> ParamIter:
        yield from self.visual.named_parameters("visual.")
        yield from self.lang.named_parameters("lang.")
        yield from self.fusion.named_parameters("fusion.")

    def param_groups(self) -> dict[str, list[tuple[str, Tensor]]]:
        groups: dict[str, list[tuple[str, Tensor]]] = {"branch": [], "fusion": []}
        for name, p in self.named_parameters():
            key = "branch" if name.startswith(BRANCH_PREFIXES) else "fusion"
            groups[key].append((name, p))
        return groups


def build_model(cfg: RunConfig, vocab_size: int,
                rng: np.random.Generator) -> GroundingModel:
    cfg.validate()
    if vocab_size < 5:
        raise ConfigError(f"vocabulary of {vocab_size} has no real words")
    grid = cfg.image_size // cfg.stem_stride
    n_v = grid * grid

    stem = ConvStemParams(cfg.stem_stride, cfg.stem_width, cfg.c_v, rng)
    v_layers = cfg.visual_layers if cfg.visual_transformer else 0
    v_pos = PositionalEncoding.sine_2d(grid, grid, cfg.c_v, cfg.sine_temperature)
    visual = VisualBranch(stem, make_stack(
        v_layers, cfg.c_v, cfg.visual_heads, cfg.ffn_ratio * cfg.c_v,
        cfg.dropout, v_pos, rng))

    l_layers = cfg.linguistic_layers if cfg.linguistic_transformer else 0
    l_pos = PositionalEncoding.learnable(cfg.c_l, cfg.n_l, rng)
    lang = LinguisticBranch(vocab_size, cfg.c_l, cfg.n_l, make_stack(
        l_layers, cfg.c_l, cfg.linguistic_heads, cfg.ffn_ratio * cfg.c_l,
        cfg.dropout, l_pos, rng), rng)

    fusion = FusionHead(cfg.c_v, cfg.c_l, cfg.c_p, n_v, cfg.n_l,
                        cfg.vl_layers, cfg.vl_heads, cfg.ffn_ratio * cfg.c_p,
                        cfg.dropout, cfg.reg_init, rng,
                        pos_per_layer=cfg.vl_pos_per_layer)
    return GroundingModel(visual, lang, fusion, cfg)
