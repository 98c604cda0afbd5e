"""Visual branch: conv stem, channel projection, tokens, grid transformer.

The stem is a chain of stride-2 3x3 convolutions (ReLU) reaching total stride
S, then a 1x1 projection to the token channel width.  A 2-D validity mask
rides along: a stride-S block is valid when any pixel in it is valid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import ConfigError, ShapeError
from .transformer import (EncoderStack, ParamIter, ones_param, xavier,
                          zeros_param)


@dataclass
class ImageInput:
    """Pixels in [0,1], channels-first, plus a per-pixel validity mask."""
    pixels: Tensor           # (3, H0, W0)
    valid_mask: np.ndarray   # (H0, W0) bool

    @staticmethod
    def from_array(arr: np.ndarray) -> "ImageInput":
        """Wrap an (H, W, 3) uint8 image, fully valid."""
        if arr.ndim != 3 or arr.shape[2] != 3:
            raise ShapeError(f"expected (H, W, 3) pixels, got {arr.shape}")
        pixels = Tensor(arr.astype(ag.get_default_dtype()).transpose(2, 0, 1) / 255.0)
        return ImageInput(pixels, np.ones(arr.shape[:2], dtype=bool))


def fit_image(arr: np.ndarray, target: int) -> ImageInput:
    """Nearest-neighbor scale so the longer edge equals `target`, pad the rest.

    Padding sits on the bottom/right and is recorded invalid in the mask.
    """
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) pixels, got {arr.shape}")
    h, w = arr.shape[:2]
    if (h, w) != (target, target):
        scale = target / max(h, w)
        nh, nw = max(1, round(h * scale)), max(1, round(w * scale))
        ri = np.minimum((np.arange(nh) / scale).astype(int), h - 1)
        ci = np.minimum((np.arange(nw) / scale).astype(int), w - 1)
        arr = arr[ri][:, ci]
    else:
        nh = nw = target
    canvas = np.zeros((target, target, 3), dtype=arr.dtype)
    canvas[:nh, :nw] = arr[:nh, :nw]
    base = ImageInput.from_array(canvas)
    mask = np.zeros((target, target), dtype=bool)
    mask[:nh, :nw] = True
    return ImageInput(base.pixels, mask)


@dataclass
class VisualTokens:
    embeddings: Tensor        # (C_v, N_v), N_v = H * W
    token_mask: np.ndarray    # (N_v,) bool
    grid: tuple[int, int]     # (H, W) kept for positions and heatmaps


class ConvStemParams:
    """Stride-2 conv chain to total stride S plus a 1x1 projection to c_v."""

    def __init__(self, stride: int, width: int, c_v: int,
                 rng: np.random.Generator, in_channels: int = 3):
        if stride < 2 or stride & (stride - 1):
            raise ConfigError(f"total stride must be a power of two >= 2, got {stride}")
        self.stride = stride
        self.convs: list[tuple[Tensor, Tensor]] = []
        cin = in_channels
        for _ in range(stride.bit_length() - 1):
            w = xavier(rng, width * 9, cin * 9, shape=(width, cin, 3, 3))
            self.convs.append((w, zeros_param(width)))
            cin = width
        self.proj_w = xavier(rng, c_v, cin, shape=(c_v, cin, 1, 1))
        self.proj_b = zeros_param(c_v)
        self.c_v = c_v

    def named_parameters(self, prefix: str = "") -> ParamIter:
        for i, (w, b) in enumerate(self.convs):
            yield f"{prefix}conv{i}.w", w
            yield f"{prefix}conv{i}.b", b
        yield prefix + "proj.w", self.proj_w
        yield prefix + "proj.b", self.proj_b


def conv_stem(image: ImageInput, params: ConvStemParams) -> tuple[Tensor, np.ndarray]:
    """Feature map (c_v, H0/S, W0/S) and the block-pooled validity mask."""
    _, h0, w0 = image.pixels.shape
    s = params.stride
    if h0 % s or w0 % s:
        raise ConfigError(f"image size {h0}x{w0} not divisible by stride {s}")
    x = image.pixels
    for w, b in params.convs:
        x = ag.relu(ag.conv2d(x, w, b, stride=2, padding=1))
    x = ag.conv2d(x, params.proj_w, params.proj_b)
    mask = image.valid_mask.reshape(h0 // s, s, w0 // s, s).any(axis=(1, 3))
    return x, mask


class VisualBranch:
    """Stem plus grid transformer; output keeps the stem token shape.

    Stem tokens are layer-normalized before entering the encoder: a backbone
    trained at scale hands the transformer well-conditioned features, and a
    few randomly initialized convolutions do not, leaving the fixed-amplitude
    grid encodings to drown the content signal in every attention score.
    """

    def __init__(self, stem: ConvStemParams, encoder: EncoderStack):
        self.stem = stem
        self.encoder = encoder
        self.norm_g = ones_param(stem.c_v)
        self.norm_b = zeros_param(stem.c_v)

    def forward(self, image: ImageInput, train: bool = False,
                rng: Optional[np.random.Generator] = None) -> VisualTokens:
        fmap, mask2d = conv_stem(image, self.stem)
        c, h, w = fmap.shape
        tokens = ag.reshape(fmap, (c, h * w))
        tokens = ag.layer_norm(tokens, self.norm_g, self.norm_b, axis=0)
        token_mask = mask2d.reshape(-1)
        tokens = self.encoder.forward(tokens, mask=token_mask, train=train, rng=rng)
        return VisualTokens(tokens, token_mask, (h, w))

    def named_parameters(self, prefix: str = "") -> ParamIter:
        yield from self.stem.named_parameters(prefix + "stem.")
        yield prefix + "norm.g", self.norm_g
        yield prefix + "norm.b", self.norm_b
        yield from self.encoder.named_parameters(prefix + "enc.")
