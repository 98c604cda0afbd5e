"""Flat key=value run configuration.

One file drives everything: model dims, ablation toggles, loss weights, the
two-group schedule, generator settings, paths.  Unknown keys are rejected;
every key below carries its default, so an empty file is a valid config.
Booleans accept on/off, true/false, yes/no, 1/0.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Union

from .errors import ConfigError

_TRUE = {"on", "true", "yes", "1"}
_FALSE = {"off", "false", "no", "0"}


@dataclass
class RunConfig:
    # model dims and depths
    image_size: int = 64
    stem_stride: int = 8
    stem_width: int = 32
    c_v: int = 32
    c_l: int = 64
    c_p: int = 64
    n_l: int = 40
    visual_layers: int = 2
    visual_heads: int = 2
    linguistic_layers: int = 2
    linguistic_heads: int = 2
    vl_layers: int = 2
    vl_heads: int = 2
    ffn_ratio: int = 4
    dropout: float = 0.0
    sine_temperature: float = 10000.0
    # regression-token setup and ablation toggles
    reg_init: str = "learnable"
    visual_transformer: bool = True
    linguistic_transformer: bool = True
    vl_pos_per_layer: bool = False
    # loss
    giou_weight: float = 1.0
    smooth_l1_beta: float = 1.0
    # optimization schedule; the fusion/branch ratio stays 10x, and training
    # from a random init at this scale wants rates well above the fine-tuning
    # regime, so the defaults sit higher than the Schedule type's own
    lr_fusion: float = 1e-3
    lr_branch: float = 1e-4
    weight_decay: float = 1e-4
    epochs: int = 40
    drop_epoch: int = 30
    batch_size: int = 32
    grad_clip: float = 0.0
    # synthetic data generator
    num_shapes_min: int = 2
    num_shapes_max: int = 5
    relational_prob: float = 0.5
    count: int = 2000
    val_count: int = 200
    seed: int = 0
    # paths (usually supplied by CLI flags instead)
    dataset: str = ""
    out: str = ""

    def validate(self) -> "RunConfig":
        c = self
        checks = [
            (c.image_size >= 32, "image_size must be >= 32"),
            (c.image_size % c.stem_stride == 0,
             f"image_size {c.image_size} not divisible by stem_stride {c.stem_stride}"),
            (c.stem_stride >= 2 and c.stem_stride & (c.stem_stride - 1) == 0,
             "stem_stride must be a power of two >= 2"),
            (c.c_v % 4 == 0, "c_v must be divisible by 4 for the grid encoding"),
            (c.c_v % c.visual_heads == 0, "c_v not divisible by visual_heads"),
            (c.c_l % c.linguistic_heads == 0, "c_l not divisible by linguistic_heads"),
            (c.c_p % c.vl_heads == 0, "c_p not divisible by vl_heads"),
            (c.n_l >= 3, "n_l must be >= 3"),
            (min(c.visual_layers, c.linguistic_layers, c.vl_layers) >= 0,
             "layer counts must be >= 0"),
            (c.ffn_ratio >= 1, "ffn_ratio must be >= 1"),
            (0.0 <= c.dropout < 1.0, "dropout must be in [0, 1)"),
            (c.giou_weight >= 0, "giou_weight must be >= 0"),
            (c.smooth_l1_beta > 0, "smooth_l1_beta must be positive"),
            (c.lr_fusion > 0 and c.lr_branch > 0, "learning rates must be positive"),
            (c.weight_decay >= 0, "weight_decay must be >= 0"),
            (c.epochs >= 1, "epochs must be >= 1"),
            (0 <= c.drop_epoch < c.epochs,
             f"drop_epoch {c.drop_epoch} must lie in [0, epochs={c.epochs})"),
            (c.batch_size >= 1, "batch_size must be >= 1"),
            (c.grad_clip >= 0, "grad_clip must be >= 0"),
            (2 <= c.num_shapes_min <= c.num_shapes_max,
             "need 2 <= num_shapes_min <= num_shapes_max"),
            (0.0 <= c.relational_prob <= 1.0, "relational_prob must be in [0, 1]"),
            (0 < c.val_count < c.count, "need 0 < val_count < count"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if isinstance(v, bool):
                v = "on" if v else "off"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")


def _parse_value(raw: str, field: dataclasses.Field, key: str):
    if field.type in ("bool", bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"key {key!r}: expected on/off, got {raw!r}")
    try:
        if field.type in ("int", int):
            return int(raw)
        if field.type in ("float", float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"key {key!r}: cannot parse {raw!r}") from None
    return raw


def parse_config(text: str, base: RunConfig = None) -> RunConfig:
    """Apply key=value lines ('#' comments allowed) on top of the defaults."""
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in fields:
            raise ConfigError(f"line {n}: unknown key {key!r}")
        setattr(cfg, key, _parse_value(raw, fields[key], key))
    return cfg


def load_config(path: Union[str, Path], base: RunConfig = None) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"), base)
