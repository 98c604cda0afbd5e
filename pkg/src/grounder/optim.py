"""AdamW with decoupled decay and the two-group learning-rate schedule.

The fusion/head group and the branch group keep a fixed 10x rate ratio; both
drop by a factor of 10 at the drop epoch (0-based: with drop_epoch=60,
epochs 0..59 run at the base rate and epoch 60 onward at base/10).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autograd import Tensor
from .errors import ConfigError, ContractError

GROUPS = ("fusion", "branch")


@dataclass(frozen=True)
class Schedule:
    lr_fusion: float = 1e-4
    lr_branch: float = 1e-5
    drop_epoch: int = 60
    total_epochs: int = 90
    drop_factor: float = 10.0

    def __post_init__(self):
        if not 0 <= self.drop_epoch < self.total_epochs:
            raise ConfigError(
                f"drop_epoch {self.drop_epoch} must lie in [0, {self.total_epochs})")
        if self.lr_fusion <= 0 or self.lr_branch <= 0 or self.drop_factor <= 0:
            raise ConfigError("rates and drop factor must be positive")

    def lr_at_epoch(self, group: str, epoch: int) -> float:
        if group not in GROUPS:
            raise ContractError(f"unknown parameter group {group!r}")
        if not 0 <= epoch < self.total_epochs:
            raise ContractError(
                f"epoch {epoch} outside [0, {self.total_epochs})")
        base = self.lr_fusion if group == "fusion" else self.lr_branch
        return base if epoch < self.drop_epoch else base / self.drop_factor


class AdamW:
    """Bias-corrected Adam plus decoupled decay th <- th - lr*wd*th.

    Parameters arrive pre-grouped; each group carries its own learning rate,
    set via `set_lrs` before stepping.  Moments are keyed by parameter name
    so they can ride along in checkpoints.
    """

    BETA1, BETA2, EPS = 0.9, 0.999, 1e-8

    def __init__(self, groups: dict[str, list[tuple[str, Tensor]]],
                 weight_decay: float = 0.0):
        if weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {weight_decay}")
        seen = set()
        for g in groups:
            if g not in GROUPS:
                raise ContractError(f"unknown parameter group {g!r}")
            for name, _ in groups[g]:
                if name in seen:
                    raise ContractError(f"duplicate parameter name {name!r}")
                seen.add(name)
        self.groups = groups
        self.wd = weight_decay
        self.lrs = {g: 0.0 for g in groups}
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data)
                  for g in groups.values() for name, p in g}
        self.v = {name: np.zeros_like(p.data)
                  for g in groups.values() for name, p in g}

    def set_lrs(self, lrs: dict[str, float]) -> None:
        for g, lr in lrs.items():
            if g not in self.lrs:
                raise ContractError(f"unknown parameter group {g!r}")
            self.lrs[g] = lr

    def step(self, grads: dict[Tensor, np.ndarray]) -> None:
        """One update over all groups; absent grads count as zero."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.BETA1 ** t
        c2 = 1.0 - self.BETA2 ** t
        for group, params in self.groups.items():
            lr = self.lrs[group]
            for name, p in params:
                g = grads.get(p)
                m, v = self.m[name], self.v[name]
                if g is not None:
                    if g.shape != p.data.shape:
                        raise ContractError(
                            f"gradient shape {g.shape} != parameter {name} "
                            f"shape {p.data.shape}")
                    m *= self.BETA1
                    m += (1.0 - self.BETA1) * g
                    v *= self.BETA2
                    v += (1.0 - self.BETA2) * (g * g)
                else:
                    m *= self.BETA1
                    v *= self.BETA2
                p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.EPS)
                if self.wd:
                    p.data -= lr * self.wd * p.data


def clip_grad_norm(grads: dict[Tensor, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so their global L2 norm is at most max_norm."""
    if max_norm <= 0:
        raise ContractError(f"max_norm must be positive, got {max_norm}")
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total
