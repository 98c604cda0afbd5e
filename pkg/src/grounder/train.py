"""Training loop: batched tape descent with per-epoch validation.

Each batch builds one tape over per-sample forward passes, backs up the mean
loss, and takes one AdamW step with the two-group schedule.  The log carries
one row per epoch: epoch, lr_fusion, lr_branch, loss, l1_term, giou_term,
val_acc.  Checkpoints are written every epoch and store the *next* epoch
index, so resuming continues the numbering.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from . import losses
from .autograd import Tape, Tensor, backward, scale
from .boxes import Box, accuracy_at_iou
from .checkpoint import model_state, save_arrays
from .config import RunConfig
from .errors import ContractError
from .language import Vocabulary, tokenize
from .losses import LossConfig
from .model import GroundingModel
from .optim import GROUPS, AdamW, Schedule, clip_grad_norm
from .synthetic import GroundingSample
from .visual import ImageInput

LOG_COLUMNS = ("epoch", "lr_fusion", "lr_branch", "loss",
               "l1_term", "giou_term", "val_acc")


@dataclass
class Prepared:
    id: str
    image: ImageInput
    ids: np.ndarray
    mask: np.ndarray
    target: np.ndarray   # (4,) normalized cxcywh
    gt: Box
    template: str


@dataclass
class EpochRecord:
    epoch: int
    lr_fusion: float
    lr_branch: float
    loss: float
    l1_term: float
    giou_term: float
    val_acc: float

    def csv_row(self) -> str:
        return (f"{self.epoch},{self.lr_fusion:.3g},{self.lr_branch:.3g},"
                f"{self.loss:.6f},{self.l1_term:.6f},{self.giou_term:.6f},"
                f"{self.val_acc:.4f}")


def prepare(samples: Sequence[GroundingSample], vocab: Vocabulary,
            n_l: int) -> list[Prepared]:
    """Tokenize and convert to model inputs once, ahead of the epoch loop."""
    out = []
    for s in samples:
        ids, mask = tokenize(s.expression, vocab, n_l)
        out.append(Prepared(
            s.id, ImageInput.from_array(s.image), ids, mask,
            np.array(s.box.as_list(), dtype=np.float32), s.box, s.template))
    return out


def evaluate(model: GroundingModel,
             prepared: Sequence[Prepared]) -> tuple[float, list[tuple[str, Box, Box]]]:
    """Accuracy at IoU 0.5 plus (id, prediction, ground truth) triples."""
    rows = [(p.id, model.predict(p.image, p.ids, p.mask), p.gt) for p in prepared]
    acc = accuracy_at_iou([r[1] for r in rows], [r[2] for r in rows])
    return acc, rows


def run_batch(model: GroundingModel, batch: Sequence[Prepared], opt: AdamW,
              loss_cfg: LossConfig, drop_rng: np.random.Generator,
              grad_clip: float = 0.0) -> tuple[float, float, float]:
    """One optimizer step on the mean batch loss; returns summed terms."""
    l1_sum = giou_sum = 0.0
    with Tape():
        total = None
        for p in batch:
            out = model.forward(p.image, p.ids, p.mask, train=True, rng=drop_rng)
            target = Tensor(p.target)
            l1 = losses.smooth_l1(out.box, target, loss_cfg.beta)
            gterm = 1.0 - losses.giou(out.box, target)
            sample_loss = l1 + scale(gterm, loss_cfg.giou_weight)
            l1_sum += l1.item()
            giou_sum += gterm.item()
            total = sample_loss if total is None else total + sample_loss
        batch_loss = scale(total, 1.0 / len(batch))
        grads = backward(batch_loss)
    if grad_clip > 0:
        clip_grad_norm(grads, grad_clip)
    opt.step(grads)
    loss_sum = l1_sum + loss_cfg.giou_weight * giou_sum
    return loss_sum, l1_sum, giou_sum


def fit(model: GroundingModel, train_samples: Sequence[GroundingSample],
        val_samples: Sequence[GroundingSample], cfg: RunConfig,
        vocab: Vocabulary, *, log_path: Union[str, Path, None] = None,
        checkpoint_path: Union[str, Path, None] = None,
        opt: Optional[AdamW] = None, start_epoch: int = 0,
        echo: Optional[Callable[[str], None]] = None) -> tuple[list[EpochRecord], AdamW]:
    """Full schedule from start_epoch; deterministic given cfg.seed."""
    if not train_samples:
        raise ContractError("training set is empty")
    schedule = Schedule(cfg.lr_fusion, cfg.lr_branch, cfg.drop_epoch, cfg.epochs)
    if opt is None:
        opt = AdamW(model.param_groups(), cfg.weight_decay)
    loss_cfg = LossConfig(cfg.giou_weight, cfg.smooth_l1_beta)
    train_prep = prepare(train_samples, vocab, cfg.n_l)
    val_prep = prepare(val_samples, vocab, cfg.n_l) if val_samples else []

    if log_path is not None and start_epoch == 0:
        Path(log_path).write_text(",".join(LOG_COLUMNS) + "\n", encoding="utf-8")

    records = []
    for epoch in range(start_epoch, cfg.epochs):
        lrs = {g: schedule.lr_at_epoch(g, epoch) for g in GROUPS}
        opt.set_lrs(lrs)
        order = np.random.default_rng([cfg.seed, 101, epoch]).permutation(len(train_prep))
        drop_rng = np.random.default_rng([cfg.seed, 202, epoch])
        sums = np.zeros(3)
        for lo in range(0, len(order), cfg.batch_size):
            batch = [train_prep[i] for i in order[lo:lo + cfg.batch_size]]
            sums += run_batch(model, batch, opt, loss_cfg, drop_rng, cfg.grad_clip)
        n = len(train_prep)
        val_acc = evaluate(model, val_prep)[0] if val_prep else float("nan")
        rec = EpochRecord(epoch, lrs["fusion"], lrs["branch"],
                          sums[0] / n, sums[1] / n, sums[2] / n, val_acc)
        records.append(rec)
        if echo is not None:
            echo(rec.csv_row())
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(rec.csv_row() + "\n")
        if checkpoint_path is not None:
            save_arrays(checkpoint_path, model_state(model, opt, epoch + 1))
    return records, opt
