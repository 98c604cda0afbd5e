"""Command-line entry points.

Subcommands: gen-data, train, eval, predict, attn-dump, grad-check.  All
artifacts land under --out.  Exit codes: 0 success, 1 usage or configuration
problem, 2 runtime/data/contract failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .boxes import Box
from .checkpoint import load_arrays, load_into
from .config import RunConfig, load_config
from .errors import ConfigError, FormatError, GrounderError
from .gradcheck import composite_grad_check, run_suite
from .language import Vocabulary, build_vocab
from .model import GroundingModel, build_model
from .netpbm import write_pgm
from .optim import AdamW
from .synthetic import dataset_read, dataset_write, make_dataset
from .train import evaluate, fit, prepare


class _Parser(argparse.ArgumentParser):
    # usage problems are exit code 1, not argparse's default 2
    def error(self, message):
        self.exit(1, f"{self.prog}: error: {message}\n")


def _build_parser() -> _Parser:
    p = _Parser(prog="grounder",
                description="two-branch transformer grounding on synthetic scenes")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, *flags):
        sp = sub.add_parser(name, help=help_)
        if "config" in flags:
            sp.add_argument("--config", help="key=value config file")
        if "seed" in flags:
            sp.add_argument("--seed", type=int, help="override the config seed")
        if "out" in flags:
            sp.add_argument("--out", help="output directory")
        if "resume" in flags:
            sp.add_argument("--resume", help="checkpoint to continue from")
        if "checkpoint" in flags:
            sp.add_argument("--checkpoint", help="checkpoint file")
        if "dataset" in flags:
            sp.add_argument("--dataset", help="dataset directory")
        if "sample-id" in flags:
            sp.add_argument("--sample-id", dest="sample_id", help="sample to inspect")
        return sp

    add("gen-data", "generate the synthetic dataset", "config", "seed", "out")
    add("train", "train a model", "config", "seed", "out", "resume", "dataset")
    add("eval", "measure accuracy@0.5 on a dataset",
        "config", "checkpoint", "dataset", "out")
    add("predict", "predict one sample's box",
        "config", "checkpoint", "dataset", "sample-id")
    add("attn-dump", "export joint-attention heatmaps for one sample",
        "config", "checkpoint", "dataset", "sample-id", "out")
    gc = add("grad-check", "finite-difference check of every backward rule", "seed")
    gc.add_argument("--corrupt", metavar="OP",
                    help="test hook: corrupt the named kernel's backward rule")
    return p


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "dataset", None):
        cfg.dataset = args.dataset
    return cfg.validate()


def _need(value: Optional[str], what: str) -> str:
    if not value:
        raise ConfigError(f"{what} is required (flag or config key)")
    return value


def _split_dir(root: Path) -> Path:
    if (root / "samples.jsonl").is_file():
        return root
    if (root / "val" / "samples.jsonl").is_file():
        return root / "val"
    raise FormatError(f"no samples.jsonl under {root}")


def _load_model(args, cfg_hint: Optional[RunConfig] = None
                ) -> tuple[GroundingModel, Vocabulary, RunConfig]:
    """Rebuild a model from a checkpoint plus its sibling config and vocab."""
    ckpt = Path(_need(getattr(args, "checkpoint", None), "--checkpoint"))
    sibling = ckpt.parent / "config.txt"
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    elif cfg_hint is not None:
        cfg = cfg_hint
    elif sibling.is_file():
        cfg = load_config(sibling)
    else:
        raise ConfigError(f"no --config given and {sibling} not found")
    cfg.validate()
    vocab_path = ckpt.parent / "vocab.txt"
    if not vocab_path.is_file():
        raise FormatError(f"vocabulary not found next to checkpoint: {vocab_path}")
    vocab = Vocabulary.load(vocab_path)
    model = build_model(cfg, len(vocab), np.random.default_rng([cfg.seed, 1]))
    load_into(model, load_arrays(ckpt))
    return model, vocab, cfg


def _cmd_gen_data(args) -> int:
    cfg = _resolve_config(args)
    out = Path(_need(cfg.out, "--out"))
    train, val = make_dataset(cfg.image_size, cfg.num_shapes_min,
                              cfg.num_shapes_max, cfg.relational_prob,
                              cfg.count, cfg.val_count, cfg.seed)
    dataset_write(train, out / "train")
    dataset_write(val, out / "val")
    print(f"wrote {len(train)} train / {len(val)} val samples to {out}")
    return 0


def _cmd_train(args) -> int:
    cfg = _resolve_config(args)
    out = Path(_need(cfg.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    data_root = Path(_need(cfg.dataset, "--dataset"))
    train_set = dataset_read(data_root / "train")
    val_set = dataset_read(data_root / "val")
    vocab = build_vocab(s.expression for s in train_set)
    vocab.save(out / "vocab.txt")
    cfg.save(out / "config.txt")
    model = build_model(cfg, len(vocab), np.random.default_rng([cfg.seed, 1]))
    opt = None
    start_epoch = 0
    if getattr(args, "resume", None):
        opt = AdamW(model.param_groups(), cfg.weight_decay)
        start_epoch = load_into(model, load_arrays(args.resume), opt)
        print(f"resumed at epoch {start_epoch}")
    if start_epoch >= cfg.epochs:
        print(f"nothing to do: checkpoint is already at epoch {start_epoch}")
        return 0
    records, _ = fit(model, train_set, val_set, cfg, vocab,
                     log_path=out / "log.csv",
                     checkpoint_path=out / "checkpoint.tvg",
                     opt=opt, start_epoch=start_epoch, echo=print)
    print(f"final val accuracy@0.5: {records[-1].val_acc:.4f}")
    return 0


def _cmd_eval(args) -> int:
    model, vocab, cfg = _load_model(args)
    data = dataset_read(_split_dir(Path(_need(args.dataset, "--dataset"))))
    acc, rows = evaluate(model, prepare(data, vocab, cfg.n_l))
    print(f"accuracy@0.5 {acc:.4f}")
    if getattr(args, "out", None):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "eval.csv").write_text(f"accuracy\n{acc:.6f}\n", encoding="utf-8")
        import json
        with open(out / "predictions.jsonl", "w", encoding="utf-8") as fh:
            for sid, pred, gt in rows:
                fh.write(json.dumps({"id": sid, "pred": pred.as_list(),
                                     "gt": gt.as_list()}) + "\n")
    return 0


def _find_sample(data, sample_id: str):
    for s in data:
        if s.id == sample_id:
            return s
    raise FormatError(f"sample {sample_id!r} not in dataset")


def _cmd_predict(args) -> int:
    model, vocab, cfg = _load_model(args)
    data = dataset_read(_split_dir(Path(_need(args.dataset, "--dataset"))))
    sample = _find_sample(data, _need(args.sample_id, "--sample-id"))
    prep = prepare([sample], vocab, cfg.n_l)[0]
    pred = model.predict(prep.image, prep.ids, prep.mask)
    print(f"expression: {sample.expression}")
    print("pred " + " ".join(f"{v:.4f}" for v in pred.as_list()))
    print("gt   " + " ".join(f"{v:.4f}" for v in sample.box.as_list()))
    return 0


def _cmd_attn_dump(args) -> int:
    model, vocab, cfg = _load_model(args)
    out = Path(_need(args.out, "--out"))
    out.mkdir(parents=True, exist_ok=True)
    data = dataset_read(_split_dir(Path(_need(args.dataset, "--dataset"))))
    sample = _find_sample(data, _need(args.sample_id, "--sample-id"))
    prep = prepare([sample], vocab, cfg.n_l)[0]
    result = model.forward(prep.image, prep.ids, prep.mask, train=False)
    lines = [f"expression {sample.expression}",
             "pred " + " ".join(f"{v:.6f}" for v in result.box.data),
             "gt   " + " ".join(f"{v:.6f}" for v in sample.box.as_list())]
    for i, heat in enumerate(result.heatmaps):
        peak = float(heat.max())
        scaled = np.zeros_like(heat) if peak == 0 else heat / peak
        write_pgm(out / f"layer{i}.pgm", np.round(scaled * 255).astype(np.uint8))
        lines.append(f"layer{i}.pgm scale {peak:.8e}")
    (out / "dump.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(result.heatmaps)} heatmaps to {out}")
    return 0


def _cmd_grad_check(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = run_suite(seed=seed, corrupt=args.corrupt)
    ok = True
    for name, err, passed in results:
        ok &= passed
        print(f"{name:<20} {err:.3e} {'PASS' if passed else 'FAIL'}")
    comp = composite_grad_check(seed=seed)
    comp_ok = comp < 1e-3
    ok &= comp_ok
    print(f"{'composite-loss':<20} {comp:.3e} {'PASS' if comp_ok else 'FAIL'}")
    return 0 if ok else 2


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "predict": _cmd_predict,
    "attn-dump": _cmd_attn_dump,
    "grad-check": _cmd_grad_check,
}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit as exc:  # argparse help/usage paths
        return int(exc.code or 0)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except GrounderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
