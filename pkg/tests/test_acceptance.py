"""Acceptance gate: one test per shipping criterion, one verdict line each.

Every test prints `criterion <n> <name>: PASS/FAIL (<evidence>)` before
asserting, so a plain `pytest -s tests/test_acceptance.py` reads as a
checklist.  The training-based criteria rebuild their experiments from fixed
seeds; nothing is cached between runs.  The whole module is CPU-heavy by
design (the generalization run alone is a 40-epoch training job).
"""

import time

import numpy as np

from grounder.autograd import Tensor
from grounder.boxes import Box, giou, iou
from grounder.checkpoint import load_arrays, load_into, model_state, save_arrays
from grounder.config import RunConfig
from grounder.fusion import (REG_MODES, FusionHead, assemble_joint,
                             project_modalities, vl_forward)
from grounder.gradcheck import composite_grad_check, run_suite
from grounder.language import build_vocab, tokenize
from grounder.losses import LossConfig
from grounder.model import build_model
from grounder.optim import AdamW, Schedule
from grounder.synthetic import make_dataset
from grounder.train import evaluate, prepare, run_batch, fit
from grounder.visual import ImageInput, fit_image


def verdict(num: int, name: str, ok: bool, detail: str) -> None:
    line = f"criterion {num} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line)
    assert ok, line


def desk_model(seed: int = 0, **overrides):
    cfg = RunConfig(**overrides)
    vocab_seed = ["the", "red", "circle", "left", "of", "small", "square"]
    vocab = build_vocab([" ".join(vocab_seed)])
    model = build_model(cfg, len(vocab), np.random.default_rng([seed, 1]))
    return cfg, vocab, model


# --- criterion 1: finite-difference gradient suite -------------------------

def test_criterion_1_gradient_suite():
    t0 = time.time()
    worst_op, worst_composite = 0.0, 0.0
    failed = []
    for seed in range(5):
        for name, err, passed in run_suite(seed=seed, tol=1e-4):
            worst_op = max(worst_op, err)
            if not passed:
                failed.append(f"{name}@{seed}")
        worst_composite = max(worst_composite, composite_grad_check(seed=seed))
    elapsed = time.time() - t0
    ok = not failed and worst_composite < 1e-3 and elapsed < 120
    verdict(1, "gradient-suite", ok,
            f"5 seeds, worst op err {worst_op:.2e} (<1e-4), "
            f"worst composite {worst_composite:.2e} (<1e-3), {elapsed:.0f}s"
            + (f", failed: {failed}" if failed else ""))


# --- criterion 2: IoU/GIoU oracles and properties ---------------------------

def test_criterion_2_box_oracles():
    t0 = time.time()
    a = Box.from_corners(0, 0, 2, 2)
    b = Box.from_corners(1, 1, 3, 3)
    oracle_iou = abs(iou(a, b) - 1 / 7)
    c = Box.from_corners(0, 0, 1, 1)
    d = Box.from_corners(2, 2, 3, 3)
    oracle_giou_disjoint = abs(giou(c, d) - (-7 / 9))
    e = Box.from_corners(0, 0, 2, 2)
    f = Box.from_corners(1, 0, 3, 2)
    oracle_giou_abut = abs(giou(e, f) - 1 / 3)

    rng = np.random.default_rng(0)
    worst_sym, worst_rel, worst_scale = 0.0, 0.0, 0.0
    range_ok = True
    draws = rng.random((100_000, 9))
    for row in draws:
        p = Box(row[0], row[1], row[2] * 0.9 + 1e-4, row[3] * 0.9 + 1e-4)
        q = Box(row[4], row[5], row[6] * 0.9 + 1e-4, row[7] * 0.9 + 1e-4)
        i1, g1 = iou(p, q), giou(p, q)
        worst_sym = max(worst_sym, abs(i1 - iou(q, p)), abs(g1 - giou(q, p)))
        worst_rel = max(worst_rel, g1 - i1)
        if not (0.0 <= i1 <= 1.0 and -1.0 < g1 <= 1.0):
            range_ok = False
        s = 0.1 + row[8] * 9.9
        ps = Box(p.cx * s, p.cy * s, p.w * s, p.h * s)
        qs = Box(q.cx * s, q.cy * s, q.w * s, q.h * s)
        worst_scale = max(worst_scale, abs(giou(ps, qs) - g1), abs(iou(ps, qs) - i1))
    elapsed = time.time() - t0
    ok = (max(oracle_iou, oracle_giou_disjoint, oracle_giou_abut) < 1e-9
          and worst_sym < 1e-12 and worst_rel <= 1e-12 and range_ok
          and worst_scale < 1e-6 and elapsed < 30)
    verdict(2, "box-oracles", ok,
            f"hand values off by {max(oracle_iou, oracle_giou_disjoint, oracle_giou_abut):.1e} "
            f"(<1e-9), 1e5 pairs: sym {worst_sym:.1e}, giou-iou gap {worst_rel:.1e}, "
            f"scale drift {worst_scale:.1e}, ranges {'ok' if range_ok else 'VIOLATED'}, "
            f"{elapsed:.0f}s")


# --- criterion 3: mask invariance -------------------------------------------

def test_criterion_3_mask_invariance():
    cfg, vocab, model = desk_model(seed=3)
    rng = np.random.default_rng(9)
    arr = (rng.random((48, 64, 3)) * 255).astype(np.uint8)
    image = fit_image(arr, cfg.image_size)
    ids, mask = tokenize("the red circle", vocab, cfg.n_l)
    base_vis = model.visual.forward(image)
    base_lang = model.lang.forward(ids, mask)
    base_box = model.predict(image, ids, mask)

    # visual: rewrite the padded pixel rows
    noisy = image.pixels.data.copy()
    noisy[:, 48:, :] = rng.random((3, 16, 64))
    poked = ImageInput(Tensor(noisy), image.valid_mask)
    vis2 = model.visual.forward(poked)
    valid = base_vis.token_mask
    v_drift = float(np.abs(vis2.embeddings.data[:, valid]
                           - base_vis.embeddings.data[:, valid]).max())
    box2 = model.predict(poked, ids, mask)
    v_box_drift = max(abs(x - y) for x, y in zip(box2.as_list(), base_box.as_list()))

    # linguistic: rewrite the [PAD] slots with a real word id
    ids2 = ids.copy()
    ids2[~mask] = 5
    lang2 = model.lang.forward(ids2, mask)
    l_drift = float(np.abs(lang2.embeddings.data[:, mask]
                           - base_lang.embeddings.data[:, mask]).max())
    box3 = model.predict(image, ids2, mask)
    l_box_drift = max(abs(x - y) for x, y in zip(box3.as_list(), base_box.as_list()))

    # joint transformer: rewrite masked joint columns directly
    p_v, p_l = project_modalities(base_vis.embeddings, base_lang.embeddings,
                                  model.fusion)
    joint = assemble_joint(p_v, p_l, model.fusion, base_vis.token_mask,
                           base_lang.token_mask)
    states, _ = vl_forward(joint, model.fusion, base_vis.grid)
    poked_emb = joint.embeddings.data.copy()
    poked_emb[:, ~joint.mask] += rng.random((model.fusion.c_p,
                                             int((~joint.mask).sum()))) * 3.0
    joint2 = type(joint)(Tensor(poked_emb), joint.mask, joint.reg_index)
    states2, _ = vl_forward(joint2, model.fusion, base_vis.grid)
    j_drift = float(np.abs(states2.data[:, joint.mask]
                           - states.data[:, joint.mask]).max())

    worst = max(v_drift, v_box_drift, l_drift, l_box_drift, j_drift)
    verdict(3, "mask-invariance", worst <= 1e-5,
            f"visual {v_drift:.1e}, linguistic {l_drift:.1e}, joint {j_drift:.1e}, "
            f"box {max(v_box_drift, l_box_drift):.1e}, all <= 1e-5")


# --- criterion 4: shape and assembly contracts ------------------------------

def test_criterion_4_assembly_contracts(tmp_path):
    cfg, vocab, model = desk_model(seed=4)
    rng = np.random.default_rng(4)
    arr = (rng.random((64, 64, 3)) * 255).astype(np.uint8)
    image = ImageInput.from_array(arr)
    ids, mask = tokenize("the red circle left of the square", vocab, cfg.n_l)
    vis = model.visual.forward(image)
    lang = model.lang.forward(ids, mask)
    p_v, p_l = project_modalities(vis.embeddings, lang.embeddings, model.fusion)
    joint = assemble_joint(p_v, p_l, model.fusion, vis.token_mask,
                           lang.token_mask)
    desk_len = joint.embeddings.shape[1]

    _, weights = model.fusion.encoder.forward(joint.embeddings, mask=joint.mask,
                                              need_weights=True)
    row_err = max(float(np.abs(w.sum(axis=2) - 1.0).max()) for w in weights)
    out = model.forward(image, ids, mask)
    heat_ok = (len(out.heatmaps) == cfg.vl_layers
               and all(h.shape == (8, 8) for h in out.heatmaps))

    # full-scale assembly: 400 visual tokens, 40 linguistic, one reg slot
    big = FusionHead(256, 768, 256, 400, 40, 6, 8, 2048, 0.0, "learnable",
                     np.random.default_rng(1))
    f_v = Tensor(np.random.default_rng(2).standard_normal((256, 400)) * 0.1)
    f_l = Tensor(np.random.default_rng(3).standard_normal((768, 40)) * 0.1)
    b_v, b_l = project_modalities(f_v, f_l, big)
    big_joint = assemble_joint(b_v, b_l, big, np.ones(400, bool), np.ones(40, bool))
    big_states, big_maps = vl_forward(big_joint, big, (20, 20))
    full_scale_ok = (big_joint.embeddings.shape[1] == 441
                     and big_joint.reg_index == 440
                     and big_states.shape == (256, 441)
                     and len(big_maps) == 6
                     and all(m.shape == (20, 20) for m in big_maps))

    # checkpoint round trip must be bit-exact
    opt = AdamW(model.param_groups(), cfg.weight_decay)
    path = tmp_path / "model.tvg"
    save_arrays(path, model_state(model, opt, epoch=11))
    cfg2, _, twin = desk_model(seed=99)
    opt2 = AdamW(twin.param_groups(), cfg2.weight_decay)
    epoch = load_into(twin, load_arrays(path), opt2)
    bit_exact = epoch == 11 and all(
        np.array_equal(p.data, q.data)
        for (_, p), (_, q) in zip(model.named_parameters(),
                                  twin.named_parameters()))

    ok = (desk_len == 105 and joint.reg_index == 104 and row_err < 1e-6
          and heat_ok and full_scale_ok and bit_exact)
    verdict(4, "assembly-contracts", ok,
            f"desk joint len {desk_len} (=105), full-scale len 441, attention "
            f"row drift {row_err:.1e}, heatmaps {len(out.heatmaps)}x8x8, "
            f"checkpoint bit-exact {bit_exact}")


# --- criterion 5: learning-rate schedule ------------------------------------

def test_criterion_5_schedule_contract():
    sched = Schedule()
    worst = 0.0
    for epoch in range(sched.total_epochs):
        fusion = sched.lr_at_epoch("fusion", epoch)
        branch = sched.lr_at_epoch("branch", epoch)
        want_f = 1e-4 if epoch < 60 else 1e-5
        want_b = 1e-5 if epoch < 60 else 1e-6
        worst = max(worst, abs(fusion - want_f) / want_f,
                    abs(branch - want_b) / want_b,
                    abs(fusion / branch - 10.0))
    verdict(5, "schedule-contract", worst < 1e-12,
            f"90 epochs, fusion 1e-4->1e-5 at 60, branch 1e-5->1e-6, "
            f"ratio 10, worst rel drift {worst:.1e}")


# --- criteria 6 and 9 share the single-batch overfit harness ----------------

def overfit_16(reg_mode: str, *, steps: int = 500, drop_at: int = 375,
               stop_acc: float = 1.0, stop_loss: float = 0.02):
    """Train on 16 fixed samples; returns (loss, accuracy, steps used)."""
    cfg = RunConfig(reg_init=reg_mode, count=17, val_count=1)
    train, _ = make_dataset(cfg.image_size, cfg.num_shapes_min,
                            cfg.num_shapes_max, cfg.relational_prob,
                            cfg.count, cfg.val_count, seed=11)
    vocab = build_vocab(s.expression for s in train)
    model = build_model(cfg, len(vocab), np.random.default_rng([cfg.seed, 1]))
    prep = prepare(train, vocab, cfg.n_l)
    opt = AdamW(model.param_groups(), cfg.weight_decay)
    loss_cfg = LossConfig(cfg.giou_weight, cfg.smooth_l1_beta)
    loss = float("inf")
    acc = 0.0
    for step in range(steps):
        scale = 0.1 if step >= drop_at else 1.0
        opt.set_lrs({"fusion": cfg.lr_fusion * scale,
                     "branch": cfg.lr_branch * scale})
        total, _, _ = run_batch(model, prep, opt, loss_cfg, None)
        loss = total / len(prep)
        if loss < stop_loss and step % 10 == 0:
            acc, _ = evaluate(model, prep)
            if acc >= stop_acc:
                return loss, acc, step + 1
    acc, _ = evaluate(model, prep)
    return loss, acc, steps


def test_criterion_6_single_batch_overfit():
    t0 = time.time()
    loss, acc, steps = overfit_16("learnable")
    elapsed = time.time() - t0
    ok = loss < 0.02 and acc == 1.0 and steps <= 500 and elapsed < 300
    verdict(6, "single-batch-overfit", ok,
            f"loss {loss:.4f} (<0.02), accuracy {acc:.0%} (=100%), "
            f"{steps} steps (<=500), {elapsed:.0f}s (<300)")


# --- criterion 7: desk-scale generalization ---------------------------------

def test_criterion_7_generalization():
    t0 = time.time()
    cfg = RunConfig()
    train, val = make_dataset(cfg.image_size, cfg.num_shapes_min,
                              cfg.num_shapes_max, cfg.relational_prob,
                              cfg.count, cfg.val_count, seed=cfg.seed)
    vocab = build_vocab(s.expression for s in train)
    model = build_model(cfg, len(vocab), np.random.default_rng([cfg.seed, 1]))
    records, _ = fit(model, train, val, cfg, vocab)
    acc = records[-1].val_acc
    elapsed = time.time() - t0
    ok = acc >= 0.90 and elapsed < 1800
    verdict(7, "generalization", ok,
            f"1800 train / 200 val, 40 epochs, accuracy@0.5 {acc:.4f} "
            f"(>=0.90), {elapsed:.0f}s (<1800)")


# --- criterion 8: ablation ordering -----------------------------------------

ABLATION_RUNS = dict(count=700, val_count=100, epochs=12, drop_epoch=9)


def ablation_accuracy(seed: int, **model_overrides) -> float:
    cfg = RunConfig(seed=seed, **ABLATION_RUNS, **model_overrides)
    train, val = make_dataset(cfg.image_size, cfg.num_shapes_min,
                              cfg.num_shapes_max, cfg.relational_prob,
                              cfg.count, cfg.val_count, seed=cfg.seed)
    vocab = build_vocab(s.expression for s in train)
    model = build_model(cfg, len(vocab), np.random.default_rng([cfg.seed, 1]))
    fit(model, train, val, cfg, vocab)
    relational = [s for s in val if s.template == "relational"]
    acc, _ = evaluate(model, prepare(relational, vocab, cfg.n_l))
    return acc


def test_criterion_8_ablation_ordering():
    t0 = time.time()
    full, no_branch, no_vl = [], [], []
    for seed in (0, 1, 2):
        full.append(ablation_accuracy(seed))
        no_branch.append(ablation_accuracy(seed, visual_transformer=False,
                                           linguistic_transformer=False))
        no_vl.append(ablation_accuracy(seed, vl_layers=0))
    m_full = float(np.mean(full))
    m_nb = float(np.mean(no_branch))
    m_nv = float(np.mean(no_vl))
    elapsed = time.time() - t0
    ok = m_full > m_nb and m_full > m_nv
    verdict(8, "ablation-ordering", ok,
            f"3 seeds, relational subset: full {m_full:.3f} vs "
            f"branches-off {m_nb:.3f} vs vl-off {m_nv:.3f}, {elapsed:.0f}s")


# --- criterion 9: every reg-token initialization mode trains ----------------

def test_criterion_9_reg_init_modes():
    results = {}
    for mode in REG_MODES:
        loss, acc, steps = overfit_16(mode, stop_acc=0.8, stop_loss=0.05)
        results[mode] = (acc, steps)
    ok = all(acc >= 0.8 for acc, _ in results.values())
    detail = ", ".join(f"{m} {a:.0%}@{s}" for m, (a, s) in results.items())
    verdict(9, "reg-init-modes", ok, detail + " (all >=80%)")
