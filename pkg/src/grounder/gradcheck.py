"""Finite-difference verification of every backward rule in the engine.

``grad_check`` compares analytic gradients against central differences in
float64.  ``run_suite`` exercises each registered kernel on seeded random
inputs and reports the worst relative error per kernel.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tape, Tensor, backward
from .errors import ContractError

DEFAULT_EPS = 1e-5
DEFAULT_TOL = 1e-4


def grad_check(fn: Callable[..., Tensor], inputs: Sequence[Tensor],
               eps: float = DEFAULT_EPS) -> float:
    """Max relative error between analytic and numeric gradients.

    `fn(*inputs)` must produce a scalar.  Inputs must be float64 tensors with
    requires_grad set; they are perturbed in place and restored.  The error
    for one element is |a - n| / max(1e-8, |a| + |n|).
    """
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError("grad_check needs float64 inputs")
        if not t.requires_grad:
            raise ContractError("grad_check inputs must have requires_grad")
    with Tape():
        loss = fn(*inputs)
        grads = backward(loss)

    def value() -> float:
        out = fn(*inputs)
        if out.size != 1:
            raise ContractError(f"grad_check: fn returned shape {out.shape}")
        return float(out.data.reshape(()))

    worst = 0.0
    for t in inputs:
        analytic = grads[t]
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + eps
            hi = value()
            flat[i] = keep - eps
            lo = value()
            flat[i] = keep
            numeric = (hi - lo) / (2.0 * eps)
            a = float(analytic.reshape(-1)[i])
            err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
            worst = max(worst, err)
    return worst


def _t(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


def _away_from(x: np.ndarray, pivot: float = 0.0, margin: float = 0.1) -> None:
    # keep kink points of relu/abs/max well clear of the probe step
    close = np.abs(x - pivot) < margin
    x[close] = pivot + margin * np.where(x[close] >= pivot, 1.0, -1.0) * 2.0


def _check_add(rng):
    a, b = _t(rng, 3, 4), _t(rng, 3, 4)
    return lambda a, b: ag.sum_(ag.add(a, b) * ag.add(a, b)), [a, b]


def _check_add_broadcast(rng):
    a, b = _t(rng, 3, 4), _t(rng, 3, 1)
    return lambda a, b: ag.sum_(ag.add(a, b) * 0.5 + ag.add(a, b) * ag.add(a, b)), [a, b]


def _check_sub(rng):
    a, b = _t(rng, 2, 5), _t(rng, 5)
    return lambda a, b: ag.sum_(ag.sub(a, b) * ag.sub(a, b)), [a, b]


def _check_mul(rng):
    a, b = _t(rng, 4, 3), _t(rng, 4, 3)
    return lambda a, b: ag.sum_(ag.mul(a, b) + ag.mul(a, a)), [a, b]


def _check_div(rng):
    a, b = _t(rng, 3, 3), _t(rng, 3, 3)
    b.data = b.data + np.where(b.data >= 0, 2.0, -2.0)
    return lambda a, b: ag.sum_(ag.div(a, b)), [a, b]


def _check_maximum(rng):
    a, b = _t(rng, 4, 4), _t(rng, 4, 4)
    a.data = b.data + np.where(np.abs(a.data - b.data) < 0.1, 0.3, a.data - b.data)
    return lambda a, b: ag.sum_(ag.maximum(a, b) * ag.maximum(a, b)), [a, b]


def _check_minimum(rng):
    a, b = _t(rng, 4, 4), _t(rng, 4, 4)
    a.data = b.data + np.where(np.abs(a.data - b.data) < 0.1, -0.3, a.data - b.data)
    return lambda a, b: ag.sum_(ag.minimum(a, b)), [a, b]


def _check_scale(rng):
    x = _t(rng, 3, 2)
    return lambda x: ag.sum_(ag.scale(x, -1.7) * ag.scale(x, 0.3)), [x]


def _check_relu(rng):
    x = _t(rng, 5, 5)
    _away_from(x.data)
    return lambda x: ag.sum_(ag.relu(x) * ag.relu(x)), [x]


def _check_abs(rng):
    x = _t(rng, 5, 5)
    _away_from(x.data)
    return lambda x: ag.sum_(ag.abs_(x)), [x]


def _check_sigmoid(rng):
    x = _t(rng, 4, 6)
    return lambda x: ag.sum_(ag.sigmoid(x * 3.0)), [x]


def _check_matmul(rng):
    a, b = _t(rng, 3, 4), _t(rng, 4, 2)
    return lambda a, b: ag.sum_(ag.matmul(a, b) * ag.matmul(a, b)), [a, b]


def _check_transpose(rng):
    x = _t(rng, 3, 5)
    return lambda x: ag.sum_(ag.transpose(x) * 2.0), [x]


def _check_reshape(rng):
    x = _t(rng, 2, 6)
    return lambda x: ag.sum_(ag.reshape(x, (3, 4)) * ag.reshape(x, (3, 4))), [x]


def _check_concat(rng):
    a, b = _t(rng, 3, 2), _t(rng, 3, 4)
    return lambda a, b: ag.sum_(ag.concat([a, b], axis=1) * ag.concat([a, b], axis=1)), [a, b]


def _check_take(rng):
    x = _t(rng, 4, 5)
    return lambda x: ag.sum_(x[1:3, ::2] * x[1:3, ::2]), [x]


def _check_narrow(rng):
    x = _t(rng, 6, 3)
    return lambda x: ag.sum_(ag.narrow(x, 0, 2, 3)), [x]


def _check_sum(rng):
    x = _t(rng, 3, 4)
    return lambda x: ag.sum_(ag.sum_(x, axis=1, keepdims=True) * ag.sum_(x, axis=1, keepdims=True)), [x]


def _check_mean(rng):
    x = _t(rng, 3, 4)
    return lambda x: ag.sum_(ag.mean_(x, axis=0) * ag.mean_(x, axis=0)), [x]


def _check_amax(rng):
    x = _t(rng, 3, 6)
    # spread values so the argmax is stable under the probe step
    x.data = np.sort(x.data, axis=1) + np.arange(6) * 0.5
    mask = np.ones((3, 6), dtype=bool)
    mask[:, -1] = False
    return lambda x: ag.sum_(ag.amax(x, axis=1, mask=mask)), [x]


def _check_where(rng):
    a, b = _t(rng, 4, 4), _t(rng, 4, 4)
    cond = rng.random((4, 4)) > 0.5
    return lambda a, b: ag.sum_(ag.where(cond, a, b) * ag.where(cond, a, b)), [a, b]


def _check_softmax(rng):
    x = _t(rng, 3, 5)
    mask = np.ones((3, 5), dtype=bool)
    mask[:, 4] = False
    return lambda x: ag.sum_(ag.softmax(x, axis=1, mask=mask)
                             * ag.softmax(x, axis=1, mask=mask)), [x]


def _check_layer_norm(rng):
    x = _t(rng, 4, 3)
    gamma = Tensor(rng.standard_normal(4) + 1.5, requires_grad=True, dtype=np.float64)
    beta = _t(rng, 4)
    return (lambda x, g, b: ag.sum_(ag.layer_norm(x, g, b, axis=0)
                                    * ag.layer_norm(x, g, b, axis=0)),
            [x, gamma, beta])


def _check_embedding_lookup(rng):
    table = _t(rng, 7, 3)
    ids = np.array([2, 0, 2, 5])
    return lambda t: ag.sum_(ag.embedding_lookup(t, ids) * ag.embedding_lookup(t, ids)), [table]


def _check_dropout(rng):
    x = _t(rng, 4, 4)

    def fn(x):
        # same seed on every evaluation so the mask is a constant
        r = np.random.default_rng(11)
        y = ag.dropout(x, 0.4, train=True, rng=r)
        return ag.sum_(y * y)

    return fn, [x]


def _check_conv2d(rng):
    x = _t(rng, 2, 6, 6)
    w = _t(rng, 3, 2, 3, 3)
    b = _t(rng, 3)
    return (lambda x, w, b: ag.sum_(ag.conv2d(x, w, b, stride=2, padding=1)
                                    * ag.conv2d(x, w, b, stride=2, padding=1)),
            [x, w, b])


OP_CHECKS: list[tuple[str, Callable]] = [
    ("add", _check_add),
    ("add-broadcast", _check_add_broadcast),
    ("sub", _check_sub),
    ("mul", _check_mul),
    ("div", _check_div),
    ("maximum", _check_maximum),
    ("minimum", _check_minimum),
    ("scale", _check_scale),
    ("relu", _check_relu),
    ("abs", _check_abs),
    ("sigmoid", _check_sigmoid),
    ("matmul", _check_matmul),
    ("transpose", _check_transpose),
    ("reshape", _check_reshape),
    ("concat", _check_concat),
    ("take", _check_take),
    ("narrow", _check_narrow),
    ("sum", _check_sum),
    ("mean", _check_mean),
    ("amax", _check_amax),
    ("where", _check_where),
    ("softmax", _check_softmax),
    ("layer_norm", _check_layer_norm),
    ("embedding_lookup", _check_embedding_lookup),
    ("dropout", _check_dropout),
    ("conv2d", _check_conv2d),
]


def composite_grad_check(reg_mode: str = "learnable", seed: int = 0,
                         probes: int = 150) -> float:
    """Finite-difference check of the whole model against the box loss.

    Builds a tiny float64 model, takes one analytic backward pass, then
    probes a uniform random subset of parameter coordinates.  Each probe
    tries steps 1e-4, 1e-3, 3e-5 and keeps the best agreement: the true
    derivative is step-independent, so only discretization artifacts are
    forgiven, never a wrong rule.  Returns the max relative error.
    """
    from . import losses
    from .config import RunConfig
    from .language import Vocabulary, tokenize
    from .model import build_model
    from .visual import ImageInput

    rng = np.random.default_rng(seed)
    with ag.precision("float64"):
        cfg = RunConfig(image_size=32, stem_width=4, c_v=8, c_l=8, c_p=8,
                        n_l=6, visual_layers=1, linguistic_layers=1,
                        vl_layers=1, visual_heads=2, linguistic_heads=2,
                        vl_heads=2, ffn_ratio=2, dropout=0.0,
                        reg_init=reg_mode)
        vocab = Vocabulary(["red", "blue", "thing", "left", "round"])
        model = build_model(cfg, len(vocab), rng)
        image = ImageInput(Tensor(rng.random((3, 32, 32))),
                           np.ones((32, 32), dtype=bool))
        ids, mask = tokenize("red round thing", vocab, cfg.n_l)
        target = Tensor(np.array([0.42, 0.55, 0.31, 0.27]))

        def loss_value() -> float:
            out = model.forward(image, ids, mask, train=False)
            return losses.grounding_loss(out.box, target).item()

        with Tape():
            out = model.forward(image, ids, mask, train=False)
            grads = backward(losses.grounding_loss(out.box, target))

        params = list(model.named_parameters())
        coords = [(i, j) for i, (_, p) in enumerate(params)
                  for j in range(p.size)]
        picked = rng.choice(len(coords), size=min(probes, len(coords)),
                            replace=False)

        def err_at(p: Tensor, j: int, a: float, eps: float) -> float:
            flat = p.data.reshape(-1)
            keep = flat[j]
            flat[j] = keep + eps
            hi = loss_value()
            flat[j] = keep - eps
            lo = loss_value()
            flat[j] = keep
            numeric = (hi - lo) / (2.0 * eps)
            return abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))

        worst = 0.0
        for c in picked:
            _, p = params[coords[c][0]]
            j = coords[c][1]
            a = float(grads[p].reshape(-1)[j]) if p in grads else 0.0
            err = err_at(p, j, a, 1e-4)
            if err >= 5e-4:
                err = min(err, err_at(p, j, a, 1e-3), err_at(p, j, a, 3e-5))
            worst = max(worst, err)
        return worst


def run_suite(seed: int = 0, tol: float = DEFAULT_TOL,
              corrupt: Optional[str] = None) -> list[tuple[str, float, bool]]:
    """Check every kernel; returns (name, max_error, passed) per kernel.

    `corrupt` scales the named kernel's backward outputs by 1.5 for the
    duration of the run, a negative control that must surface as a failure.
    """
    if corrupt is not None:
        ag._BACKWARD_TWEAKS[corrupt] = lambda grads: tuple(
            None if g is None else g * 1.5 for g in grads)
    try:
        results = []
        for name, build in OP_CHECKS:
            rng = np.random.default_rng(seed)
            fn, inputs = build(rng)
            err = grad_check(fn, inputs)
            results.append((name, err, err < tol))
        return results
    finally:
        if corrupt is not None:
            ag._BACKWARD_TWEAKS.pop(corrupt, None)
