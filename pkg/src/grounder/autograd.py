"""Dense tensors with reverse-mode automatic differentiation.

Values are numpy arrays; every differentiable kernel records an entry on the
active ``Tape`` (input handles, output handle, backward rule) so one reverse
sweep yields a gradient per ``requires_grad`` leaf.  float32 is the working
precision; float64 exists for finite-difference gradient checks.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ContractError, MaskError, ShapeError

_DTYPES = {"float32": np.float32, "float64": np.float64}
_default_dtype = np.float32

# name -> fn(tuple_of_grads) -> tuple_of_grads; test hook for corrupting a
# kernel's backward rule (negative control of the gradient checker).
_BACKWARD_TWEAKS: dict[str, Callable] = {}


def set_default_dtype(name: str) -> None:
    if name not in _DTYPES:
        raise ContractError(f"unknown dtype {name!r}")
    global _default_dtype
    _default_dtype = _DTYPES[name]


def get_default_dtype() -> np.dtype:
    return np.dtype(_default_dtype)


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the default dtype ('float32' or 'float64')."""
    global _default_dtype
    old = _default_dtype
    set_default_dtype(name)
    try:
        yield
    finally:
        _default_dtype = old


class Tensor:
    """A dense n-dimensional float array, optionally tracked on a tape."""

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        # numpy float arrays and scalars keep their precision (kernel outputs
        # must not be downcast); other input lands on the default dtype
        if dtype is None and not (isinstance(data, (np.ndarray, np.generic))
                                  and data.dtype in (np.float32, np.float64)):
            dtype = _default_dtype
        self.data = np.asarray(data, dtype=dtype)
        self.requires_grad = bool(requires_grad)
        self.node: Optional[tuple["Tape", int]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def backward(self) -> dict:
        return backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all routes through the recorded kernels below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return take(self, key)


def _scalar_err(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


class _TapeEntry:
    __slots__ = ("name", "inputs", "output", "backward")

    def __init__(self, name, inputs, output, backward):
        self.name = name
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Tape:
    """Ordered record of operations; inputs always precede their consumers."""

    def __init__(self):
        self.ops: list[_TapeEntry] = []

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.pop()
        return False


_ACTIVE: list[Tape] = []


def _active_tape() -> Optional[Tape]:
    return _ACTIVE[-1] if _ACTIVE else None


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or (t.node is not None and t.node[0] is tape)


def _record(name: str, inputs: Sequence[Tensor], out: Tensor, backward: Callable) -> Tensor:
    tape = _active_tape()
    if tape is not None and any(_tracked(t, tape) for t in inputs):
        tape.ops.append(_TapeEntry(name, tuple(inputs), out, backward))
        out.node = (tape, len(tape.ops) - 1)
    return out


def _as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else _default_dtype
    return Tensor(np.asarray(x, dtype=dtype))


def _mask_array(mask) -> np.ndarray:
    m = mask.data if isinstance(mask, Tensor) else np.asarray(mask)
    return m.astype(bool)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient back down to the pre-broadcast shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def backward(loss: Tensor) -> dict:
    """Reverse sweep from a scalar loss; returns {leaf: gradient array}."""
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.node is None:
        raise ContractError("loss is not on any tape")
    tape, stop = loss.node
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for entry in reversed(tape.ops[: stop + 1]):
        for t in entry.inputs:
            if t.requires_grad:
                leaves.setdefault(id(t), t)
        g = grads.get(id(entry.output))
        if g is None:
            continue
        in_grads = entry.backward(g)
        tweak = _BACKWARD_TWEAKS.get(entry.name)
        if tweak is not None:
            in_grads = tweak(in_grads)
        for t, ig in zip(entry.inputs, in_grads):
            if ig is None:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
    return {t: grads.get(k, np.zeros_like(t.data)) for k, t in leaves.items()}


# ---------------------------------------------------------------------------
# kernels


def _binary(name, a, b, fwd, bwd):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    try:
        data = fwd(a.data, b.data)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None
    out = Tensor(data)
    sa, sb = a.shape, b.shape

    def back(g):
        ga, gb = bwd(g, a.data, b.data)
        return _unbroadcast(ga, sa), _unbroadcast(gb, sb)

    return _record(name, (a, b), out, back)


def add(a, b) -> Tensor:
    return _binary("add", a, b, lambda x, y: x + y, lambda g, x, y: (g, g))


def sub(a, b) -> Tensor:
    return _binary("sub", a, b, lambda x, y: x - y, lambda g, x, y: (g, -g))


def mul(a, b) -> Tensor:
    return _binary("mul", a, b, lambda x, y: x * y, lambda g, x, y: (g * y, g * x))


def div(a, b) -> Tensor:
    return _binary("div", a, b, lambda x, y: x / y,
                   lambda g, x, y: (g / y, -g * x / (y * y)))


def maximum(a, b) -> Tensor:
    # ties route the full gradient to the first operand (one-sided subgradient)
    return _binary("maximum", a, b, np.maximum,
                   lambda g, x, y: (g * (x >= y), g * (x < y)))


def minimum(a, b) -> Tensor:
    return _binary("minimum", a, b, np.minimum,
                   lambda g, x, y: (g * (x <= y), g * (x > y)))


def scale(x, s: float) -> Tensor:
    x = _as_tensor(x)
    s = float(s)
    out = Tensor(x.data * x.dtype.type(s))
    return _record("scale", (x,), out, lambda g: (g * s,))


def relu(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0
    return _record("relu", (x,), out, lambda g: (g * mask,))


def abs_(x) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.abs(x.data))
    sign = np.sign(x.data)
    return _record("abs", (x,), out, lambda g: (g * sign,))


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                 np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(y.astype(d.dtype))
    return _record("sigmoid", (x,), out, lambda g: (g * out.data * (1.0 - out.data),))


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record("matmul", (a, b), out,
                   lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(x) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.shape}")
    out = Tensor(x.data.T.copy())
    return _record("transpose", (x,), out, lambda g: (g.T,))


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        out = Tensor(x.data.reshape(shape).copy())
    except ValueError:
        raise ShapeError(f"reshape: cannot view shape {old} as {shape}") from None
    return _record("reshape", (x,), out, lambda g: (g.reshape(old),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(
            "concat: incompatible shapes " + ", ".join(str(t.shape) for t in tensors)
        ) from None
    out = Tensor(data)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _record("concat", tuple(tensors), out, back)


def take(x, key) -> Tensor:
    """Basic/advanced indexing with a scatter-add backward."""
    x = _as_tensor(x)
    data = x.data[key]
    out = Tensor(np.array(data, copy=True))
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.add.at(gx, key, g)
        return (gx,)

    return _record("take", (x,), out, back)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    key = [slice(None)] * _as_tensor(x).ndim
    key[axis] = slice(start, start + length)
    return take(x, tuple(key))


def sum_(x, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims))
    shape = x.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _record("sum", (x,), out, back)


def mean_(x, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


def amax(x, axis: int, mask=None) -> Tensor:
    """Max along an axis, ignoring positions where mask is False. Keeps dims."""
    x = _as_tensor(x)
    d = x.data
    if mask is not None:
        m = np.broadcast_to(_mask_array(mask), d.shape)
        if not np.all(m.any(axis=axis)):
            raise MaskError("amax: a slice has no valid entry")
        d = np.where(m, d, -np.inf)
    idx = np.argmax(d, axis=axis, keepdims=True)
    out = Tensor(np.take_along_axis(d, idx, axis=axis).astype(x.dtype))
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        np.put_along_axis(gx, idx, g, axis=axis)
        return (gx,)

    return _record("amax", (x,), out, back)


def where(cond, a, b) -> Tensor:
    """Select per element by a constant boolean array; both branches get grads."""
    cond = _mask_array(cond)
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        data = np.where(cond, a.data, b.data)
    except ValueError:
        raise ShapeError(
            f"where: incompatible shapes {cond.shape}, {a.shape}, {b.shape}"
        ) from None
    out = Tensor(data)
    sa, sb = a.shape, b.shape

    def back(g):
        return (_unbroadcast(np.where(cond, g, 0.0), sa),
                _unbroadcast(np.where(cond, 0.0, g), sb))

    return _record("where", (a, b), out, back)


def softmax(x, axis: int = -1, mask=None) -> Tensor:
    """Masked, max-stabilized softmax; masked entries get exactly zero weight."""
    x = _as_tensor(x)
    d = x.data
    if mask is not None:
        m = np.broadcast_to(_mask_array(mask), d.shape)
        if not np.all(m.any(axis=axis)):
            raise MaskError("softmax: a row is fully masked")
        d = np.where(m, d, -np.inf)
    elif not np.all(np.isfinite(d)):
        raise ContractError("softmax: non-finite logits without a mask")
    z = d - d.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y.astype(x.dtype))

    def back(g):
        yo = out.data
        return (yo * (g - (g * yo).sum(axis=axis, keepdims=True)),)

    return _record("softmax", (x,), out, back)


def layer_norm(x, gamma, beta, eps: float = 1e-5, axis: int = 0) -> Tensor:
    """Normalize along `axis` to zero mean / unit variance, then affine."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    if eps <= 0:
        raise ContractError(f"layer_norm: eps must be positive, got {eps}")
    d = x.shape[axis] if x.ndim else x.size
    if gamma.size != d or beta.size != d:
        raise ShapeError(
            f"layer_norm: gamma/beta sizes {gamma.shape}/{beta.shape} "
            f"do not match extent {d} of input {x.shape}"
        )
    bshape = [1] * max(x.ndim, 1)
    bshape[axis] = d
    gr = gamma.data.reshape(bshape)
    br = beta.data.reshape(bshape)
    mu = x.data.mean(axis=axis, keepdims=True)
    var = x.data.var(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    out = Tensor((gr * xhat + br).astype(x.dtype))
    reduce_axes = tuple(i for i in range(max(x.ndim, 1)) if i != axis % max(x.ndim, 1))

    def back(g):
        dgamma = (g * xhat).sum(axis=reduce_axes).reshape(gamma.shape)
        dbeta = g.sum(axis=reduce_axes).reshape(beta.shape)
        dxhat = g * gr
        dx = inv * (dxhat
                    - dxhat.mean(axis=axis, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True))
        return dx, dgamma, dbeta

    return _record("layer_norm", (x, gamma, beta), out, back)


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of a (vocab, dim) table; output is (dim, len(ids))."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or ids.ndim != 1:
        raise ShapeError(f"embedding_lookup: table {table.shape}, ids {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ContractError("embedding_lookup: id out of vocabulary range")
    out = Tensor(table.data[ids].T.copy())
    shape = table.shape

    def back(g):
        gt = np.zeros(shape, dtype=g.dtype)
        np.add.at(gt, ids, g.T)
        return (gt,)

    return _record("embedding_lookup", (table,), out, back)


def dropout(x, p: float, train: bool, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Zero entries with probability p and rescale survivors; identity in eval."""
    x = _as_tensor(x)
    if not 0.0 <= p < 1.0:
        raise ContractError(f"dropout: p must be in [0, 1), got {p}")
    if not train or p == 0.0:
        return x
    if rng is None:
        raise ContractError("dropout: training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    keep = keep.astype(x.dtype)
    out = Tensor(x.data * keep)
    return _record("dropout", (x,), out, lambda g: (g * keep,))


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D convolution of a (C,H,W) map with (Cout,Cin,kh,kw) filters."""
    x, w = _as_tensor(x), _as_tensor(w)
    if x.ndim != 3 or w.ndim != 4 or x.shape[0] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes {x.shape} and {w.shape}")
    cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} too large for input {x.shape}")
    cols = _im2col(x.data, kh, kw, stride, padding, ho, wo)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out_mat = wmat @ cols
    if b is not None:
        b = _as_tensor(b)
        if b.shape != (cout,):
            raise ShapeError(f"conv2d: bias {b.shape} does not match {cout} filters")
        out_mat = out_mat + b.data[:, None]
    out = Tensor(out_mat.reshape(cout, ho, wo))
    xshape, wshape = x.shape, w.shape

    def back(g):
        gm = g.reshape(cout, ho * wo)
        gw = (gm @ cols.T).reshape(wshape)
        gcols = wmat.T @ gm
        gx = _col2im(gcols, xshape, kh, kw, stride, padding, ho, wo)
        if b is None:
            return gx, gw
        return gx, gw, gm.sum(axis=1)

    inputs = (x, w) if b is None else (x, w, b)
    return _record("conv2d", inputs, out, back)


def _im2col(x, kh, kw, stride, pad, ho, wo):
    c = x.shape[0]
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, ho * wo)


def _col2im(cols, xshape, kh, kw, stride, pad, ho, wo):
    c, h, w = xshape
    xp = np.zeros((c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols6 = cols.reshape(c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            xp[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols6[:, i, j]
    return xp[:, pad:pad + h, pad:pad + w] if pad else xp
