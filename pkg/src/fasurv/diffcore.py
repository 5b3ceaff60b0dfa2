"""Dense float64 arrays with tape-based reverse-mode differentiation.

A :class:`Tape` is built fresh for every forward pass. Parameters enter a
computation through :meth:`Tape.watch`; every op whose inputs live on a tape
appends one node to it, so recording order is already a topological order
and :meth:`Tape.backward` simply walks the nodes in reverse.

Ops on plain numpy arrays (or tensors without a tape) return untracked
tensors, which lets the same forward code run for inference.

Broadcasting follows numpy, and gradients are summed back to each input's
shape. GELU uses the exact erf form ``x * Phi(x)``.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "Parameter",
    "Tensor",
    "Tape",
    "bind",
    "constant",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "softplus",
    "gelu",
    "clip",
    "sum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "take",
    "where",
    "softmax_lastdim",
    "layer_norm",
    "grad_check",
    "dump_csv",
    "load_csv",
]

_SQRT_HALF = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Parameter:
    """Named learnable array with a gradient accumulator of the same shape."""

    def __init__(self, name: str, value):
        self.name = name
        self.value = np.array(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros_like(self.value)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.value.shape})"


class Tensor:
    __slots__ = ("value", "tape", "index", "parents", "backward_fn", "param")
    # make ndarray <op> Tensor dispatch to the reflected Tensor method
    __array_ufunc__ = None

    def __init__(self, value, tape=None, index=-1, parents=(), backward_fn=None, param=None):
        self.value = value
        self.tape = tape
        self.index = index
        self.parents = parents
        self.backward_fn = backward_fn
        self.param = param

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __repr__(self):
        tracked = "tracked" if self.tape is not None else "const"
        return f"Tensor(shape={self.value.shape}, {tracked})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)


class Tape:
    """Define-by-run record of primitive ops."""

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __len__(self):
        return len(self.nodes)

    def _record(self, value, parents, backward_fn, param=None):
        node = Tensor(value, self, len(self.nodes), parents, backward_fn, param)
        self.nodes.append(node)
        return node

    def clear(self) -> None:
        """Drop recorded nodes. Nodes point back at the tape, so without this
        the graph lingers until the cyclic garbage collector runs."""
        for node in self.nodes:
            node.parents = ()
            node.backward_fn = None
        self.nodes = []

    def watch(self, param: Parameter) -> Tensor:
        return self._record(param.value, (), None, param)

    def backward(self, loss: Tensor) -> None:
        """Add d(loss)/d(param) into ``param.grad`` for every watched parameter.

        Accumulation is additive: calling this twice without zeroing the
        parameters doubles their gradients.
        """
        if not isinstance(loss, Tensor) or loss.tape is not self:
            raise ValueError("loss was not recorded on this tape")
        if loss.value.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.value.shape}")
        grads: list = [None] * len(self.nodes)
        grads[loss.index] = np.ones_like(loss.value)
        for i in range(loss.index, -1, -1):
            g = grads[i]
            if g is None:
                continue
            grads[i] = None
            node = self.nodes[i]
            if node.param is not None:
                node.param.grad += g
                continue
            if node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or parent.tape is not self:
                    continue
                j = parent.index
                grads[j] = pg if grads[j] is None else grads[j] + pg


def bind(params: Mapping[str, Parameter], tape: Tape | None = None) -> dict[str, Tensor]:
    """Tensors for every parameter, watched on ``tape`` when one is given."""
    if tape is None:
        return {name: Tensor(p.value) for name, p in params.items()}
    return {name: tape.watch(p) for name, p in params.items()}


def constant(value) -> Tensor:
    return Tensor(np.asarray(value, dtype=np.float64))


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _make(value, parents: Sequence[Tensor], backward_fn) -> Tensor:
    tape = None
    for p in parents:
        if p.tape is not None:
            if tape is not None and p.tape is not tape:
                raise ValueError("inputs recorded on different tapes")
            tape = p.tape
    if tape is None:
        return Tensor(value)
    return tape._record(value, tuple(parents), backward_fn)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value + b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    sa, sb = a.value.shape, b.value.shape
    return _make(a.value - b.value, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    return _make(av * bv, (a, b),
                 lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    out = av / bv
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bv, av.shape),
                            _unbroadcast(-g * out / bv, bv.shape)))


def neg(a) -> Tensor:
    a = _lift(a)
    return _make(-a.value, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes (numpy ``@`` rules).

    Both operands need at least two dimensions.
    """
    a, b = _lift(a), _lift(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")

    if bv.ndim == 2 and av.ndim > 2:
        # one GEMM over the flattened leading axes
        a2 = av.reshape(-1, av.shape[-1])
        out = (a2 @ bv).reshape(av.shape[:-1] + (bv.shape[1],))

        def backward_flat(g):
            g2 = g.reshape(-1, g.shape[-1])
            return (g2 @ bv.T).reshape(av.shape), a2.T @ g2

        return _make(out, (a, b), backward_flat)

    def backward(g):
        ga = g @ np.swapaxes(bv, -1, -2)
        gb = np.swapaxes(av, -1, -2) @ g
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return _make(av @ bv, (a, b), backward)


# -- elementwise functions --------------------------------------------------

def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.value)
    return _make(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    av = a.value
    return _make(np.log(av), (a,), lambda g: (g / av,))


def softplus(a) -> Tensor:
    a = _lift(a)
    av = a.value
    out = np.logaddexp(0.0, av)
    return _make(out, (a,), lambda g: (g * np.exp(av - out),))


def gelu(a) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the standard normal CDF."""
    a = _lift(a)
    av = a.value
    cdf = 0.5 * (1.0 + erf(av * _SQRT_HALF))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * av * av)
    return _make(av * cdf, (a,), lambda g: (g * (cdf + av * pdf),))


def clip(a, lo: float, hi: float) -> Tensor:
    a = _lift(a)
    av = a.value
    inside = (av >= lo) & (av <= hi)
    return _make(np.clip(av, lo, hi), (a,), lambda g: (g * inside,))


# -- reductions and shape ops -----------------------------------------------

def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _lift(a)
    shape = a.value.shape
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(np.asarray(out), (a,), backward)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    n = a.value.size if axis is None else int(np.prod([a.value.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old = a.value.shape
    return _make(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = _lift(a)
    inv = np.argsort(axes)
    return _make(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def concat(items: Sequence, axis: int) -> Tensor:
    items = [_lift(x) for x in items]
    sizes = [x.value.shape[axis] for x in items]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([x.value for x in items], axis=axis)
    return _make(out, items, lambda g: tuple(np.split(g, splits, axis=axis)))


def take(a, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices accumulate gradient."""
    a = _lift(a)
    indices = np.asarray(indices, dtype=np.int64)
    shape = a.value.shape
    out = np.take(a.value, indices, axis=axis)

    def backward(g):
        ga = np.zeros(shape)
        moved = np.moveaxis(ga, axis, 0)
        gm = np.moveaxis(g, list(range(axis, axis + indices.ndim)), list(range(indices.ndim)))
        np.add.at(moved, indices, gm)
        return (ga,)

    return _make(out, (a,), backward)


def where(cond, a, b) -> Tensor:
    """Elementwise select with a constant boolean condition."""
    a, b = _lift(a), _lift(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.value.shape, b.value.shape
    out = np.where(cond, a.value, b.value)
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(np.where(cond, g, 0.0), sa),
                            _unbroadcast(np.where(cond, 0.0, g), sb)))


# -- normalizations ---------------------------------------------------------

def softmax_lastdim(a, mask=None) -> Tensor:
    """Softmax over the last axis with optional boolean key mask.

    Masked entries come out exactly 0. Every row needs at least one unmasked
    entry.
    """
    a = _lift(a)
    av = a.value
    if mask is None:
        z = av - av.max(axis=-1, keepdims=True)
        e = np.exp(z)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), av.shape)
        if not mask.any(axis=-1).all():
            raise ValueError("softmax_lastdim: fully masked row")
        z = np.where(mask, av, -np.inf)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.where(mask, np.exp(z), 0.0)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (a,), backward)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean, unit variance, then ``gain * x + bias``."""
    a, gain, bias = _lift(a), _lift(gain), _lift(bias)
    av = a.value
    d = av.shape[-1]
    if gain.value.shape != (d,) or bias.value.shape != (d,):
        raise ValueError(f"layer_norm affine shapes {gain.value.shape}, {bias.value.shape} "
                         f"do not match last axis {d}")
    mu = av.mean(axis=-1, keepdims=True)
    xc = av - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value

    def backward(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead)
        dbias = g.sum(axis=lead)
        dx_hat = g * gv
        dx = inv * (dx_hat - dx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (dx_hat * xhat).mean(axis=-1, keepdims=True))
        return dx, dgain, dbias

    return _make(xhat * gv + bias.value, (a, gain, bias), backward)


# -- gradient checking ------------------------------------------------------

def grad_check(
    f: Callable[[Tape], Tensor],
    params: Iterable[Parameter],
    step: float = 1e-5,
    max_coords: int | None = 16,
    seed: int = 0,
    analytic: Mapping[str, np.ndarray] | None = None,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` builds the scalar loss on the tape it is given. Up to ``max_coords``
    coordinates per parameter are sampled (all of them when ``None``). The
    error per coordinate is ``|a - n| / max(1, |a|, |n|)``. Supplying
    ``analytic`` skips the backward pass and checks those arrays instead.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    params = list(params)
    if analytic is None:
        for p in params:
            p.zero_grad()
        tape = Tape()
        loss = f(tape)
        if not np.all(np.isfinite(loss.value)):
            raise ValueError("grad_check: non-finite loss")
        tape.backward(loss)
        analytic = {p.name: p.grad.copy() for p in params}

    def evaluate() -> float:
        val = float(np.asarray(f(Tape()).value).reshape(()))
        if not math.isfinite(val):
            raise ValueError("grad_check: non-finite loss")
        return val

    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        flat = p.value.reshape(-1)
        n = flat.size
        coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
        ga = np.asarray(analytic[p.name]).reshape(-1)
        for c in coords:
            orig = flat[c]
            flat[c] = orig + step
            up = evaluate()
            flat[c] = orig - step
            down = evaluate()
            flat[c] = orig
            num = (up - down) / (2.0 * step)
            err = abs(ga[c] - num) / max(1.0, abs(ga[c]), abs(num))
            worst = max(worst, err)
    return worst


# -- debug dump -------------------------------------------------------------

def dump_csv(array, path) -> None:
    """Write an array as CSV: a ``# shape: a,b,...`` header, then rows over the last axis."""
    arr = np.asarray(array.value if isinstance(array, Tensor) else array, dtype=np.float64)
    rows = arr.reshape(-1, arr.shape[-1]) if arr.ndim >= 1 else arr.reshape(1, 1)
    with open(path, "w", newline="") as fh:
        fh.write("# shape: " + ",".join(str(n) for n in arr.shape) + "\n")
        for row in rows:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_csv(path) -> np.ndarray:
    with open(path) as fh:
        header = fh.readline()
        if not header.startswith("# shape:"):
            raise ValueError(f"{path}: missing shape header")
        text = header.split(":", 1)[1].strip()
        shape = tuple(int(s) for s in text.split(",")) if text else ()
        values = [float(v) for line in fh for v in line.strip().split(",") if line.strip()]
    return np.array(values, dtype=np.float64).reshape(shape)
