"""Reverse-mode differentiation over an append-only tape of numpy arrays.

Every value on the tape is a float64 array of rank 0, 1 or 2 (scalar, vector,
or a batch of row vectors). A node records its parents and a closure mapping
the output adjoint to parent adjoints. Nodes whose inputs are all constants
skip recording entirely, so a tape built only from constants is a plain
forward evaluator.

Binary ops follow numpy broadcasting; adjoints are summed back down to the
operand shape.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels

__all__ = [
    "Tape",
    "Var",
    "Gradients",
    "TapeError",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "affine",
    "sum",
    "mean",
    "square",
    "sqrt",
    "exp",
    "ln",
    "tanh",
    "atanh",
    "sin",
    "cos",
    "silu",
    "layernorm",
    "concat",
    "take",
    "clamp",
    "square_norm",
    "wrap_angle",
    "where_rows",
]


class TapeError(ValueError):
    """Raised on shape mismatch, domain violation, or cross-tape mixing."""


class Tape:
    """Topologically ordered record of a computation.

    Parameters live outside the tape and are injected each step with
    :meth:`leaf`; the tape itself is discarded (or :meth:`clear`-ed) after the
    backward pass.
    """

    __slots__ = ("values", "parents", "backfns", "needs")

    def __init__(self) -> None:
        self.values: list[np.ndarray] = []
        self.parents: list[tuple[int, ...]] = []
        self.backfns: list[Callable | None] = []
        self.needs: list[bool] = []

    def __len__(self) -> int:
        return len(self.values)

    def clear(self) -> None:
        self.values.clear()
        self.parents.clear()
        self.backfns.clear()
        self.needs.clear()

    def _push(self, value, parents=(), backfn=None, needs=False) -> "Var":
        idx = len(self.values)
        self.values.append(value)
        self.parents.append(parents)
        self.backfns.append(backfn)
        self.needs.append(needs)
        return Var(self, idx)

    def leaf(self, value, requires_grad: bool = True) -> "Var":
        arr = np.array(value, dtype=np.float64)
        if arr.ndim > 2:
            raise TapeError(f"rank {arr.ndim} values are not supported (max 2)")
        return self._push(arr, needs=requires_grad)

    def const(self, value) -> "Var":
        return self.leaf(value, requires_grad=False)

    def backward(self, root: "Var") -> "Gradients":
        """Accumulate adjoints of ``root`` into every node that feeds it."""
        if root.tape is not self:
            raise TapeError("root belongs to a different tape")
        rv = self.values[root.idx]
        if rv.size != 1:
            raise TapeError(f"backward needs a scalar root, got shape {rv.shape}")
        adj: list[np.ndarray | None] = [None] * (root.idx + 1)
        adj[root.idx] = np.ones_like(rv)
        parents, backfns, needs = self.parents, self.backfns, self.needs
        for i in range(root.idx, -1, -1):
            g = adj[i]
            if g is None:
                continue
            fn = backfns[i]
            if fn is None:
                continue
            pg = fn(g)
            for p, gp in zip(parents[i], pg):
                if gp is None or not needs[p]:
                    continue
                cur = adj[p]
                adj[p] = gp if cur is None else cur + gp
        return Gradients(self, adj)


class Gradients:
    """Adjoint lookup; nodes the root does not depend on report zeros."""

    __slots__ = ("tape", "_adj")

    def __init__(self, tape: Tape, adj: list) -> None:
        self.tape = tape
        self._adj = adj

    def __getitem__(self, var: "Var") -> np.ndarray:
        if var.tape is not self.tape:
            raise TapeError("variable belongs to a different tape")
        g = self._adj[var.idx] if var.idx < len(self._adj) else None
        if g is None:
            return np.zeros_like(self.tape.values[var.idx])
        return g

    def reached(self, var: "Var") -> bool:
        return var.idx < len(self._adj) and self._adj[var.idx] is not None


class Var:
    """Handle to one tape node."""

    __slots__ = ("tape", "idx")
    __array_priority__ = 1000  # numpy defers to our reflected operators

    def __init__(self, tape: Tape, idx: int) -> None:
        self.tape = tape
        self.idx = idx

    @property
    def value(self) -> np.ndarray:
        return self.tape.values[self.idx]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tape.values[self.idx].shape

    @property
    def needs_grad(self) -> bool:
        return self.tape.needs[self.idx]

    def __repr__(self) -> str:
        return f"Var(idx={self.idx}, shape={self.shape})"

    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, key):
        return take(self, key)


# --------------------------------------------------------------------------
# helpers


def _tape_of(*xs) -> Tape:
    tape = None
    for x in xs:
        if isinstance(x, Var):
            if tape is None:
                tape = x.tape
            elif x.tape is not tape:
                raise TapeError("cannot combine variables from different tapes")
    if tape is None:
        raise TapeError("at least one operand must be a Var")
    return tape


def _val(x) -> np.ndarray:
    if isinstance(x, Var):
        return x.tape.values[x.idx]
    return np.asarray(x, dtype=np.float64)


def _needs(x) -> bool:
    return isinstance(x, Var) and x.tape.needs[x.idx]


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a: np.ndarray, b: np.ndarray) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise TapeError(f"shape mismatch: {a.shape} vs {b.shape}") from None


def _unary(x: Var, value: np.ndarray, dfn: Callable[[np.ndarray], np.ndarray]) -> Var:
    """Push a one-parent node; ``dfn`` maps the output adjoint to the input adjoint."""
    tape = x.tape
    if not tape.needs[x.idx]:
        return tape._push(value)
    return tape._push(value, (x.idx,), lambda g: (dfn(g),), True)


def _binary(a, b, value, ga, gb) -> Var:
    tape = _tape_of(a, b)
    na, nb = _needs(a), _needs(b)
    if not (na or nb):
        return tape._push(value)
    parents = []
    fns = []
    if isinstance(a, Var):
        parents.append(a.idx)
        fns.append(ga if na else None)
    if isinstance(b, Var):
        parents.append(b.idx)
        fns.append(gb if nb else None)

    def backfn(g):
        return tuple(None if f is None else f(g) for f in fns)

    return tape._push(value, tuple(parents), backfn, True)


# --------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _broadcast_shape(av, bv)
    return _binary(
        a, b, av + bv,
        lambda g: _unbroadcast(g, av.shape),
        lambda g: _unbroadcast(g, bv.shape),
    )


def sub(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _broadcast_shape(av, bv)
    return _binary(
        a, b, av - bv,
        lambda g: _unbroadcast(g, av.shape),
        lambda g: _unbroadcast(-g, bv.shape),
    )


def mul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _broadcast_shape(av, bv)
    return _binary(
        a, b, av * bv,
        lambda g: _unbroadcast(g * bv, av.shape),
        lambda g: _unbroadcast(g * av, bv.shape),
    )


def div(a, b) -> Var:
    av, bv = _val(a), _val(b)
    _broadcast_shape(av, bv)
    if np.any(bv == 0.0):
        raise TapeError("division by zero")
    out = av / bv
    return _binary(
        a, b, out,
        lambda g: _unbroadcast(g / bv, av.shape),
        lambda g: _unbroadcast(-g * out / bv, bv.shape),
    )


def neg(x: Var) -> Var:
    return _unary(x, -x.value, lambda g: -g)


def matmul(a, b) -> Var:
    av, bv = _val(a), _val(b)
    if av.ndim == 0 or bv.ndim == 0 or av.shape[-1] != bv.shape[0]:
        raise TapeError(f"matmul shape mismatch: {av.shape} @ {bv.shape}")
    out = av @ bv

    def ga(g):
        if bv.ndim == 1:
            return np.multiply.outer(g, bv)
        return g @ bv.T

    def gb(g):
        if av.ndim == 1:
            return np.multiply.outer(av, g)
        if bv.ndim == 1:
            return av.T @ g
        return av.T @ g

    return _binary(a, b, out, ga, gb)


def affine(x, w, b) -> Var:
    """``x @ w + b`` as one node (the linear layer)."""
    if not all(isinstance(v, Var) for v in (x, w, b)):
        raise TapeError("affine operands must all be Vars")
    tape = _tape_of(x, w, b)
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim == 0 or xv.shape[-1] != wv.shape[0] or bv.shape != (wv.shape[1],):
        raise TapeError(f"affine shape mismatch: {xv.shape} @ {wv.shape} + {bv.shape}")
    out = xv @ wv + bv
    nx, nw, nbias = _needs(x), _needs(w), _needs(b)
    if not (nx or nw or nbias):
        return tape._push(out)
    x2 = xv.reshape(-1, xv.shape[-1])

    def backfn(g):
        g2 = g.reshape(-1, wv.shape[1])
        return (
            (g @ wv.T) if nx else None,
            (x2.T @ g2) if nw else None,
            g2.sum(axis=0) if nbias else None,
        )

    return tape._push(out, (x.idx, w.idx, b.idx), backfn, True)


# --------------------------------------------------------------------------
# reductions


def sum(x: Var, axis: int | None = None) -> Var:  # noqa: A001 - mirrors numpy
    xv = x.value
    out = np.asarray(xv.sum(axis=axis))

    def d(g):
        if axis is None:
            return np.broadcast_to(g, xv.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), xv.shape).copy()

    return _unary(x, out, d)


def mean(x: Var, axis: int | None = None) -> Var:
    xv = x.value
    n = xv.size if axis is None else xv.shape[axis]
    out = np.asarray(xv.mean(axis=axis))

    def d(g):
        if axis is None:
            return np.broadcast_to(g / n, xv.shape).copy()
        return np.broadcast_to(np.expand_dims(g / n, axis), xv.shape).copy()

    return _unary(x, out, d)


def square_norm(x: Var, axis: int = -1) -> Var:
    """Sum of squares along ``axis`` (last by default)."""
    xv = x.value
    if xv.ndim == 0:
        raise TapeError("square_norm needs a vector or matrix")
    out = np.asarray((xv * xv).sum(axis=axis))
    return _unary(x, out, lambda g: 2.0 * xv * np.expand_dims(g, axis))


# --------------------------------------------------------------------------
# elementwise


def square(x: Var) -> Var:
    xv = x.value
    return _unary(x, xv * xv, lambda g: 2.0 * g * xv)


def sqrt(x: Var) -> Var:
    xv = x.value
    if np.any(xv <= 0.0):
        raise TapeError(f"sqrt domain violation at {xv[xv <= 0.0].ravel()[0]!r}")
    out = np.sqrt(xv)
    return _unary(x, out, lambda g: g / (2.0 * out))


def exp(x: Var) -> Var:
    out = np.exp(x.value)
    return _unary(x, out, lambda g: g * out)


def ln(x: Var) -> Var:
    xv = x.value
    if np.any(xv <= 0.0):
        raise TapeError(f"ln domain violation at {xv[xv <= 0.0].ravel()[0]!r}")
    return _unary(x, np.log(xv), lambda g: g / xv)


def tanh(x: Var) -> Var:
    out = np.tanh(x.value)
    return _unary(x, out, lambda g: g * (1.0 - out * out))


def atanh(x: Var) -> Var:
    xv = x.value
    bad = np.abs(xv) >= 1.0
    if np.any(bad):
        raise TapeError(f"atanh domain violation at {xv[bad].ravel()[0]!r}")
    return _unary(x, np.arctanh(xv), lambda g: g / (1.0 - xv * xv))


def sin(x: Var) -> Var:
    xv = x.value
    return _unary(x, np.sin(xv), lambda g: g * np.cos(xv))


def cos(x: Var) -> Var:
    xv = x.value
    return _unary(x, np.cos(xv), lambda g: -g * np.sin(xv))


def wrap_angle(x: Var) -> Var:
    """Map to ``[-pi, pi)``; unit derivative away from the cut."""
    xv = x.value
    return _unary(x, np.mod(xv + np.pi, 2.0 * np.pi) - np.pi, lambda g: g)


def silu(x: Var) -> Var:
    xv = x.value
    out, sig = _kernels.silu_fwd(xv)
    return _unary(x, out, lambda g: _kernels.silu_bwd(g, xv, sig))


def clamp(x: Var, lo: float, hi: float) -> Var:
    """Clip to ``[lo, hi]``; adjoint passes where ``lo <= x <= hi``."""
    if lo > hi:
        raise TapeError(f"clamp bounds reversed: {lo} > {hi}")
    xv = x.value
    inside = (xv >= lo) & (xv <= hi)
    return _unary(x, np.clip(xv, lo, hi), lambda g: g * inside)


def layernorm(x: Var, gain: Var, shift: Var, eps: float = 1e-5) -> Var:
    """LayerNorm over the last axis with learned gain and shift."""
    tape = _tape_of(x, gain, shift)
    xv, gv, bv = x.value, gain.value, shift.value
    if xv.ndim == 0 or gv.shape != (xv.shape[-1],) or bv.shape != gv.shape:
        raise TapeError(f"layernorm shape mismatch: {xv.shape}, {gv.shape}, {bv.shape}")
    x2 = xv.reshape(-1, xv.shape[-1])
    y, xhat, rstd = _kernels.layernorm_fwd(x2, gv, bv, eps)
    y = y.reshape(xv.shape)
    nx, ng, nb = x.needs_grad, gain.needs_grad, shift.needs_grad
    if not (nx or ng or nb):
        return tape._push(y)

    def backfn(g):
        gx, gg, gb = _kernels.layernorm_bwd(g.reshape(x2.shape), xhat, rstd, gv)
        return (gx.reshape(xv.shape) if nx else None, gg if ng else None, gb if nb else None)

    return tape._push(y, (x.idx, gain.idx, shift.idx), backfn, True)


# --------------------------------------------------------------------------
# structure


def concat(xs: Sequence, axis: int = -1) -> Var:
    """Concatenate Vars (and constant arrays) along ``axis``."""
    tape = _tape_of(*xs)
    vals = [_val(x) for x in xs]
    try:
        out = np.concatenate(vals, axis=axis)
    except ValueError:
        raise TapeError(f"concat shape mismatch: {[v.shape for v in vals]}") from None
    vars_ = [(i, x) for i, x in enumerate(xs) if isinstance(x, Var) and x.needs_grad]
    if not vars_:
        return tape._push(out)
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [v.shape[ax] for v in vals])

    def backfn(g):
        res = []
        for i, _ in vars_:
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(bounds[i], bounds[i + 1])
            res.append(g[tuple(sl)])
        return tuple(res)

    return tape._push(out, tuple(x.idx for _, x in vars_), backfn, True)


def take(x: Var, key) -> Var:
    """Basic slicing/indexing (``x[key]``)."""
    xv = x.value
    try:
        out = np.array(xv[key])
    except IndexError:
        raise TapeError(f"bad slice {key!r} for shape {xv.shape}") from None

    def d(g):
        full = np.zeros_like(xv)
        if _fancy(key):
            np.add.at(full, key, g)
        else:
            full[key] = g
        return full

    return _unary(x, out, d)


def _fancy(key) -> bool:
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def where_rows(mask: np.ndarray, a, b) -> Var:
    """Row-wise select: rows with ``mask`` from ``a``, the rest from ``b``."""
    av, bv = _val(a), _val(b)
    if av.shape != bv.shape:
        raise TapeError(f"where_rows shape mismatch: {av.shape} vs {bv.shape}")
    m = np.asarray(mask, dtype=bool).reshape((-1,) + (1,) * (av.ndim - 1))
    out = np.where(m, av, bv)
    return _binary(a, b, out, lambda g: g * m, lambda g: g * ~m)


# --------------------------------------------------------------------------
# finite-difference check


def grad_check(
    f: Callable[[Tape, Var], Var],
    x,
    eps: float = 1e-5,
    coords: Iterable[int] | None = None,
) -> float:
    """Max relative error between tape and central-difference gradients.

    ``f(tape, x_var)`` must build a scalar on ``tape``. The error per
    coordinate is ``|analytic - numeric| / (|numeric| + 1e-8)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(x, dtype=np.float64)
    tape = Tape()
    xv = tape.leaf(x0)
    out = f(tape, xv)
    if not np.all(np.isfinite(out.value)):
        raise TapeError("non-finite forward value in grad_check")
    analytic = tape.backward(out)[xv].ravel()

    def value_at(z):
        t = Tape()
        v = f(t, t.const(z)).value
        if not np.all(np.isfinite(v)):
            raise TapeError("non-finite forward value in grad_check")
        return float(v)

    idxs = range(x0.size) if coords is None else coords
    worst = 0.0
    flat = x0.ravel()
    for i in idxs:
        zp = flat.copy()
        zm = flat.copy()
        zp[i] += eps
        zm[i] -= eps
        num = (value_at(zp.reshape(x0.shape)) - value_at(zm.reshape(x0.shape))) / (2 * eps)
        worst = max(worst, abs(analytic[i] - num) / (abs(num) + 1e-8))
    return worst
