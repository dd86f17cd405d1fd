"""Reverse-mode automatic differentiation over numpy arrays.

A small tape: each `Tensor` wraps a float64 ndarray and remembers how it was
produced. `Tensor.backward()` walks the recorded graph in reverse topological
order and accumulates adjoints. The op set is deliberately closed: array
arithmetic, exp/log/pow, sigmoid-family nonlinearities, min/max with a fixed
subgradient convention, matmul, reductions, and shape plumbing. Anything the
rendering and loss code needs beyond that is built as a composite of these.

Subgradient conventions (they matter for the renderer's clamps):
  * minimum/maximum route the gradient to the first argument on ties, so
    min(x, c) at x == c differentiates as the unclamped branch.
  * abs at 0 has gradient 0.
  * pow(x, p) with p < 1 at x == 0 has gradient 0 (clamped branch).

Gradient accumulation is single-threaded and ordered by node creation index,
so repeated runs produce bit-identical gradients.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ParamVector",
    "GradCheckReport",
    "NonFiniteError",
    "no_grad",
    "astensor",
    "grad",
    "check_grad",
]

_node_counter = itertools.count()
_GRAD_ENABLED = True


class NonFiniteError(RuntimeError):
    """Raised when a forward pass produced a non-finite intermediate."""


class no_grad:
    """Context manager that disables tape recording (forward-only math)."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum gradient `g` down to `shape` (reverses numpy broadcasting)."""
    if g.shape == shape:
        return g
    # Sum out prepended axes.
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """Array node on the tape.

    `data` is always a float64 ndarray. Leaves created with `track=True`
    collect gradients in `.grad` after `backward()`.
    """

    __slots__ = ("data", "grad", "_parents", "_bw", "op", "idx", "track")

    def __init__(self, data, track: bool = False, op: str = "leaf",
                 parents: tuple = (), bw: Callable | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.op = op
        self.idx = next(_node_counter)
        self._parents = parents
        self._bw = bw
        self.track = track

    # -- graph construction -------------------------------------------------

    @staticmethod
    def _make(data, op, parents, bw):
        tracked = _GRAD_ENABLED and any(p.track for p in parents)
        if not tracked:
            return Tensor(data, track=False, op=op)
        return Tensor(data, track=True, op=op, parents=parents, bw=bw)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> np.ndarray:
        return self.data

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.data.shape})"

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other):
        o = astensor(other)
        out_data = self.data + o.data

        def bw(g, a=self, b=o):
            if a.track:
                a._acc(_unbroadcast(g, a.data.shape))
            if b.track:
                b._acc(_unbroadcast(g, b.data.shape))

        return Tensor._make(out_data, "add", (self, o), bw)

    __radd__ = __add__

    def __neg__(self):
        def bw(g, a=self):
            if a.track:
                a._acc(-g)

        return Tensor._make(-self.data, "neg", (self,), bw)

    def __sub__(self, other):
        return self + (-astensor(other))

    def __rsub__(self, other):
        return astensor(other) + (-self)

    def __mul__(self, other):
        o = astensor(other)
        out_data = self.data * o.data

        def bw(g, a=self, b=o):
            if a.track:
                a._acc(_unbroadcast(g * b.data, a.data.shape))
            if b.track:
                b._acc(_unbroadcast(g * a.data, b.data.shape))

        return Tensor._make(out_data, "mul", (self, o), bw)

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = astensor(other)
        out_data = self.data / o.data

        def bw(g, a=self, b=o):
            if a.track:
                a._acc(_unbroadcast(g / b.data, a.data.shape))
            if b.track:
                b._acc(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

        return Tensor._make(out_data, "div", (self, o), bw)

    def __rtruediv__(self, other):
        return astensor(other) / self

    def __pow__(self, p: float):
        p = float(p)
        out_data = self.data ** p

        def bw(g, a=self, p=p, y=out_data):
            if not a.track:
                return
            if p == 2.0:
                d = 2.0 * a.data
            elif p == int(p) and p >= 1:
                d = p * a.data ** (p - 1.0)
            else:
                # Fractional/negative exponent: zero subgradient where the
                # base is 0 (clamped branch for x**p, p < 1).
                with np.errstate(divide="ignore", invalid="ignore"):
                    d = np.where(a.data > 0.0, p * a.data ** (p - 1.0), 0.0)
            a._acc(g * d)

        return Tensor._make(out_data, "pow", (self,), bw)

    def __getitem__(self, key):
        out_data = self.data[key]

        def bw(g, a=self, key=key):
            if a.track:
                acc = np.zeros_like(a.data)
                np.add.at(acc, key, g)
                a._acc(acc)

        return Tensor._make(out_data, "getitem", (self,), bw)

    # -- comparisons give plain bool arrays (no gradient) ---------------------

    def __gt__(self, other):
        return self.data > _raw(other)

    def __lt__(self, other):
        return self.data < _raw(other)

    def __ge__(self, other):
        return self.data >= _raw(other)

    def __le__(self, other):
        return self.data <= _raw(other)

    # -- shape plumbing --------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        out_data = self.data.reshape(shape)

        def bw(g, a=self):
            if a.track:
                a._acc(g.reshape(a.data.shape))

        return Tensor._make(out_data, "reshape", (self,), bw)

    def transpose(self, *axes):
        axes = axes or None
        out_data = self.data.transpose(axes) if axes else self.data.T

        def bw(g, a=self, axes=axes):
            if a.track:
                if axes:
                    inv = np.argsort(axes)
                    a._acc(g.transpose(inv))
                else:
                    a._acc(g.T)

        return Tensor._make(out_data, "transpose", (self,), bw)

    @property
    def T(self):
        return self.transpose()

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_data = self.data.sum(axis=axis, keepdims=keepdims)

        def bw(g, a=self, axis=axis, keepdims=keepdims):
            if not a.track:
                return
            if axis is None:
                a._acc(np.broadcast_to(g, a.data.shape).copy())
            else:
                if not keepdims:
                    g = np.expand_dims(g, axis)
                a._acc(np.broadcast_to(g, a.data.shape).copy())

        return Tensor._make(out_data, "sum", (self,), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def max_over(self, axis: int):
        """Max reduction along one axis. Ties send gradient to the lowest index."""
        out_data = self.data.max(axis=axis)
        arg = self.data.argmax(axis=axis)

        def bw(g, a=self, axis=axis, arg=arg):
            if a.track:
                acc = np.zeros_like(a.data)
                idx = list(np.indices(out_data.shape))
                idx.insert(axis, arg)
                np.add.at(acc, tuple(idx), g)
                a._acc(acc)

        return Tensor._make(out_data, "max_over", (self,), bw)

    def dot(self, other):
        """Matrix/vector product (defers to numpy @ semantics for 1-D/2-D)."""
        o = astensor(other)
        out_data = self.data @ o.data

        def bw(g, a=self, b=o):
            ad, bd = a.data, b.data
            if a.ndim == 1 and b.ndim == 1:
                if a.track:
                    a._acc(g * bd)
                if b.track:
                    b._acc(g * ad)
            elif a.ndim == 2 and b.ndim == 1:
                if a.track:
                    a._acc(np.outer(g, bd))
                if b.track:
                    b._acc(ad.T @ g)
            elif a.ndim == 1 and b.ndim == 2:
                if a.track:
                    a._acc(g @ bd.T)
                if b.track:
                    b._acc(np.outer(ad, g))
            else:
                if a.track:
                    a._acc(g @ bd.T)
                if b.track:
                    b._acc(ad.T @ g)

        return Tensor._make(out_data, "dot", (self, o), bw)

    __matmul__ = dot

    # -- backward ----------------------------------------------------------------

    def _acc(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad = self.grad + g

    def backward(self):
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
        order = _toposort(self)
        for node in order:  # clear stale adjoints from any earlier backward
            node.grad = None
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._bw is not None and node.grad is not None:
                node._bw(node.grad)

    def find_nonfinite(self):
        """First node (by creation order) with a non-finite value, or None."""
        order = _toposort(self)
        bad = [n for n in order if not np.all(np.isfinite(n.data))]
        if not bad:
            return None
        return min(bad, key=lambda n: n.idx)


def _toposort(root: Tensor) -> list:
    order, seen, stack = [], set(), [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _raw(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def astensor(x, track: bool = False) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, track=track)


# -- elementwise functions ---------------------------------------------------------


def _unary(x: Tensor, fn, dfn, name: str) -> Tensor:
    x = astensor(x)
    out_data = fn(x.data)

    def bw(g, a=x, y=out_data):
        if a.track:
            a._acc(g * dfn(a.data, y))

    return Tensor._make(out_data, name, (x,), bw)


def exp(x):
    return _unary(x, np.exp, lambda d, y: y, "exp")


def log(x):
    return _unary(x, np.log, lambda d, y: 1.0 / d, "log")


def sqrt(x):
    return _unary(x, np.sqrt, lambda d, y: np.where(d > 0, 0.5 / np.sqrt(np.where(d > 0, d, 1.0)), 0.0), "sqrt")


def sin(x):
    return _unary(x, np.sin, lambda d, y: np.cos(d), "sin")


def cos(x):
    return _unary(x, np.cos, lambda d, y: -np.sin(d), "cos")


def tanh(x):
    return _unary(x, np.tanh, lambda d, y: 1.0 - y * y, "tanh")


def sigmoid(x):
    def fwd(d):
        out = np.empty_like(d)
        pos = d >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        e = np.exp(d[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    return _unary(x, fwd, lambda d, y: y * (1.0 - y), "sigmoid")


def softplus(x):
    def fwd(d):
        return np.where(d > 30.0, d, np.log1p(np.exp(np.minimum(d, 30.0))))

    def dfn(d, y):
        out = np.empty_like(d)
        pos = d >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        e = np.exp(d[~pos])
        out[~pos] = e / (1.0 + e)
        return out

    return _unary(x, fwd, dfn, "softplus")


def relu(x):
    return _unary(x, lambda d: np.maximum(d, 0.0), lambda d, y: (d > 0).astype(np.float64), "relu")


def absolute(x):
    return _unary(x, np.abs, lambda d, y: np.sign(d), "abs")


def maximum(a, b):
    """Elementwise max; gradient goes to `a` on ties."""
    a, b = astensor(a), astensor(b)
    out_data = np.maximum(a.data, b.data)

    def bw(g, a=a, b=b):
        take_a = a.data >= b.data
        if a.track:
            a._acc(_unbroadcast(g * take_a, a.data.shape))
        if b.track:
            b._acc(_unbroadcast(g * (~take_a), b.data.shape))

    return Tensor._make(out_data, "maximum", (a, b), bw)


def minimum(a, b):
    """Elementwise min; gradient goes to `a` on ties (unclamped branch)."""
    a, b = astensor(a), astensor(b)
    out_data = np.minimum(a.data, b.data)

    def bw(g, a=a, b=b):
        take_a = a.data <= b.data
        if a.track:
            a._acc(_unbroadcast(g * take_a, a.data.shape))
        if b.track:
            b._acc(_unbroadcast(g * (~take_a), b.data.shape))

    return Tensor._make(out_data, "minimum", (a, b), bw)


def clip(x, lo: float, hi: float):
    return minimum(maximum(x, lo), hi)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [astensor(p) for p in parts]
    out_data = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.data.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g, parts=parts, offsets=offsets, axis=axis):
        for p, o0, o1 in zip(parts, offsets[:-1], offsets[1:]):
            if p.track:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(o0, o1)
                p._acc(g[tuple(sl)])

    return Tensor._make(out_data, "concat", tuple(parts), bw)


def stack(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [astensor(p) for p in parts]
    out_data = np.stack([p.data for p in parts], axis=axis)

    def bw(g, parts=parts, axis=axis):
        for i, p in enumerate(parts):
            if p.track:
                p._acc(np.take(g, i, axis=axis))

    return Tensor._make(out_data, "stack", tuple(parts), bw)


def take(x: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather rows along an axis; backward scatter-adds (np.add.at, ordered)."""
    x = astensor(x)
    indices = np.asarray(indices)
    out_data = np.take(x.data, indices, axis=axis)

    def bw(g, a=x, indices=indices, axis=axis):
        if a.track:
            acc = np.zeros_like(a.data)
            sl = [slice(None)] * a.data.ndim
            sl[axis] = indices
            np.add.at(acc, tuple(sl), g)
            a._acc(acc)

    return Tensor._make(out_data, "take", (x,), bw)


def where_const(mask: np.ndarray, a, b):
    """Select by a constant boolean mask (mask itself carries no gradient)."""
    a, b = astensor(a), astensor(b)
    m = np.asarray(mask, dtype=bool)
    out_data = np.where(m, a.data, b.data)

    def bw(g, a=a, b=b, m=m):
        if a.track:
            a._acc(_unbroadcast(g * m, a.data.shape))
        if b.track:
            b._acc(_unbroadcast(g * (~m), b.data.shape))

    return Tensor._make(out_data, "where", (a, b), bw)


def _swap_last(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def bmm(a, b) -> Tensor:
    """Matmul over the last two axes with numpy broadcasting on leading axes."""
    a, b = astensor(a), astensor(b)
    out_data = np.matmul(a.data, b.data)

    def bw(g, a=a, b=b):
        if a.track:
            ga = np.matmul(g, _swap_last(b.data))
            a._acc(_unbroadcast(ga, a.data.shape))
        if b.track:
            gb = np.matmul(_swap_last(a.data), g)
            b._acc(_unbroadcast(gb, b.data.shape))

    return Tensor._make(out_data, "bmm", (a, b), bw)


def logsumexp(x: Tensor, axis: int = -1) -> Tensor:
    """Shift-stabilized log-sum-exp along one axis (composite op)."""
    x = astensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)  # all -inf row: lse = -inf via log(0)
    shifted = x - Tensor(m)
    s = exp(shifted).sum(axis=axis)
    return log(s) + Tensor(np.squeeze(m, axis=axis))


def norm(x: Tensor) -> Tensor:
    return sqrt((x * x).sum())


# -- parameter flattening ------------------------------------------------------------


@dataclass
class ParamVector:
    """Named parameter arrays with an exact flatten/unflatten round trip."""

    names: list[str]
    shapes: list[tuple]
    flat: np.ndarray
    _offsets: list[int] = field(default_factory=list)

    @classmethod
    def from_dict(cls, params: Mapping[str, np.ndarray]) -> "ParamVector":
        names = list(params.keys())
        shapes = [np.asarray(params[n]).shape for n in names]
        flat = np.concatenate([np.asarray(params[n], dtype=np.float64).ravel()
                               for n in names]) if names else np.zeros(0)
        pv = cls(names=names, shapes=shapes, flat=flat)
        pv._compute_offsets()
        return pv

    def _compute_offsets(self):
        sizes = [int(np.prod(s)) if s else 1 for s in self.shapes]
        self._offsets = list(np.cumsum([0] + sizes))

    def to_dict(self) -> dict[str, np.ndarray]:
        if not self._offsets:
            self._compute_offsets()
        out = {}
        for name, shape, o0, o1 in zip(self.names, self.shapes,
                                       self._offsets[:-1], self._offsets[1:]):
            out[name] = self.flat[o0:o1].reshape(shape)
        return out

    def replaced(self, flat: np.ndarray) -> "ParamVector":
        pv = ParamVector(names=self.names, shapes=self.shapes,
                         flat=np.asarray(flat, dtype=np.float64).copy())
        pv._compute_offsets()
        return pv

    @property
    def size(self) -> int:
        return self.flat.size


def grad(objective: Callable[[Mapping[str, Tensor]], Tensor],
         at: ParamVector) -> ParamVector:
    """Exact reverse-mode gradient of a scalar objective at a parameter point.

    The objective receives a dict of leaf Tensors keyed like `at` and must
    return a scalar Tensor. Raises NonFiniteError naming the first offending
    node when the forward value is non-finite.
    """
    leaves = {name: Tensor(arr, track=True)
              for name, arr in at.to_dict().items()}
    out = objective(leaves)
    if not np.all(np.isfinite(out.data)):
        bad = out.find_nonfinite()
        name = bad.op if bad is not None else "output"
        raise NonFiniteError(f"non-finite value produced by op '{name}'")
    out.backward()
    grads = {}
    for name, leaf in leaves.items():
        grads[name] = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
    return ParamVector.from_dict(grads)


@dataclass
class GradCheckReport:
    """Result of a finite-difference gradient comparison."""

    max_rel_err: float
    rel_err: np.ndarray
    excluded: list[int]
    analytic: np.ndarray
    numeric: np.ndarray


def check_grad(objective: Callable[[Mapping[str, Tensor]], Tensor],
               at: ParamVector, h: float = 1e-4,
               coords: Sequence[int] | None = None) -> GradCheckReport:
    """Central-difference check of `grad` on each (or a subset of) coordinate.

    Per-coordinate step h_i = max(h, h*|x_i|). Relative error denominator is
    max(|analytic|, |numeric|, 1e-8). Coordinates whose one-sided slopes
    disagree strongly (a kink inside the stencil, e.g. a clamp boundary) are
    reported in `excluded` rather than counted toward the max error.
    """
    analytic = grad(objective, at).flat

    def feval(flat):
        leaves = {name: Tensor(arr) for name, arr in at.replaced(flat).to_dict().items()}
        return float(objective(leaves).data)

    x0 = at.flat.copy()
    f0 = feval(x0)
    idxs = range(x0.size) if coords is None else coords
    numeric = np.zeros(x0.size)
    rel = np.zeros(x0.size)
    checked = np.zeros(x0.size, dtype=bool)
    excluded = []
    for i in idxs:
        hi = max(h, h * abs(x0[i]))
        xp = x0.copy(); xp[i] += hi
        xm = x0.copy(); xm[i] -= hi
        fp, fm = feval(xp), feval(xm)
        central = (fp - fm) / (2.0 * hi)
        numeric[i] = central
        checked[i] = True
        s_plus = (fp - f0) / hi
        s_minus = (f0 - fm) / hi
        scale = max(abs(s_plus), abs(s_minus), 1e-8)
        if abs(s_plus - s_minus) > 0.25 * scale and scale > 1e-6:
            excluded.append(i)
            continue
        rel[i] = abs(analytic[i] - central) / max(abs(analytic[i]), abs(central), 1e-8)
    mask = checked.copy()
    mask[excluded] = False
    max_rel = float(rel[mask].max()) if mask.any() else 0.0
    return GradCheckReport(max_rel_err=max_rel, rel_err=rel, excluded=excluded,
                           analytic=analytic, numeric=numeric)
