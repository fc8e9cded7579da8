"""Minimal reverse-mode automatic differentiation over numpy arrays.

Graphs are recorded eagerly: each op returns a :class:`Tensor` that keeps
references to the tensors it was computed from together with a
vector-Jacobian product.  Only the primitive set needed by the field,
shading and rendering stack is implemented; model code composes these.

Conventions
-----------
* Parameters live in float32.  Ops follow numpy promotion, so evaluating a
  graph with float64 leaves (as the finite-difference checker does) runs
  the whole computation in float64.
* ``clamp`` is a hard gradient stop: cograds are zeroed wherever the input
  fell outside the range.
* Tensors that do not require gradients are treated as constants and are
  dropped from the recorded graph, so forward-only evaluation carries no
  bookkeeping cost beyond the node wrapper.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np


class GraphError(Exception):
    """Raised for structural autodiff errors (bad loss shape, broken node)."""


class NondeterministicFunctionError(Exception):
    """Raised when a function handed to finite_diff_check is not repeatable."""


def _asarray(x) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x)


class Tensor:
    """Dense array plus optional gradient tape bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents")

    def __init__(self, data, requires_grad: bool = False, dtype=np.float32):
        arr = np.asarray(data)
        if dtype is not None and arr.dtype != dtype:
            arr = arr.astype(dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()

    # -- graph bookkeeping -------------------------------------------------
    @property
    def tracked(self) -> bool:
        return self.requires_grad or bool(self._parents)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._parents = ()
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    # -- operator sugar ----------------------------------------------------
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
        return neg(self)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) != 1 else shape[0])

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def make_node(data: np.ndarray, parents: Iterable[tuple["Tensor", Callable]]) -> Tensor:
    """Create a graph node.  ``parents`` pairs each input tensor with the
    function mapping the node's cograd to that input's cograd.

    Inputs that are not tracked tensors are dropped (constants).  Custom
    fused primitives elsewhere in the package are built on this hook.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.requires_grad = False
    out._parents = tuple(
        (p, vjp) for p, vjp in parents if isinstance(p, Tensor) and p.tracked
    )
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a cograd back down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    av, bv = _asarray(a), _asarray(b)
    return make_node(av + bv, [
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(g, bv.shape)),
    ])


def sub(a, b) -> Tensor:
    av, bv = _asarray(a), _asarray(b)
    return make_node(av - bv, [
        (a, lambda g: _unbroadcast(g, av.shape)),
        (b, lambda g: _unbroadcast(-g, bv.shape)),
    ])


def mul(a, b) -> Tensor:
    av, bv = _asarray(a), _asarray(b)
    return make_node(av * bv, [
        (a, lambda g: _unbroadcast(g * bv, av.shape)),
        (b, lambda g: _unbroadcast(g * av, bv.shape)),
    ])


def div(a, b) -> Tensor:
    av, bv = _asarray(a), _asarray(b)
    return make_node(av / bv, [
        (a, lambda g: _unbroadcast(g / bv, av.shape)),
        (b, lambda g: _unbroadcast(-g * av / (bv * bv), bv.shape)),
    ])


def neg(a) -> Tensor:
    av = _asarray(a)
    return make_node(-av, [(a, lambda g: -g)])


def power(a, p: float) -> Tensor:
    """Elementwise a**p for a constant exponent."""
    av = _asarray(a)
    p = float(p)
    return make_node(av ** p, [(a, lambda g: g * p * av ** (p - 1.0))])


def sqrt(a) -> Tensor:
    return power(a, 0.5)


def matmul(a, b) -> Tensor:
    av, bv = _asarray(a), _asarray(b)
    if av.ndim != 2 or bv.ndim != 2:
        raise GraphError("matmul supports 2-D operands only")
    return make_node(av @ bv, [
        (a, lambda g: g @ bv.T),
        (b, lambda g: av.T @ g),
    ])


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    av = _asarray(a)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, av.shape).copy()
        if not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, av.shape).copy()

    return make_node(av.sum(axis=axis, keepdims=keepdims), [(a, vjp)])


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    av = _asarray(a)
    if axis is None:
        n = av.size
    else:
        n = av.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    arrs = [_asarray(p) for p in parts]
    out = np.concatenate(arrs, axis=axis)
    sizes = [a.shape[axis] for a in arrs]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        sl = [slice(None)] * out.ndim
        sl[axis] = slice(int(offsets[i]), int(offsets[i + 1]))
        sl = tuple(sl)
        return lambda g: g[sl]

    return make_node(out, [(p, make_vjp(i)) for i, p in enumerate(parts)])


def stack(parts: Sequence, axis: int = -1) -> Tensor:
    arrs = [_asarray(p) for p in parts]
    out = np.stack(arrs, axis=axis)

    def make_vjp(i):
        return lambda g: np.take(g, i, axis=axis)

    return make_node(out, [(p, make_vjp(i)) for i, p in enumerate(parts)])


def reshape(a, shape) -> Tensor:
    av = _asarray(a)
    return make_node(av.reshape(shape), [(a, lambda g: g.reshape(av.shape))])


def broadcast_to(a, shape) -> Tensor:
    av = _asarray(a)
    out = np.broadcast_to(av, shape)
    return make_node(out, [(a, lambda g: _unbroadcast(g, av.shape))])


def take(a, idx) -> Tensor:
    """Basic/fancy indexing with scatter-add backward.

    Intended for small selections (slices, component picks, shading-point
    gathers); the bulk interpolation paths use fused primitives instead.
    """
    av = _asarray(a)
    out = av[idx]

    def vjp(g):
        acc = np.zeros(av.shape, dtype=g.dtype)
        np.add.at(acc, idx, g)
        return acc

    return make_node(out, [(a, vjp)])


def sigmoid(a) -> Tensor:
    av = _asarray(a)
    out = np.empty_like(av)
    pos = av >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    e = np.exp(av[~pos])
    out[~pos] = e / (1.0 + e)
    return make_node(out, [(a, lambda g: g * out * (1.0 - out))])


def softplus(a) -> Tensor:
    av = _asarray(a)
    out = np.maximum(av, 0.0) + np.log1p(np.exp(-np.abs(av)))
    sig = np.empty_like(av)
    pos = av >= 0
    sig[pos] = 1.0 / (1.0 + np.exp(-av[pos]))
    e = np.exp(av[~pos])
    sig[~pos] = e / (1.0 + e)
    return make_node(out, [(a, lambda g: g * sig)])


def exp(a) -> Tensor:
    av = _asarray(a)
    out = np.exp(av)
    return make_node(out, [(a, lambda g: g * out)])


def log(a) -> Tensor:
    av = _asarray(a)
    return make_node(np.log(av), [(a, lambda g: g / av)])


def sin(a) -> Tensor:
    av = _asarray(a)
    return make_node(np.sin(av), [(a, lambda g: g * np.cos(av))])


def cos(a) -> Tensor:
    av = _asarray(a)
    return make_node(np.cos(av), [(a, lambda g: -g * np.sin(av))])


def clamp(a, lo=None, hi=None) -> Tensor:
    """Clip with hard-stop gradients: zero cograd outside [lo, hi]."""
    av = _asarray(a)
    out = np.clip(av, lo, hi)
    inside = np.ones(av.shape, dtype=bool)
    if lo is not None:
        inside &= av >= lo
    if hi is not None:
        inside &= av <= hi
    return make_node(out, [(a, lambda g: g * inside)])


def relu(a) -> Tensor:
    return clamp(a, lo=0.0)


def exclusive_cumsum(a, axis: int = -1) -> Tensor:
    """y[..., j] = sum_{k<j} x[..., k]; backward is the reverse analogue."""
    av = _asarray(a)
    cs = np.cumsum(av, axis=axis)
    out = np.roll(cs, 1, axis=axis)
    sl = [slice(None)] * av.ndim
    sl[axis] = 0
    out[tuple(sl)] = 0.0

    def vjp(g):
        rc = np.cumsum(np.flip(g, axis=axis), axis=axis)
        rc = np.flip(rc, axis=axis)
        shifted = np.roll(rc, -1, axis=axis)
        sl2 = [slice(None)] * g.ndim
        sl2[axis] = -1
        shifted[tuple(sl2)] = 0.0
        return shifted

    return make_node(out, [(a, vjp)])


def segment_sum(values, segment_ids: np.ndarray, num_segments: int) -> Tensor:
    """Sum rows of ``values`` into ``num_segments`` buckets.

    ``values`` is (N,) or (N, C); ``segment_ids`` is constant int (N,).
    """
    v = _asarray(values)
    ids = np.asarray(segment_ids)
    if v.ndim == 1:
        out = np.bincount(ids, weights=v, minlength=num_segments).astype(v.dtype)

        def vjp(g):
            return g[ids]
    else:
        cols = v.shape[1]
        out = np.empty((num_segments, cols), dtype=v.dtype)
        for c in range(cols):
            out[:, c] = np.bincount(ids, weights=v[:, c], minlength=num_segments)

        def vjp(g):
            return g[ids]

    return make_node(out, [(values, vjp)])


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent, _ in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every trainable leaf.

    The loss must be scalar.  Frozen tensors (requires_grad=False) never
    appear in the recorded graph and therefore receive no gradient buffer.
    """
    if not isinstance(loss, Tensor):
        raise GraphError("backward expects a Tensor loss")
    if loss.data.size != 1:
        raise GraphError(f"loss must be scalar, got shape {loss.data.shape}")
    if not loss.tracked:
        return

    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {
        id(loss): np.ones_like(loss.data)
    }
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad and not node._parents:
            node.grad = g.astype(node.data.dtype) if node.grad is None \
                else node.grad + g.astype(node.data.dtype)
            continue
        for parent, vjp in node._parents:
            if vjp is None:
                raise GraphError("graph contains a node without a registered vjp")
            contrib = vjp(g)
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + contrib
            else:
                grads[key] = contrib
        # leaves with requires_grad that also have parents do not occur:
        # parameters are always graph leaves.


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def finite_diff_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-3,
    rel_floor: float = 1e-8,
    max_entries_per_tensor: int | None = None,
    entry_seed: int = 0,
    analytic_in_float64: bool = False,
) -> float:
    """Max relative error between backward() gradients and central differences.

    ``f`` must be a deterministic closure over ``params`` returning a scalar
    Tensor; determinism is verified by evaluating twice.  Finite differences
    always re-evaluate ``f`` with float64 parameter data so the difference
    quotient is trustworthy.

    By default the analytic gradient comes from the production float32
    path, which is appropriate when every parameter has a healthy gradient
    magnitude.  For large composite graphs, set ``analytic_in_float64`` to
    run the same backward code at 64 bits: parameters whose true gradient
    sits below the float32 noise floor (~1e-6 absolute) would otherwise
    dominate the per-parameter relative error without indicating any
    gradient-math defect.
    """
    y1 = f()
    y2 = f()
    if y1.data.size != 1:
        raise GraphError("finite_diff_check needs a scalar function")
    if not np.array_equal(y1.data, y2.data):
        raise NondeterministicFunctionError(
            "function is not repeatable under a fixed seed")

    originals = [p.data for p in params]

    if analytic_in_float64:
        for p, d in zip(params, originals):
            p.data = np.asarray(d).astype(np.float64)
    for p in params:
        p.zero_grad()
    backward(f())
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy()
                for p in params]
    for p in params:
        p.zero_grad()

    for p, d in zip(params, originals):
        p.data = np.asarray(d).astype(np.float64)

    rng = np.random.default_rng(entry_seed)
    try:
        worst = 0.0
        for p, a in zip(params, analytic):
            flat = p.data.reshape(-1)
            n = flat.size
            if max_entries_per_tensor is not None and n > max_entries_per_tensor:
                entries = rng.choice(n, size=max_entries_per_tensor, replace=False)
            else:
                entries = range(n)
            aflat = a.reshape(-1)
            for i in entries:
                keep = flat[i]
                flat[i] = keep + step
                hi = float(f().data)
                flat[i] = keep - step
                lo = float(f().data)
                flat[i] = keep
                fd = (hi - lo) / (2.0 * step)
                err = abs(float(aflat[i]) - fd) / max(abs(float(aflat[i])), rel_floor)
                if err > worst:
                    worst = err
    finally:
        for p, d in zip(params, originals):
            p.data = d

    return worst
