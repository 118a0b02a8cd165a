"""Small reverse-mode autodiff over float64 numpy arrays.

Values stay float64 unless a leaf is given as ``np.longdouble``; that only
happens inside :func:`grad_check` when the finite-difference side runs in
extended precision.

Operations append nodes to a :class:`Tape`; :func:`backward` walks the tape in
reverse insertion order. Each node keeps its parents' node ids and a closure
holding whatever activations its gradient rule needs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import ShapeMismatch, TipError


class DomainError(TipError, ValueError):
    pass


class NotScalarOutput(TipError, ValueError):
    pass


def _as_real(x):
    arr = np.asarray(x)
    if arr.dtype == np.longdouble:
        return arr
    return arr.astype(np.float64, copy=False)


class Tensor:
    """A value on a tape. ``idx`` is the node id, or -1 for constants."""

    __slots__ = ("data", "tape", "idx")
    __array_priority__ = 100

    def __init__(self, data, tape=None, idx=-1):
        self.data = data
        self.tape = tape
        self.idx = idx

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def __repr__(self):
        kind = "const" if self.idx < 0 else f"node {self.idx}"
        return f"Tensor({kind}, shape={self.data.shape})"

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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return slice_(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


class Tape:
    """Append-only record of operations.

    Nodes are ``(op, parent_ids, backward_fn)``. Parents always precede their
    child, so reverse insertion order is a valid topological order.
    """

    def __init__(self):
        self.nodes = []
        self.names = {}
        self.shapes = {}

    def __len__(self):
        return len(self.nodes)

    def leaf(self, data, name=None) -> Tensor:
        arr = _as_real(data)
        idx = len(self.nodes)
        self.nodes.append(("leaf", (), None))
        self.shapes[idx] = arr.shape
        if name is not None:
            self.names[name] = idx
        return Tensor(arr, self, idx)

    def params(self, arrays: dict) -> dict:
        return {k: self.leaf(v, k) for k, v in arrays.items()}

    def const(self, data) -> Tensor:
        return Tensor(_as_real(data), self, -1)

    def _record(self, op, data, parents, backward) -> Tensor:
        idx = len(self.nodes)
        self.nodes.append((op, tuple(p.idx for p in parents), backward))
        return Tensor(data, self, idx)


def _lift(x, tape=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(_as_real(x), tape, -1)


def _tape_of(*ts):
    for t in ts:
        if t.idx >= 0:
            return t.tape
    return None


def _result(op, data, parents, backward):
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(data, None, -1)
    return tape._record(op, data, parents, backward)


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot broadcast {a.shape} with {b.shape}") from exc


# ---------------------------------------------------------------------------
# primitives


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _result("add", a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b)
    sa, sb = a.shape, b.shape
    return _result("sub", a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _check_broadcast(a, b)
    ad, bd = a.data, b.data
    need_a, need_b = a.idx >= 0, b.idx >= 0

    def back(g):
        return (_unbroadcast(g * bd, ad.shape) if need_a else None,
                _unbroadcast(g * ad, bd.shape) if need_b else None)

    return _result("mul", ad * bd, (a, b), back)


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    need_a, need_b = a.idx >= 0, b.idx >= 0

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if need_a else None
        gb = None
        if need_b:
            if ad.ndim > 2 and bd.ndim == 2:
                gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return _result("matmul", ad @ bd, (a, b), back)


def concat(tensors, axis=-1) -> Tensor:
    ts = [_lift(t) for t in tensors]
    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(str(exc)) from exc
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _result("concat", data, ts, back)


def _is_advanced(key):
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (np.ndarray, list)) for k in keys)


def slice_(a, key) -> Tensor:
    a = _lift(a)
    shape = a.shape
    adv = _is_advanced(key)

    def back(g):
        z = np.zeros(shape)
        if adv:
            np.add.at(z, key, g)
        else:
            z[key] = g
        return (z,)

    return _result("slice", a.data[key], (a,), back)


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    old = a.shape
    return _result("reshape", a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes) -> Tensor:
    a = _lift(a)
    inv = np.argsort(axes)
    return _result("transpose", np.transpose(a.data, axes), (a,),
                   lambda g: (np.transpose(g, inv),))


def tanh(a) -> Tensor:
    a = _lift(a)
    y = np.tanh(a.data)
    return _result("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def sigmoid(a) -> Tensor:
    a = _lift(a)
    x = _as_real(a.data)
    y = _sigmoid(np.atleast_1d(x)).reshape(x.shape)
    return _result("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def relu(a) -> Tensor:
    a = _lift(a)
    on = a.data > 0
    return _result("relu", np.where(on, a.data, 0.0), (a,), lambda g: (g * on,))


def exp(a) -> Tensor:
    a = _lift(a)
    y = np.exp(a.data)
    return _result("exp", y, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = _lift(a)
    x = a.data
    if np.any(x <= 0):
        raise DomainError("log of non-positive value")
    return _result("log", np.log(x), (a,), lambda g: (g / x,))


def softmax(a, axis=-1) -> Tensor:
    a = _lift(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _result("softmax", y, (a,), back)


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum_(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    shape = a.shape
    axes = _norm_axis(axis, a.ndim)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result("sum", a.data.sum(axis=axes, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims=False) -> Tensor:
    a = _lift(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return mul(sum_(a, axes, keepdims), 1.0 / n)


def norm(a, axis=-1, keepdims=False) -> Tensor:
    """Euclidean norm; the gradient at the origin is taken as zero."""
    a = _lift(a)
    x = a.data
    n = np.sqrt((x * x).sum(axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)

    def back(g):
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.where(n > 0, gg * x / safe, 0.0),)

    out = n if keepdims else np.squeeze(n, axis=axis)
    return _result("norm", out, (a,), back)


def _extremum(a, axis, keepdims, pick, op):
    a = _lift(a)
    x = a.data
    axis = axis % x.ndim
    idx = np.expand_dims(pick(x, axis=axis), axis)
    val = np.take_along_axis(x, idx, axis=axis)
    shape = x.shape

    def back(g):
        z = np.zeros(shape)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(z, idx, gg, axis=axis)
        return (z,)

    out = val if keepdims else np.squeeze(val, axis=axis)
    return _result(op, out, (a,), back)


def min_axis(a, axis=-1, keepdims=False) -> Tensor:
    """Minimum along ``axis``; the whole gradient goes to the earliest argmin."""
    return _extremum(a, axis, keepdims, np.argmin, "min")


def max_axis(a, axis=-1, keepdims=False) -> Tensor:
    return _extremum(a, axis, keepdims, np.argmax, "max")


def dropout(a, rate, rng, train) -> Tensor:
    """Inverted dropout; identity when not training."""
    a = _lift(a)
    if not train or rate <= 0.0:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, keep)


def where(mask, a, b) -> Tensor:
    """Select ``a`` where the constant boolean ``mask`` holds, else ``b``."""
    a, b = _lift(a), _lift(b)
    m = np.asarray(mask, dtype=bool)
    sa, sb = a.shape, b.shape
    return _result("where", np.where(m, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(m, g, 0.0), sa),
                              _unbroadcast(np.where(m, 0.0, g), sb)))


# ---------------------------------------------------------------------------
# reverse pass


def backward(tape: Tape, output: Tensor) -> dict:
    """Gradients of a scalar ``output`` with respect to every named leaf."""
    if output.data.size != 1:
        raise NotScalarOutput(f"output has shape {output.shape}")
    grads = [None] * len(tape.nodes)
    if output.idx >= 0:
        grads[output.idx] = np.ones_like(output.data)
        for i in range(output.idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            _, parents, back = tape.nodes[i]
            if back is None:
                continue
            for p, gp in zip(parents, back(g)):
                if p < 0 or gp is None:
                    continue
                grads[p] = gp if grads[p] is None else grads[p] + gp
    return {name: np.zeros(tape.shapes[i]) if grads[i] is None else grads[i]
            for name, i in tape.names.items()}


def grad_check(f, params: dict, eps=1e-5, fd_dtype=np.float64) -> float:
    """Worst relative error between backprop and central differences.

    ``f(tape, tensors)`` must build a scalar from the leaf tensors and be
    deterministic. Relative error uses max(|analytic|, |numeric|, 1e-8).
    ``fd_dtype=np.longdouble`` evaluates the finite differences in extended
    precision, which resolves gradient entries far below the float64
    cancellation floor of |f| * 1e-16 / eps. Backprop always runs in float64.
    """
    params64 = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    out = f(tape, tape.params(params64))
    analytic = backward(tape, out)
    probe = {k: v.astype(fd_dtype) for k, v in params64.items()}
    step = fd_dtype(eps)

    def value(p):
        t = Tape()
        return f(t, t.params(p)).data.reshape(())[()]

    worst = 0.0
    for name, arr in probe.items():
        flat = arr.reshape(-1)
        ga = np.asarray(analytic[name]).reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = value(probe)
            flat[j] = orig - step
            lo = value(probe)
            flat[j] = orig
            num = float((hi - lo) / (2 * step))
            denom = max(abs(ga[j]), abs(num), 1e-8)
            worst = max(worst, abs(ga[j] - num) / denom)
    return worst


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr=1e-3,
              beta1=0.9, beta2=0.999, epsilon=1e-8):
    """One bias-corrected Adam update. Returns new (params, state)."""
    t = state.step + 1
    new_p, new_m, new_v = {}, {}, {}
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise ShapeMismatch(f"{name}: grad {np.shape(g)} vs param {np.shape(p)}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        elif m.shape != np.shape(p):
            raise ShapeMismatch(f"{name}: state {m.shape} vs param {np.shape(p)}")
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * (g * g)
        new_p[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + epsilon)
        new_m[name] = m
        new_v[name] = v
    return new_p, AdamState(t, new_m, new_v)
