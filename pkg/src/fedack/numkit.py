"""Dense float64 tensors with tape-based reverse-mode autodiff, plus Adam.

Every op records a node on the graph only when one of its inputs requires a
gradient, so inference through frozen networks costs nothing extra.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=DTYPE)
        self.requires_grad = requires_grad
        self.grad = None
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all of these route through the op functions below
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward):
    parents = tuple(p for p in parents)
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward)
    return Tensor(data)


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


# ---------------------------------------------------------------- ops


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    return _node(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def neg(a):
    a = as_tensor(a)
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    return _node(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def matmul(x, w):
    """``x[..., in] @ w[in, out]``; ``w`` must be 2-D."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ValueError(f"matmul shape mismatch: input {x.shape} vs weights {w.shape}")
    out = x.data @ w.data

    def back(g):
        gx = g @ w.data.T
        gw = x.data.reshape(-1, x.shape[-1]).T @ g.reshape(-1, w.shape[1])
        return gx, gw

    return _node(out, (x, w), back)


def dense(x, w, b):
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.ndim < 1 or w.ndim != 2 or x.shape[-1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(
            f"dense shape mismatch: input {x.shape}, weights {w.shape}, bias {b.shape}"
        )
    out = x.data @ w.data + b.data

    def back(g):
        gx = g @ w.data.T
        g2 = g.reshape(-1, w.shape[1])
        gw = x.data.reshape(-1, x.shape[-1]).T @ g2
        return gx, gw, g2.sum(axis=0)

    return _node(out, (x, w, b), back)


def reshape(a, shape):
    a = as_tensor(a)
    src = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    scale = np.where(a.data > 0, 1.0, slope)
    return _node(a.data * scale, (a,), lambda g: (g * scale,))


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return _node(out, (a,), lambda g: (g * (1.0 - out * out),))


def sigmoid(a):
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a):
    a = as_tensor(a)
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def square(a):
    a = as_tensor(a)
    return _node(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def maximum(a, floor):
    """Elementwise ``max(a, floor)`` for a constant floor; zero gradient where clamped."""
    a = as_tensor(a)
    keep = a.data >= floor
    return _node(np.where(keep, a.data, floor), (a,), lambda g: (g * keep,))


def softmax(a, axis=-1, mask=None):
    """Softmax with max-subtraction. Masked-out entries get probability 0; a row
    with no unmasked entry is all zeros."""
    a = as_tensor(a)
    x = a.data
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = np.divide(e, s, out=np.zeros_like(e), where=s > 0)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _node(out, (a,), back)


def log_softmax(a, axis=-1):
    a = as_tensor(a)
    x = a.data
    m = x.max(axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)
    return _node(out, (a,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def sum(a, axis=None, keepdims=False):  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(out, (a,), back)


def mean(a, axis=None, keepdims=False):
    n = a.data.size if axis is None else a.shape[axis]
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def back(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _node(out, tuple(tensors), back)


def cosine_similarity(a, b, axis=-1):
    """Cosine along ``axis``; a pair where either side has zero norm gets 0 and
    contributes no gradient."""
    a, b = as_tensor(a), as_tensor(b)
    na = np.linalg.norm(a.data, axis=axis, keepdims=True)
    nb = np.linalg.norm(b.data, axis=axis, keepdims=True)
    ok = (na > 0) & (nb > 0)
    na_s = np.where(ok, na, 1.0)
    nb_s = np.where(ok, nb, 1.0)
    dot = (a.data * b.data).sum(axis=axis, keepdims=True)
    cos = np.where(ok, dot / (na_s * nb_s), 0.0)

    def back(g):
        g = np.expand_dims(g, axis) * ok
        ga = g * (b.data / (na_s * nb_s) - cos * a.data / (na_s * na_s))
        gb = g * (a.data / (na_s * nb_s) - cos * b.data / (nb_s * nb_s))
        return ga, gb

    return _node(np.squeeze(cos, axis=axis), (a, b), back)


def pairwise_distance(x):
    """Euclidean distance matrix between the rows of ``x[N, F]``. The gradient of a
    zero distance is taken as 0 (subgradient)."""
    x = as_tensor(x)
    diff = x.data[:, None, :] - x.data[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=-1))
    safe = np.where(dist > 0, dist, 1.0)

    def back(g):
        coef = np.where(dist > 0, g / safe, 0.0)
        coef = coef + coef.T
        return ((coef[:, :, None] * diff).sum(axis=1),)

    return _node(dist, (x,), back)


# ---------------------------------------------------------------- backward


def backward(loss):
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf that
    requires a gradient, then drop the recorded graph."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order, seen, stack = [], set(), [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is None:
                g = np.zeros_like(node.data)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        if g is None:
            g = np.zeros_like(node.data)
        for p, pg in zip(node._parents, node._backward(g)):
            if not p.requires_grad:
                continue
            pg = np.asarray(pg, dtype=DTYPE).reshape(p.shape)
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg
        node._parents = ()
        node._backward = None


# ---------------------------------------------------------------- parameters


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class ParamSet:
    """Ordered, uniquely named parameter tensors of one network."""

    def __init__(self, entries=()):
        self._t = {}
        for name, value in entries:
            if name in self._t:
                raise ValueError(f"duplicate parameter name {name!r}")
            t = value if isinstance(value, Tensor) else Tensor(value, requires_grad=True)
            self._t[name] = t

    def __getitem__(self, name):
        return self._t[name]

    def __contains__(self, name):
        return name in self._t

    def __iter__(self):
        return iter(self._t.items())

    def __len__(self):
        return len(self._t)

    def names(self):
        return list(self._t)

    def tensors(self):
        return list(self._t.values())

    def signature(self):
        return [(n, t.shape) for n, t in self._t.items()]

    def compatible(self, other):
        return self.signature() == other.signature()

    def copy(self):
        return ParamSet((n, Tensor(t.data.copy(), requires_grad=True)) for n, t in self)

    def frozen(self):
        """Constant view sharing storage; forwards through it record nothing."""
        return ParamSet((n, Tensor(t.data)) for n, t in self)

    def assign(self, other):
        if not self.compatible(other):
            raise ValueError("cannot assign incompatible ParamSet")
        for (_, dst), (_, src) in zip(self, other):
            dst.data = src.data.copy()

    def zero_grad(self):
        for t in self._t.values():
            t.grad = None

    def select(self, prefix):
        """Sub-set of entries whose name starts with ``prefix`` (storage shared)."""
        return ParamSet((n[len(prefix):], t) for n, t in self if n.startswith(prefix))

    def fingerprint(self):
        h = hashlib.sha256()
        for n, t in self:
            h.update(n.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def is_finite(self):
        return all(np.all(np.isfinite(t.data)) for t in self._t.values())

    def to_dict(self):
        return {n: {"shape": list(t.shape), "data": t.data.ravel().tolist()} for n, t in self}

    @classmethod
    def from_dict(cls, obj):
        entries = []
        for n, rec in obj.items():
            shape = tuple(rec["shape"])
            data = np.asarray(rec["data"], dtype=DTYPE)
            if data.size != int(np.prod(shape)):
                raise ValueError(f"parameter {n!r}: {data.size} values for shape {shape}")
            entries.append((n, data.reshape(shape)))
        return cls(entries)

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def merge(**parts):
    """Concatenate ParamSets under ``prefix.`` namespaces (storage shared)."""
    return ParamSet((f"{p}.{n}", t) for p, ps in parts.items() for n, t in ps)


# ---------------------------------------------------------------- Adam


@dataclass
class AdamState:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)


def adam_step(params, state):
    """One bias-corrected Adam update in place. Gradients are consumed."""
    missing = [n for n, t in params if t.grad is None]
    if missing:
        raise ValueError(f"missing gradient for parameters: {missing}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params:
        g = p.grad
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        p.data = p.data - state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        p.grad = None
    return params, state
