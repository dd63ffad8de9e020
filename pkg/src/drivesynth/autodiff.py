"""Reverse-mode differentiation over dense float64 arrays.

Every primitive application is appended to a :class:`Tape`; because nodes are
recorded in evaluation order the tape is already topologically sorted and
:func:`backward` just walks it in reverse. Broadcasting is deliberately absent
(except scalar ops); reshape/permute/concat make every shape change explicit.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class Tape:
    """Ordered record of primitive applications.

    ``record=False`` gives an inference tape: values are computed, nothing is
    kept for the backward pass.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self.nodes: list[Tensor] = []

    def leaf(self, value, name: str | None = None) -> Tensor:
        return Tensor(self, value, requires_grad=True, name=name)

    def constant(self, value) -> Tensor:
        return Tensor(self, value, requires_grad=False)

    def __len__(self):
        return len(self.nodes)


class Tensor:
    __slots__ = ("tape", "value", "parents", "vjp", "op", "requires_grad", "name", "grad", "index")

    def __init__(self, tape: Tape, value, requires_grad=False, parents=(), vjp=None,
                 op="leaf", name=None):
        v = np.asarray(value, dtype=np.float64)
        if v is value:
            v = v.copy() if op == "leaf" else v
        self.tape = tape
        self.value = v
        self.parents = parents
        self.vjp = vjp
        self.op = op
        self.requires_grad = requires_grad
        self.name = name
        self.grad = None
        self.index = len(tape.nodes)
        if tape.record:
            tape.nodes.append(self)

    @property
    def shape(self) -> tuple:
        return self.value.shape

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape})"

    # sugar
    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else mul_scalar(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _tape_of(*xs: Tensor) -> Tape:
    tape = xs[0].tape
    for x in xs[1:]:
        if x.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


def _node(value, parents, vjp, op) -> Tensor:
    tape = _tape_of(*parents)
    needs = tape.record and any(p.requires_grad for p in parents)
    return Tensor(tape, value, requires_grad=needs, parents=parents if needs else (),
                  vjp=vjp if needs else None, op=op)


def _same_shape(op, a: Tensor, b: Tensor):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- primitives

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; batch dims must match exactly."""
    if a.value.ndim < 2 or a.value.ndim != b.value.ndim:
        raise ShapeError(f"matmul: incompatible ranks {a.shape} @ {b.shape}")
    if a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible dims {a.shape} @ {b.shape}")
    av, bv = a.value, b.value

    def vjp(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return _node(av @ bv, (a, b), vjp, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _node(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _node(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product of equal-shape tensors."""
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _node(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def mul_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _node(a.value * s, (a,), lambda g: (g * s,), "mul_scalar")


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _node(a.value + s, (a,), lambda g: (g,), "add_scalar")


def relu(a: Tensor) -> Tensor:
    mask = a.value > 0
    return _node(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def log(a: Tensor) -> Tensor:
    av = a.value
    return _node(np.log(av), (a,), lambda g: (g / av,), "log")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where clamping is active."""
    pass_through = (a.value >= lo) & (a.value <= hi)
    return _node(np.clip(a.value, lo, hi), (a,), lambda g: (g * pass_through,), "clip")


def softmax_lastdim(a: Tensor) -> Tensor:
    x = a.value - a.value.max(axis=-1, keepdims=True)
    e = np.exp(x)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        # fused Jacobian-vector form, no n x n matrices
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _node(y, (a,), vjp, "softmax")


def layer_norm_lastdim(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} vs last dim {d}")
    x = a.value
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value
    y = xhat * gv + bias.value
    axes = tuple(range(x.ndim - 1))

    def vjp(g):
        dxhat = g * gv
        dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _node(y, (a, gain, bias), vjp, "layer_norm")


def concat_lastdim(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"concat: leading dims differ {a.shape} vs {b.shape}")
    k = a.shape[-1]
    return _node(np.concatenate([a.value, b.value], axis=-1), (a, b),
                 lambda g: (g[..., :k], g[..., k:]), "concat")


def concat(parts: list[Tensor], axis: int) -> Tensor:
    """Concatenate along any axis (used to stack attention keys)."""
    vals = [p.value for p in parts]
    ref = list(vals[0].shape)
    for v in vals[1:]:
        other = list(v.shape)
        if len(other) != len(ref) or any(o != r for i, (o, r) in enumerate(zip(other, ref))
                                         if i != axis % len(ref)):
            raise ShapeError(f"concat: incompatible shapes {[p.shape for p in parts]}")
    splits = np.cumsum([v.shape[axis] for v in vals])[:-1]
    return _node(np.concatenate(vals, axis=axis), tuple(parts),
                 lambda g: tuple(np.split(g, splits, axis=axis)), "concat")


def reshape(a: Tensor, dims) -> Tensor:
    dims = tuple(int(d) for d in dims)
    if int(np.prod(dims)) != a.value.size or any(d < 0 for d in dims):
        raise ShapeError(f"reshape: cannot view {a.shape} as {dims}")
    shp = a.shape
    return _node(a.value.reshape(dims), (a,), lambda g: (g.reshape(shp),), "reshape")


def permute(a: Tensor, axes) -> Tensor:
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.value.ndim)):
        raise ShapeError(f"permute: {axes} is not a permutation of rank {a.value.ndim}")
    inv = tuple(np.argsort(axes))
    return _node(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),), "permute")


def sum_all(a: Tensor) -> Tensor:
    shp = a.shape
    return _node(np.asarray(a.value.sum()), (a,), lambda g: (np.broadcast_to(g, shp).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    return mul_scalar(sum_all(a), 1.0 / a.value.size)


# ------------------------------------------------------------------- backward

def backward(tape: Tape, root: Tensor) -> dict:
    """Exact adjoints of a scalar ``root`` with respect to every leaf.

    Returns ``{leaf: grad}`` for leaves that require grad and stores the same
    array on ``leaf.grad``.
    """
    if root.tape is not tape:
        raise ValueError("root was not recorded on this tape")
    if root.value.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {root.shape}")
    if not tape.record:
        raise ValueError("inference tape holds no graph")
    grads: dict[int, np.ndarray] = {root.index: np.ones_like(root.value)}
    leaves = {}
    for node in reversed(tape.nodes[: root.index + 1]):
        g = grads.pop(node.index, None)
        if g is None or not node.requires_grad:
            continue
        if node.vjp is None:
            node.grad = g
            leaves[node] = g
            continue
        for parent, pg in zip(node.parents, node.vjp(g)):
            if not parent.requires_grad:
                continue
            prev = grads.get(parent.index)
            grads[parent.index] = pg if prev is None else prev + pg
    return leaves


def numeric_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x`` (float64)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f(x)
        flat[i] = orig - step
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * step)
    return g


def grad_close(analytic, numeric, rtol: float = 1e-4, atol: float = 1e-7) -> bool:
    """Elementwise ``|a - n| <= max(rtol * |n|, atol)``."""
    a = np.asarray(analytic)
    n = np.asarray(numeric)
    return bool(np.all(np.abs(a - n) <= np.maximum(rtol * np.abs(n), atol)))
