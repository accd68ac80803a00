"""Dense float64 tensors with reverse-mode differentiation.

Every operation records its parents and a closure mapping the upstream
gradient to one gradient per parent. ``Tensor.backward`` walks the recorded
graph once in reverse topological order and then frees it, so a graph is
built per iteration and never reused.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

from .errors import ContractError, DimensionError, DomainError, ValidationError

# Floor applied inside every logarithm of a probability.
EPS = 1e-12
ROW_TOL = 1e-6

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


class Tensor:
    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward_fn = None
        self._op = "leaf"
        self._consumed = False

    @classmethod
    def _make(cls, data, parents, op, backward_fn):
        out = cls.__new__(cls)
        out.data = data if data.dtype == np.float64 else data.astype(np.float64)
        out.grad = None
        out._op = op
        out._consumed = False
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward_fn = backward_fn
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward_fn = None
        return out

    # -- basic properties ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward_fn is None

    def numpy(self):
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """Copy of the values with no graph; later edits to either side do not leak."""
        return Tensor(self.data.copy())

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag}, op={self._op})"

    def __len__(self):
        return self.data.shape[0]

    # -- backward -----------------------------------------------------------

    def backward(self):
        if self.data.ndim != 0:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._consumed:
            raise ContractError("graph already consumed by a previous backward(); rebuild it")
        if not self.requires_grad:
            raise ContractError("loss does not depend on any tensor that requires grad")

        topo = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        grads = {id(self): np.ones_like(self.data)}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

        for node in topo:
            if not node.is_leaf:
                node._parents = ()
                node._backward_fn = None
                node._consumed = True

    # -- arithmetic ---------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # method sugar
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def tanh(self):
        return tanh(self)


# ---------------------------------------------------------------------------
# elementwise


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data + b.data, (a, b), "add",
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(
        a.data - b.data, (a, b), "sub",
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._make(
        ad * bd, (a, b), "mul",
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    return Tensor._make(
        ad / bd, (a, b), "div",
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * ad / (bd * bd), bd.shape)),
    )


def neg(a):
    return Tensor._make(-a.data, (a,), "neg", lambda g: (-g,))


def power(a, exponent: float):
    ad = a.data
    p = float(exponent)
    return Tensor._make(ad**p, (a,), "pow", lambda g: (g * p * ad ** (p - 1),))


def exp(a):
    out = np.exp(a.data)
    return Tensor._make(out, (a,), "exp", lambda g: (g * out,))


def log(a):
    ad = a.data
    return Tensor._make(np.log(ad), (a,), "log", lambda g: (g / ad,))


def tanh(a):
    out = np.tanh(a.data)
    return Tensor._make(out, (a,), "tanh", lambda g: (g * (1.0 - out * out),))


def relu(a):
    mask = a.data > 0
    return Tensor._make(np.where(mask, a.data, 0.0), (a,), "relu", lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(a):
    """Tanh approximation of GELU."""
    x = a.data
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (a,), "gelu", backward)


def masked_fill(a, mask, value: float):
    mask = np.asarray(mask, dtype=bool)
    out = np.where(mask, value, a.data)
    return Tensor._make(out, (a,), "masked_fill", lambda g: (np.where(mask, 0.0, g),))


# ---------------------------------------------------------------------------
# reductions and shape ops


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        g = np.expand_dims(g, axes)
    return np.broadcast_to(g, shape)


def tsum(a, axis=None, keepdims=False):
    shape = a.shape
    return Tensor._make(
        np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), "sum",
        lambda g: (_expand_reduced(g, shape, axis, keepdims).copy(),),
    )


def mean(a, axis=None, keepdims=False):
    shape = a.shape
    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    count = a.data.size // max(out.size, 1) if a.data.size else 1
    return Tensor._make(
        out, (a,), "mean",
        lambda g: (_expand_reduced(g, shape, axis, keepdims) / count,),
    )


def reshape(a, shape):
    old = a.shape
    return Tensor._make(a.data.reshape(shape), (a,), "reshape", lambda g: (g.reshape(old),))


def transpose(a, axes=None):
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inverse = np.argsort(axes)
    return Tensor._make(
        np.transpose(a.data, axes), (a,), "transpose", lambda g: (np.transpose(g, inverse),)
    )


def _is_advanced(key):
    keys = key if isinstance(key, tuple) else (key,)
    return any(isinstance(k, (list, np.ndarray)) for k in keys)


def getitem(a, key):
    shape = a.shape
    advanced = _is_advanced(key)

    def backward(g):
        out = np.zeros(shape)
        if advanced:
            np.add.at(out, key, g)
        else:
            out[key] += g
        return (out,)

    return Tensor._make(np.array(a.data[key]), (a,), "slice", backward)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(
        np.concatenate([t.data for t in tensors], axis=axis), tensors, "concat",
        lambda g: tuple(np.split(g, splits, axis=axis)),
    )


def stack(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    n = len(tensors)
    return Tensor._make(
        np.stack([t.data for t in tensors], axis=axis), tensors, "stack",
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor._make(ad @ bd, (a, b), "matmul", backward)


def embedding(table, indices):
    """Row lookup ``table[indices]``; gradient scatters back into the table."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range for table with {table.shape[0]} rows")
    shape = table.shape

    def backward(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return Tensor._make(table.data[idx], (table,), "embedding", backward)


def layer_norm(a, eps: float = 1e-5):
    """Normalize over the last axis (no affine part)."""
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return Tensor._make(xhat, (a,), "layer_norm", backward)


# ---------------------------------------------------------------------------
# probability ops


def _check_tau(tau):
    tau_arr = np.asarray(tau, dtype=np.float64)
    if not np.all(tau_arr > 0):
        raise DomainError(f"temperature must be positive, got {tau}")
    return tau_arr


def tempered_softmax(logits, tau=1.0):
    """softmax(logits / tau) along the last axis; tau may broadcast per row."""
    logits = as_tensor(logits)
    tau_arr = _check_tau(tau)
    z = logits.data / tau_arr
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        gz = y * (g - (g * y).sum(axis=-1, keepdims=True))
        return (_unbroadcast(gz / tau_arr, logits.shape),)

    return Tensor._make(y, (logits,), "tempered_softmax", backward)


def softmax(logits):
    return tempered_softmax(logits, 1.0)


def log_softmax(logits, tau=1.0):
    logits = as_tensor(logits)
    tau_arr = _check_tau(tau)
    z = logits.data / tau_arr
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    probs = np.exp(out)

    def backward(g):
        gz = g - probs * g.sum(axis=-1, keepdims=True)
        return (_unbroadcast(gz / tau_arr, logits.shape),)

    return Tensor._make(out, (logits,), "log_softmax", backward)


def cross_entropy(logits, targets, reduction: str = "mean"):
    """Softmax cross-entropy of ``logits`` [n x C] against class indices.

    ``reduction="none"`` returns the per-sample vector.
    """
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy expects [n x C] logits, got {logits.shape}")
    n, C = logits.shape
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != n:
        raise DimensionError(f"{n} logit rows but {targets.shape[0]} targets")
    if n and (targets.min() < 0 or targets.max() >= C):
        bad = int(targets[(targets < 0) | (targets >= C)][0])
        raise IndexError(f"target index {bad} out of range for {C} classes")
    x = logits.data
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lse = np.log(np.exp(z).sum(axis=-1))
    rows = np.arange(n)
    per_sample = lse - z[rows, targets]
    probs = np.exp(z - lse[:, None])

    def backward(g):
        grad = probs.copy()
        grad[rows, targets] -= 1.0
        return (grad * g[:, None],)

    out = Tensor._make(per_sample, (logits,), "cross_entropy", backward)
    if reduction == "none":
        return out
    if reduction == "mean":
        return mean(out)
    raise ValueError(f"unknown reduction {reduction!r}")


def check_distribution(p, what: str = "probability rows", tol: float = ROW_TOL):
    arr = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    if arr.size == 0:
        raise ValidationError(f"{what}: empty input")
    if not np.all(np.isfinite(arr)) or arr.min() < 0:
        raise ValidationError(f"{what}: entries must be finite and non-negative")
    dev = np.abs(arr.sum(axis=-1) - 1.0).max()
    if dev > tol:
        raise ValidationError(f"{what}: rows must sum to 1 (max deviation {dev:.3g})")
    return arr


def kl_divergence(p_teacher, p_student, reduction: str = "mean"):
    """KL(teacher || student) per row, teacher side treated as a constant."""
    pt = check_distribution(p_teacher, "teacher distribution")
    student = as_tensor(p_student)
    ps = check_distribution(student, "student distribution")
    if pt.shape != ps.shape:
        raise DimensionError(f"kl_divergence shape mismatch: {pt.shape} vs {ps.shape}")
    ps_c = np.maximum(ps, EPS)
    log_ratio = np.log(np.maximum(pt, EPS)) - np.log(ps_c)
    per_row = (pt * log_ratio).sum(axis=-1)
    live = ps > EPS

    def backward(g):
        return (np.where(live, -pt / ps_c, 0.0) * np.expand_dims(g, -1),)

    out = Tensor._make(np.asarray(per_row), (student,), "kl_divergence", backward)
    if reduction == "none":
        return out
    if reduction == "mean":
        return mean(out)
    raise ValueError(f"unknown reduction {reduction!r}")


def entropy(p) -> np.ndarray:
    """Shannon entropy (nats) of each row; plain values, no graph."""
    arr = check_distribution(p)
    return -(arr * np.log(np.maximum(arr, EPS))).sum(axis=-1)
