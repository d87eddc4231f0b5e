"""Dense tensors with reverse-mode gradients for the denoiser graph.

This is a deliberately small tape: it covers exactly the operations the
denoiser and its loss need (affine maps, concatenation, residual adds,
layer normalization, masked softmax attention, GELU/ReLU feedforward,
squared-error reduction).  It is not a general autodiff system.

Data is never mutated in place; every operation returns a new tensor.
Gradients accumulate on leaves after calling :func:`backward` on a scalar.
"""
from __future__ import annotations

import numpy as np

from .exceptions import NumericError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # Arithmetic sugar; everything routes through the module-level ops.
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _coerce(a, b):
    """Wrap operands, keeping Python-number scalars in the tensor's dtype.

    Without this a bare float would become a float64 array and silently
    upcast float32 graphs.
    """
    if isinstance(a, Tensor) and isinstance(b, (int, float)) and a.data.dtype.kind == "f":
        return a, Tensor(np.asarray(b, dtype=a.data.dtype))
    if isinstance(b, Tensor) and isinstance(a, (int, float)) and b.data.dtype.kind == "f":
        return Tensor(np.asarray(a, dtype=b.data.dtype)), b
    return as_tensor(a), as_tensor(b)


def _result(data, parents, backward_fn):
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, _parents=parents, _backward=backward_fn)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _accumulate(t: Tensor, g: np.ndarray):
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def backward(loss: Tensor):
    """Reverse-mode sweep from a scalar loss; fills ``.grad`` on leaves.

    A loss that does not depend on any gradient-tracked tensor is legal
    (gradients are simply zero everywhere); a non-scalar loss is not.
    """
    if not isinstance(loss, Tensor):
        raise NumericError("backward expects a Tensor produced by this graph")
    if loss.data.shape != ():
        raise NumericError(f"backward expects a scalar, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    order = []
    visited = set()
    stack = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))

    loss.grad = np.ones((), dtype=loss.data.dtype)
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# primitive operations


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.data.shape))

    return _result(out_data, (a, b), bwd)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out_data = a.data - b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.data.shape))

    return _result(out_data, (a, b), bwd)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return _result(out_data, (a, b), bwd)


def matmul(a, b) -> Tensor:
    """Matrix product with leading batch dimensions on either operand."""
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            _accumulate(a, _unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            _accumulate(b, _unbroadcast(gb, b.data.shape))

    return _result(out_data, (a, b), bwd)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g.reshape(a.data.shape))

    return _result(out_data, (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    out_data = np.transpose(a.data, axes)
    inverse = np.argsort(axes)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, np.transpose(g, inverse))

    return _result(out_data, (a,), bwd)


def concat(a, b, axis=-1) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = np.concatenate([a.data, b.data], axis=axis)
    split_at = a.data.shape[axis]

    def bwd(g):
        ga, gb = np.split(g, [split_at], axis=axis)
        if a.requires_grad:
            _accumulate(a, ga)
        if b.requires_grad:
            _accumulate(b, gb)

    return _result(out_data, (a, b), bwd)


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if not a.requires_grad:
            return
        if axis is None:
            _accumulate(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.data.shape).copy())

    return _result(out_data, (a,), bwd)


def embedding(table, ids) -> Tensor:
    """Row lookup ``table[ids]`` with scatter-add gradient into the table."""
    table = as_tensor(table)
    ids = np.asarray(ids)
    out_data = table.data[ids]

    def bwd(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[-1]))
            _accumulate(table, gt)

    return _result(out_data, (table,), bwd)


def relu(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0)

    def bwd(g):
        if a.requires_grad:
            _accumulate(a, g * (a.data > 0))

    return _result(out_data, (a,), bwd)


_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(a) -> Tensor:
    """GELU in its tanh form; smooth, with a closed-form derivative."""
    a = as_tensor(a)
    x = a.data
    inner = _GELU_C * (x + _GELU_A * x**3)
    th = np.tanh(inner)
    out_data = 0.5 * x * (1.0 + th)

    def bwd(g):
        if a.requires_grad:
            sech2 = 1.0 - th * th
            local = 0.5 * (1.0 + th) + 0.5 * x * sech2 * _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
            _accumulate(a, g * local)

    return _result(out_data, (a,), bwd)


def layer_norm(a, scale, shift, eps=1e-12) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine.

    The tiny eps keeps the pre-affine output variance within 1e-6 of one
    for non-degenerate inputs while still guarding the zero-variance case.
    """
    a, scale, shift = as_tensor(a), as_tensor(scale), as_tensor(shift)
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out_data = y * scale.data + shift.data

    def bwd(g):
        if shift.requires_grad:
            _accumulate(shift, _unbroadcast(g, shift.data.shape))
        if scale.requires_grad:
            _accumulate(scale, _unbroadcast(g * y, scale.data.shape))
        if a.requires_grad:
            dy = g * scale.data
            m1 = dy.mean(axis=-1, keepdims=True)
            m2 = (dy * y).mean(axis=-1, keepdims=True)
            _accumulate(a, inv * (dy - m1 - y * m2))

    return _result(out_data, (a, scale, shift), bwd)


def masked_softmax(logits, key_mask) -> Tensor:
    """Softmax over the last axis with masked keys excluded.

    ``key_mask`` broadcasts against ``logits``; masked entries get -inf
    logits before the softmax, so their probability (and gradient) is
    exactly zero.  Every row must keep at least one valid key.
    """
    logits = as_tensor(logits)
    key_mask = np.broadcast_to(np.asarray(key_mask, dtype=bool), logits.data.shape)
    z = np.where(key_mask, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    p = np.exp(z)
    p = p / p.sum(axis=-1, keepdims=True)

    def bwd(g):
        if logits.requires_grad:
            dot = (g * p).sum(axis=-1, keepdims=True)
            _accumulate(logits, (g - dot) * p)

    return _result(p, (logits,), bwd)


# ---------------------------------------------------------------------------
# parameter container


class ParameterStore:
    """Named, lexicographically ordered map of gradient-tracked tensors."""

    def __init__(self, params: dict):
        self._params = {name: params[name] for name in sorted(params)}
        for name, t in self._params.items():
            if not isinstance(t, Tensor):
                raise TypeError(f"parameter {name!r} is not a Tensor")

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self):
        return len(self._params)

    def __iter__(self):
        return iter(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def arrays(self) -> dict:
        return {name: t.data for name, t in self._params.items()}

    def num_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    @classmethod
    def from_arrays(cls, arrays: dict) -> "ParameterStore":
        return cls({name: Tensor(a, requires_grad=True) for name, a in arrays.items()})

    def replace(self, arrays: dict) -> "ParameterStore":
        """New store with the given arrays substituted (shapes must match)."""
        out = dict(self._params)
        for name, arr in arrays.items():
            if name not in out:
                raise KeyError(f"unknown parameter {name!r}")
            if out[name].data.shape != np.asarray(arr).shape:
                raise ValueError(f"shape mismatch for parameter {name!r}")
            out[name] = Tensor(arr, requires_grad=True)
        return ParameterStore(out)

    def zero_grads(self):
        for t in self._params.values():
            t.grad = None


def collect_grads(loss: Tensor, params: ParameterStore) -> dict:
    """Run backward from ``loss`` and return per-parameter gradient arrays.

    Parameters the loss never touched get explicit zero gradients.
    """
    params.zero_grads()
    backward(loss)
    grads = {}
    for name, t in params.items():
        if t.grad is None:
            grads[name] = np.zeros_like(t.data)
        else:
            grads[name] = t.grad
        if not np.all(np.isfinite(grads[name])):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
    return grads
