"""Reverse-mode automatic differentiation over dense float64 arrays.

A Tensor wraps a numpy array and remembers which primitive produced it.
Calling backward() on a scalar loss topologically sorts the graph and
accumulates gradients into every tensor created with requires_grad=True.
Ops on tensors that do not require gradients return plain constants, so
constant subgraphs cost nothing at backward time.

Everything is float64: level-set comparisons downstream are tolerance
sensitive and float32 drift is large enough to flip them.
"""

import itertools

import numpy as np

from .errors import ContractViolation, NumericFault

_uid_counter = itertools.count()

_grad_enabled = True


class no_grad:
    """Inside this context ops build no graph and track no gradients.

    Read-only evaluations (level-set volumes, indicator masks, frozen
    plants) otherwise leave reference cycles behind for the gc.
    """

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _unbroadcast(grad, shape):
    """Sum gradient over axes introduced or stretched by broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _sigmoid(x):
    # piecewise form avoids overflow in exp for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op", "_uid")

    def __init__(self, data, requires_grad=False, _parents=(), _op="leaf"):
        if not _grad_enabled:
            requires_grad = False
            _parents = ()
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = None
        self._op = _op
        self._uid = next(_uid_counter)

    # ------------------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(np.asarray(self.data).item())

    def detach(self):
        return Tensor(self.data, requires_grad=False, _op="detach")

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self._op}, grad={self.requires_grad})"

    # ------------------------------------------------------------------
    def backward(self):
        """Accumulate d(self)/d(leaf) into .grad of every trainable leaf.

        Grads of all tensors reachable from self are reset first, so each
        backward call yields fresh gradients.  The graph is torn down
        afterwards (each node's closure references its output, a cycle
        the refcounter can't free on its own), so a root can only be
        backpropagated once.
        """
        if self.data.size != 1:
            raise ContractViolation(f"backward needs a scalar loss, got shape {self.data.shape}")
        if self._op == "released":
            raise ContractViolation("backward already ran on this graph")
        if not np.isfinite(self.data):
            op, uid = _first_nonfinite(self)
            raise NumericFault(f"non-finite loss; first produced by op '{op}' (node {uid})")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        for node in topo:
            node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward()
        for node in topo:
            if node._parents:
                node._backward = None
                node._parents = ()
                node._op = "released"

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, p):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    def __abs__(self):
        return absolute(self)

    # -- method aliases --------------------------------------------------
    def tanh(self):
        return tanh(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def softplus(self):
        return softplus(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def square(self):
        return square(self)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean_(self, axis)

    def max(self, axis=None):
        return max_(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self):
        return transpose(self)

    @property
    def T(self):
        return transpose(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _first_nonfinite(root):
    """Walk the whole graph and name the earliest-created bad node."""
    seen = set()
    stack = [root]
    worst = (None, None)
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        if not np.all(np.isfinite(node.data)):
            if worst[1] is None or node._uid < worst[1]:
                worst = (node._op, node._uid)
        stack.extend(node._parents)
    return worst if worst[0] is not None else ("unknown", -1)


# ----------------------------------------------------------------------
# primitives


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad, (a, b), "add")
    if out.requires_grad:
        def _bwd():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(out.grad, b.data.shape)
        out._backward = _bwd
    return out


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad, (a, b), "mul")
    if out.requires_grad:
        def _bwd():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad * b.data, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(out.grad * a.data, b.data.shape)
        out._backward = _bwd
    return out


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    out = Tensor(a.data / b.data, a.requires_grad or b.requires_grad, (a, b), "div")
    if out.requires_grad:
        def _bwd():
            if a.requires_grad:
                a.grad += _unbroadcast(out.grad / b.data, a.data.shape)
            if b.requires_grad:
                b.grad += _unbroadcast(-out.grad * a.data / (b.data * b.data), b.data.shape)
        out._backward = _bwd
    return out


def power(a, p):
    a = as_tensor(a)
    if isinstance(p, Tensor):
        raise ContractViolation("power supports scalar exponents only")
    out = Tensor(a.data ** p, a.requires_grad, (a,), f"pow{p}")
    if out.requires_grad:
        def _bwd():
            a.grad += out.grad * p * a.data ** (p - 1)
        out._backward = _bwd
    return out


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ContractViolation("matmul expects 2-D operands")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad, (a, b), "matmul")
    if out.requires_grad:
        def _bwd():
            if a.requires_grad:
                a.grad += out.grad @ b.data.T
            if b.requires_grad:
                b.grad += a.data.T @ out.grad
        out._backward = _bwd
    return out


def affine(x, w, b):
    """Fused x @ w + b. One graph node instead of two."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ContractViolation("affine expects 2-D x and w")
    out = Tensor(x.data @ w.data + b.data,
                 x.requires_grad or w.requires_grad or b.requires_grad,
                 (x, w, b), "affine")
    if out.requires_grad:
        def _bwd():
            if x.requires_grad:
                x.grad += out.grad @ w.data.T
            if w.requires_grad:
                w.grad += x.data.T @ out.grad
            if b.requires_grad:
                b.grad += _unbroadcast(out.grad, b.data.shape)
        out._backward = _bwd
    return out


def exp(a):
    a = as_tensor(a)
    out = Tensor(np.exp(a.data), a.requires_grad, (a,), "exp")
    if out.requires_grad:
        od = out.data
        def _bwd():
            a.grad += out.grad * od
        out._backward = _bwd
    return out


def log(a):
    a = as_tensor(a)
    out = Tensor(np.log(a.data), a.requires_grad, (a,), "log")
    if out.requires_grad:
        def _bwd():
            a.grad += out.grad / a.data
        out._backward = _bwd
    return out


def sqrt(a):
    a = as_tensor(a)
    out = Tensor(np.sqrt(a.data), a.requires_grad, (a,), "sqrt")
    if out.requires_grad:
        od = out.data
        def _bwd():
            a.grad += out.grad * 0.5 / od
        out._backward = _bwd
    return out


def square(a):
    a = as_tensor(a)
    out = Tensor(a.data * a.data, a.requires_grad, (a,), "square")
    if out.requires_grad:
        def _bwd():
            a.grad += out.grad * 2.0 * a.data
        out._backward = _bwd
    return out


def tanh(a):
    a = as_tensor(a)
    out = Tensor(np.tanh(a.data), a.requires_grad, (a,), "tanh")
    if out.requires_grad:
        od = out.data
        def _bwd():
            a.grad += out.grad * (1.0 - od * od)
        out._backward = _bwd
    return out


def sigmoid(a):
    a = as_tensor(a)
    out = Tensor(_sigmoid(a.data), a.requires_grad, (a,), "sigmoid")
    if out.requires_grad:
        od = out.data
        def _bwd():
            a.grad += out.grad * od * (1.0 - od)
        out._backward = _bwd
    return out


def softplus(a):
    a = as_tensor(a)
    out = Tensor(np.logaddexp(0.0, a.data), a.requires_grad, (a,), "softplus")
    if out.requires_grad:
        def _bwd():
            a.grad += out.grad * _sigmoid(a.data)
        out._backward = _bwd
    return out


def relu(a):
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0), a.requires_grad, (a,), "relu")
    if out.requires_grad:
        def _bwd():
            a.grad += out.grad * (a.data > 0.0)
        out._backward = _bwd
    return out


def absolute(a):
    a = as_tensor(a)
    out = Tensor(np.abs(a.data), a.requires_grad, (a,), "abs")
    if out.requires_grad:
        def _bwd():
            a.grad += out.grad * np.sign(a.data)
        out._backward = _bwd
    return out


def sum_(a, axis=None):
    a = as_tensor(a)
    out = Tensor(a.data.sum(axis=axis), a.requires_grad, (a,), "sum")
    if out.requires_grad:
        def _bwd():
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            a.grad += np.broadcast_to(g, a.data.shape)
        out._backward = _bwd
    return out


def mean_(a, axis=None):
    a = as_tensor(a)
    out = Tensor(a.data.mean(axis=axis), a.requires_grad, (a,), "mean")
    if out.requires_grad:
        n = a.data.size if axis is None else a.data.shape[axis]
        def _bwd():
            g = out.grad
            if axis is not None:
                g = np.expand_dims(g, axis)
            a.grad += np.broadcast_to(g, a.data.shape) / n
        out._backward = _bwd
    return out


def max_(a, axis=None):
    """Max-reduce. Gradient flows to the first (lowest-index) argmax only,
    so backprop through vertex maxima is deterministic under ties."""
    a = as_tensor(a)
    out = Tensor(a.data.max(axis=axis), a.requires_grad, (a,), "max")
    if out.requires_grad:
        if axis is None:
            idx = np.unravel_index(np.argmax(a.data), a.data.shape)
            def _bwd():
                a.grad[idx] += out.grad
        else:
            amax = np.argmax(a.data, axis=axis)
            def _bwd():
                g = np.expand_dims(out.grad, axis)
                scatter = np.zeros_like(a.data)
                np.put_along_axis(scatter, np.expand_dims(amax, axis), g, axis)
                a.grad += scatter
        out._backward = _bwd
    return out


def reshape(a, shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    out = Tensor(a.data.reshape(shape), a.requires_grad, (a,), "reshape")
    if out.requires_grad:
        def _bwd():
            a.grad += out.grad.reshape(a.data.shape)
        out._backward = _bwd
    return out


def transpose(a):
    a = as_tensor(a)
    out = Tensor(a.data.T, a.requires_grad, (a,), "transpose")
    if out.requires_grad:
        def _bwd():
            a.grad += out.grad.T
        out._backward = _bwd
    return out


def take(a, idx):
    a = as_tensor(a)
    out = Tensor(a.data[idx], a.requires_grad, (a,), "slice")
    if out.requires_grad:
        def _bwd():
            np.add.at(a.grad, idx, out.grad)
        out._backward = _bwd
    return out


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 any(t.requires_grad for t in tensors), tuple(tensors), "concat")
    if out.requires_grad:
        sizes = np.cumsum([t.data.shape[axis] for t in tensors])[:-1]
        def _bwd():
            pieces = np.split(out.grad, sizes, axis=axis)
            for t, g in zip(tensors, pieces):
                if t.requires_grad:
                    t.grad += g
        out._backward = _bwd
    return out
