"""
Minimal reverse-mode differentiation on dense numpy arrays (rank <= 2).

Operations record themselves on the innermost active ``Tape``; outside a
tape they only compute values, which is what inference uses. A tape is
replayed once, in reverse creation order, by ``Tape.backward``.
"""
import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from logger import setup_logger

logger = setup_logger("autodiff")

_DTYPE = [np.float64]
_TAPES = []


class TapeError(RuntimeError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


def set_default_dtype(name):
    if name not in ("float32", "float64"):
        raise ValueError(f"dtype must be float32 or float64, got {name}")
    _DTYPE[0] = np.dtype(name).type


def default_dtype():
    return _DTYPE[0]


class Tape:
    def __init__(self):
        self.nodes = []
        self._replayed = False

    def __enter__(self):
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False

    def record(self, node):
        self.nodes.append(node)

    def reset(self):
        self.nodes = []
        self._replayed = False

    def backward(self, loss):
        if self._replayed:
            raise TapeError("backward() already ran on this tape; reset() it before reuse")
        if loss.value.size != 1:
            raise TapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
        self._replayed = True
        if not loss.requires_grad:
            return
        loss.grad = np.ones_like(loss.value)
        for node in reversed(self.nodes):
            if node.grad is not None and node._backward is not None:
                node._backward(node.grad)


class no_grad:
    """Suspend recording, e.g. for target-network forward passes inside a tape."""

    def __enter__(self):
        _TAPES.append(None)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


def _active_tape():
    return _TAPES[-1] if _TAPES else None


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, name=None):
        value = np.asarray(value, dtype=_DTYPE[0])
        if value.ndim > 2:
            raise ValueError(f"Tensors are limited to rank 2, got shape {value.shape}")
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, grad):
        if not self.requires_grad:
            return
        grad = _unbroadcast(np.asarray(grad, dtype=self.value.dtype), self.value.shape)
        self.grad = grad if self.grad is None else self.grad + grad

    def numpy(self):
        return self.value

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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(value, parents, backward):
    out = Tensor(value)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        tape.record(out)
    return out


# ─────────────────────────────────────────────────────────────────────────────
# Forward ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.value + b.value
    except ValueError as e:
        raise ValueError(f"add: incompatible shapes {a.shape} and {b.shape}") from e

    def backward(g):
        a.accumulate(g)
        b.accumulate(g)
    return _result(value, (a, b), backward)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.value - b.value
    except ValueError as e:
        raise ValueError(f"sub: incompatible shapes {a.shape} and {b.shape}") from e

    def backward(g):
        a.accumulate(g)
        b.accumulate(-g)
    return _result(value, (a, b), backward)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    try:
        value = a.value * b.value
    except ValueError as e:
        raise ValueError(f"mul: incompatible shapes {a.shape} and {b.shape}") from e

    def backward(g):
        a.accumulate(g * b.value)
        b.accumulate(g * a.value)
    return _result(value, (a, b), backward)


def scale(a, c):
    a = as_tensor(a)

    def backward(g):
        a.accumulate(g * c)
    return _result(a.value * c, (a,), backward)


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")

    def backward(g):
        a.accumulate(g @ b.value.T)
        b.accumulate(a.value.T @ g)
    return _result(a.value @ b.value, (a, b), backward)


def spmm(A, x):
    """Constant (sparse or dense) matrix times tensor: the graph propagation product."""
    x = as_tensor(x)
    if A.shape[1] != x.shape[0]:
        raise ValueError(f"spmm: incompatible shapes {A.shape} and {x.shape}")
    A_T = A.T

    def backward(g):
        x.accumulate(np.asarray(A_T @ g))
    value = A @ x.value
    if sp.issparse(value):
        value = value.toarray()
    return _result(np.asarray(value), (x,), backward)


def sigmoid(x):
    x = as_tensor(x)
    s = expit(x.value)

    def backward(g):
        x.accumulate(g * s * (1.0 - s))
    return _result(s, (x,), backward)


def relu(x):
    x = as_tensor(x)
    mask = x.value > 0

    def backward(g):
        x.accumulate(g * mask)
    return _result(np.where(mask, x.value, 0.0), (x,), backward)


def cos(x):
    x = as_tensor(x)

    def backward(g):
        x.accumulate(-g * np.sin(x.value))
    return _result(np.cos(x.value), (x,), backward)


def huber(x, threshold=1.0):
    """0.5 x^2 for |x| <= threshold, threshold * (|x| - 0.5 threshold) beyond."""
    if threshold <= 0:
        raise ValueError("huber threshold must be positive")
    x = as_tensor(x)
    abs_x = np.abs(x.value)
    quadratic = abs_x <= threshold
    value = np.where(quadratic, 0.5 * x.value ** 2, threshold * (abs_x - 0.5 * threshold))

    def backward(g):
        x.accumulate(g * np.where(quadratic, x.value, threshold * np.sign(x.value)))
    return _result(value, (x,), backward)


def sum(x, axis=None):  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    value = x.value.sum() if axis is None else x.value.sum(axis=axis, keepdims=True)

    def backward(g):
        x.accumulate(np.broadcast_to(g, x.value.shape))
    return _result(value, (x,), backward)


def mean(x, axis=None):
    x = as_tensor(x)
    count = x.value.size if axis is None else x.value.shape[axis]
    return scale(sum(x, axis), 1.0 / max(count, 1))


def softmax(x, temperature=1.0, axis=-1):
    """exp(x / T) normalized along ``axis``."""
    if temperature <= 0:
        raise ValueError("softmax temperature must be positive")
    x = as_tensor(x)
    z = x.value / temperature
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        x.accumulate(y * (g - (g * y).sum(axis=axis, keepdims=True)) / temperature)
    return _result(y, (x,), backward)


def take_rows(x, index):
    x = as_tensor(x)
    index = np.asarray(index, dtype=int)

    def backward(g):
        full = np.zeros_like(x.value)
        np.add.at(full, index, g)
        x.accumulate(full)
    return _result(x.value[index], (x,), backward)


def pick(x, columns):
    """Row-wise selection x[i, columns[i]] as an (n, 1) column."""
    x = as_tensor(x)
    columns = np.asarray(columns, dtype=int)
    rows = np.arange(x.shape[0])

    def backward(g):
        full = np.zeros_like(x.value)
        np.add.at(full, (rows, columns), g.reshape(-1))
        x.accumulate(full)
    return _result(x.value[rows, columns].reshape(-1, 1), (x,), backward)


def concat_rows(tensors):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[0] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            t.accumulate(g[lo:hi])
    return _result(np.concatenate([t.value for t in tensors], axis=0), tuple(tensors), backward)


def group_mean(x, group_size):
    """Average consecutive blocks of ``group_size`` rows: (n*k, m) -> (n, m)."""
    x = as_tensor(x)
    n_rows, n_cols = x.shape
    if n_rows % group_size:
        raise ValueError(f"group_mean: {n_rows} rows do not split into groups of {group_size}")
    value = x.value.reshape(n_rows // group_size, group_size, n_cols).mean(axis=1)

    def backward(g):
        x.accumulate(np.repeat(g, group_size, axis=0) / group_size)
    return _result(value, (x,), backward)


# ─────────────────────────────────────────────────────────────────────────────
# Parameters and optimizers

class ParamStore:
    """Named trainable tensors plus optimizer state."""

    def __init__(self, arrays=None):
        self.params = {}
        self.opt_state = {"t": 0, "m": {}, "v": {}}
        for name, value in (arrays or {}).items():
            self.add(name, value)

    def add(self, name, value):
        if name in self.params:
            raise ValueError(f"Duplicate parameter name {name}")
        self.params[name] = Tensor(np.array(value, dtype=_DTYPE[0]), requires_grad=True, name=name)
        return self.params[name]

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def names(self):
        return list(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for p in self.params.values():
            p.grad = np.zeros_like(p.value)

    def n_parameters(self):
        return int(np.sum([p.value.size for p in self.params.values()]))

    def state_dict(self):
        return {name: p.value.copy() for name, p in self.params.items()}

    def load_state_dict(self, arrays):
        missing = set(self.params) - set(arrays)
        if missing:
            raise ValueError(f"Missing parameters: {sorted(missing)}")
        for name, value in arrays.items():
            if name not in self.params:
                raise ValueError(f"Unknown parameter {name}")
            value = np.asarray(value, dtype=self.params[name].value.dtype)
            if value.shape != self.params[name].shape:
                raise ValueError(f"Shape mismatch for {name}: {value.shape} vs {self.params[name].shape}")
            self.params[name].value = value.copy()

    def copy(self):
        clone = ParamStore(self.state_dict())
        return clone


def backward(tape, loss, params):
    """Populate ``params`` gradients from ``loss``; unreachable parameters keep zero."""
    params.zero_grad()
    tape.backward(loss)


def _gradients(params):
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.value)
        if not np.all(np.isfinite(g)):
            logger.error(f"Non-finite gradient in parameter {name}; optimizer step aborted.")
            raise NonFiniteGradientError(f"Non-finite gradient in parameter {name}")
        grads[name] = g
    return grads


def clip_gradients(params, max_norm):
    """Rescale gradients in place so their global L2 norm is at most ``max_norm``."""
    grads = _gradients(params)
    norm = float(np.sqrt(np.sum([np.sum(g * g) for g in grads.values()])))
    if max_norm and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for name, p in params.items():
            p.grad = grads[name] * factor
    return norm


def sgd_step(params, lr):
    grads = _gradients(params)
    for name, p in params.items():
        p.value = p.value - lr * grads[name]


def adam_step(params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    grads = _gradients(params)
    state = params.opt_state
    state["t"] += 1
    t = state["t"]
    for name, p in params.items():
        g = grads[name]
        m = state["m"].get(name, np.zeros_like(g))
        v = state["v"].get(name, np.zeros_like(g))
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state["m"][name], state["v"][name] = m, v
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + eps)


def numeric_gradient(fn, tensor, eps=1e-5):
    """Central finite differences of scalar ``fn()`` with respect to ``tensor.value``."""
    grad = np.zeros_like(tensor.value)
    flat = tensor.value.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + eps
        plus = float(fn().value)
        flat[i] = original - eps
        minus = float(fn().value)
        flat[i] = original
        grad.reshape(-1)[i] = (plus - minus) / (2 * eps)
    return grad
