"""
Dense tensors with reverse-mode differentiation.

Every op records a closure that pushes its output gradient back to its inputs; `backward`
walks the recorded graph in reverse topological order. Values live in numpy arrays
(float32 for training, float64 when checking gradients against finite differences).
"""

import contextlib
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from app.errors import DataError, NumericError, ShapeError

BCE_CLAMP = 1e-7
GELU_COEF = 0.044715
GELU_SCALE = float(np.sqrt(2.0 / np.pi))

_mode = {"grad_enabled": True, "dtype": np.float32, "checked": False}


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    previous = _mode["grad_enabled"]
    _mode["grad_enabled"] = False
    try:
        yield
    finally:
        _mode["grad_enabled"] = previous


@contextlib.contextmanager
def default_dtype(dtype):
    """Create fresh tensors with `dtype` inside the block (np.float64 for gradient checks)."""
    previous = _mode["dtype"]
    _mode["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _mode["dtype"] = previous


@contextlib.contextmanager
def checked(enabled=True):
    """Reject non-finite op inputs inside the block."""
    previous = _mode["checked"]
    _mode["checked"] = enabled
    try:
        yield
    finally:
        _mode["checked"] = previous


def is_grad_enabled():
    return _mode["grad_enabled"]


class Tensor:
    """
    An n-dimensional array that remembers how it was computed.

    Args:
        data: Array-like values. Float arrays keep their dtype; anything else is cast to the
            current default dtype.
        requires_grad (bool): Whether gradients should be accumulated into `grad`.
        name (str): Optional label, used by parameter containers and error messages.
    """

    def __init__(self, data, requires_grad=False, name=None):
        if isinstance(data, Tensor):
            data = data.data
        array = np.asarray(data)
        if not np.issubdtype(array.dtype, np.floating):
            array = array.astype(_mode["dtype"])
        self.data = array
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0])

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data, requires_grad=False, name=self.name)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __repr__(self):
        label = f" name={self.name}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op}{label})"

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
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_tensor(self, index)

    def sum(self, axis=None, keepdims=False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


@dataclass
class Node:
    op: str
    inputs: tuple
    output: int
    saved: tuple = field(default_factory=tuple)


@dataclass
class Graph:
    """Recorded ops reachable from a tensor, inputs before outputs."""

    nodes: list

    def __len__(self):
        return len(self.nodes)

    def ops(self):
        return [node.op for node in self.nodes]


def _as_tensor(value, like=None):
    if isinstance(value, Tensor):
        return value
    dtype = like.data.dtype if like is not None else _mode["dtype"]
    return Tensor(np.asarray(value, dtype=dtype))


def _check_inputs(op, *tensors):
    if not _mode["checked"]:
        return
    for t in tensors:
        if np.issubdtype(t.data.dtype, np.floating) and not np.all(np.isfinite(t.data)):
            raise NumericError(f"{op}: non-finite input of shape {t.shape}")


def _result(data, parents, op, backward_fn):
    needs_grad = _mode["grad_enabled"] and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs_grad)
    if needs_grad:
        out._op = op
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._op = op
    return out


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if grad.shape != tensor.shape:
        raise ShapeError("accumulate", tensor.shape, grad.shape)
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=tensor.data.dtype, copy=True)
    else:
        tensor.grad += grad


def _unbroadcast(grad, shape):
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# --- elementwise -----------------------------------------------------------------------


def add(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _broadcast_shape("add", a, b)
    _check_inputs("add", a, b)

    def backward_fn(grad):
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(grad, b.shape))

    return _result(a.data + b.data, (a, b), "add", backward_fn)


def sub(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _broadcast_shape("sub", a, b)
    _check_inputs("sub", a, b)

    def backward_fn(grad):
        _accumulate(a, _unbroadcast(grad, a.shape))
        _accumulate(b, _unbroadcast(-grad, b.shape))

    return _result(a.data - b.data, (a, b), "sub", backward_fn)


def mul(a, b):
    a = _as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = _as_tensor(b, like=a)
    _broadcast_shape("mul", a, b)
    _check_inputs("mul", a, b)

    def backward_fn(grad):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(grad * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(grad * a.data, b.shape))

    return _result(a.data * b.data, (a, b), "mul", backward_fn)


def scale(x, factor):
    """Multiply by a Python scalar."""
    x = _as_tensor(x)
    _check_inputs("scale", x)
    factor = float(factor)

    def backward_fn(grad):
        _accumulate(x, grad * factor)

    return _result(x.data * factor, (x,), "scale", backward_fn)


def relu(x):
    _check_inputs("relu", x)
    positive = x.data > 0

    def backward_fn(grad):
        _accumulate(x, grad * positive)

    return _result(x.data * positive, (x,), "relu", backward_fn)


def gelu(x):
    """GELU, tanh approximation."""
    _check_inputs("gelu", x)
    v = x.data
    inner = GELU_SCALE * (v + GELU_COEF * v**3)
    t = np.tanh(inner)
    out = 0.5 * v * (1.0 + t)

    def backward_fn(grad):
        d_inner = GELU_SCALE * (1.0 + 3.0 * GELU_COEF * v**2)
        local = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t**2) * d_inner
        _accumulate(x, grad * local)

    return _result(out, (x,), "gelu", backward_fn)


def sigmoid(x):
    _check_inputs("sigmoid", x)
    out = special.expit(x.data)

    def backward_fn(grad):
        _accumulate(x, grad * out * (1.0 - out))

    return _result(out, (x,), "sigmoid", backward_fn)


def masked_fill(x, mask, value):
    """Replace entries where `mask` is True with `value`; masked entries receive no gradient."""
    mask = np.asarray(mask, dtype=bool)
    try:
        np.broadcast_shapes(x.shape, mask.shape)
    except ValueError:
        raise ShapeError("masked_fill", x.shape, mask.shape) from None
    _check_inputs("masked_fill", x)
    keep = ~mask

    def backward_fn(grad):
        _accumulate(x, _unbroadcast(grad * keep, x.shape))

    out = np.where(mask, np.asarray(value, dtype=x.data.dtype), x.data)
    return _result(out, (x,), "masked_fill", backward_fn)


def dropout(x, rate, rng, training=True):
    """Inverted dropout; `rng` is a numpy Generator so runs are reproducible."""
    if not training or rate <= 0.0:
        return x
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)

    def backward_fn(grad):
        _accumulate(x, grad * keep)

    return _result(x.data * keep, (x,), "dropout", backward_fn)


# --- shape ops -------------------------------------------------------------------------


def reshape(x, shape):
    original = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", original, shape) from None

    def backward_fn(grad):
        _accumulate(x, grad.reshape(original))

    return _result(out, (x,), "reshape", backward_fn)


def transpose(x, axes=None):
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ShapeError("transpose", x.shape, axes, "axes must permute every dimension")
    inverse = tuple(np.argsort(axes))

    def backward_fn(grad):
        _accumulate(x, grad.transpose(inverse))

    return _result(x.data.transpose(axes), (x,), "transpose", backward_fn)


def slice_tensor(x, index):
    out = x.data[index]

    def backward_fn(grad):
        full = np.zeros_like(x.data)
        np.add.at(full, index, grad)
        _accumulate(x, full)

    return _result(np.array(out, copy=True), (x,), "slice", backward_fn)


def concat(tensors, axis=0):
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    reference = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != len(reference) or any(
            t.shape[d] != reference[d] for d in range(t.ndim) if d != axis % t.ndim
        ):
            raise ShapeError("concat", reference, t.shape)
    _check_inputs("concat", *tensors)
    sizes = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward_fn(grad):
        for t, piece in zip(tensors, np.split(grad, sizes, axis=axis)):
            _accumulate(t, piece)

    out = np.concatenate([t.data for t in tensors], axis=axis)
    return _result(out, tuple(tensors), "concat", backward_fn)


# --- reductions ------------------------------------------------------------------------


def tensor_sum(x, axis=None, keepdims=False):
    def backward_fn(grad):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        _accumulate(x, np.broadcast_to(grad, x.shape).astype(x.data.dtype))

    return _result(np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), "sum", backward_fn)


def tensor_mean(x, axis=None, keepdims=False):
    count = x.data.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return scale(tensor_sum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


# --- linear algebra --------------------------------------------------------------------


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading dimensions."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    _check_inputs("matmul", a, b)

    def backward_fn(grad):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(grad @ np.swapaxes(b.data, -1, -2), a.shape))
        if b.requires_grad:
            if b.ndim == 2:
                flat_a = a.data.reshape(-1, a.shape[-1])
                flat_g = grad.reshape(-1, grad.shape[-1])
                _accumulate(b, flat_a.T @ flat_g)
            else:
                _accumulate(b, _unbroadcast(np.swapaxes(a.data, -1, -2) @ grad, b.shape))

    return _result(a.data @ b.data, (a, b), "matmul", backward_fn)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalise over the last axis, then apply the learned gain and bias."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError("layer_norm", x.shape, gamma.shape)
    _check_inputs("layer_norm", x, gamma, beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    out = xhat * gamma.data + beta.data
    width = x.shape[-1]

    def backward_fn(grad):
        lead = tuple(range(grad.ndim - 1))
        if gamma.requires_grad:
            _accumulate(gamma, (grad * xhat).sum(axis=lead))
        if beta.requires_grad:
            _accumulate(beta, grad.sum(axis=lead))
        if x.requires_grad:
            g = grad * gamma.data
            dx = (
                width * g
                - g.sum(axis=-1, keepdims=True)
                - xhat * (g * xhat).sum(axis=-1, keepdims=True)
            ) * (rstd / width)
            _accumulate(x, dx)

    return _result(out, (x, gamma, beta), "layer_norm", backward_fn)


def softmax(x, axis=-1):
    _check_inputs("softmax", x)
    out = special.softmax(x.data, axis=axis)

    def backward_fn(grad):
        _accumulate(x, out * (grad - (grad * out).sum(axis=axis, keepdims=True)))

    return _result(out, (x,), "softmax", backward_fn)


def log_softmax(x, axis=-1):
    _check_inputs("log_softmax", x)
    out = special.log_softmax(x.data, axis=axis)

    def backward_fn(grad):
        _accumulate(x, grad - np.exp(out) * grad.sum(axis=axis, keepdims=True))

    return _result(out, (x,), "log_softmax", backward_fn)


def embedding_gather(weight, ids):
    """Rows of `weight` selected by integer `ids`; gradients scatter-add back into the rows."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError("embedding_gather", weight.shape, ids.shape, "token id out of range")
    _check_inputs("embedding_gather", weight)

    def backward_fn(grad):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), grad.reshape(-1, weight.shape[1]))
        _accumulate(weight, full)

    return _result(weight.data[ids], (weight,), "embedding_gather", backward_fn)


# --- losses ----------------------------------------------------------------------------


def cross_entropy(logits, targets, label_smoothing=0.0, ignore_index=None):
    """
    Token-mean cross-entropy against a smoothed one-hot target.

    The target distribution puts `1 - label_smoothing` on the gold id and spreads
    `label_smoothing` uniformly over the vocabulary. Positions equal to `ignore_index`
    are left out of both the sum and the count.

    Args:
        logits (Tensor): Scores of shape [..., vocab].
        targets (np.ndarray): Integer ids of shape [...].
        label_smoothing (float): Mass moved to the uniform distribution, in [0, 1).
        ignore_index (int): Target id excluded from the loss, or None.

    Returns:
        Tensor: Scalar loss.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    if not 0.0 <= label_smoothing < 1.0:
        raise ValueError(f"label_smoothing must be in [0, 1), got {label_smoothing}")
    _check_inputs("cross_entropy", logits)
    vocab = logits.shape[-1]
    valid = np.ones(targets.shape, dtype=bool) if ignore_index is None else targets != ignore_index
    count = int(valid.sum())
    if count == 0:
        raise DataError("cross_entropy: every target position is ignored")
    if targets[valid].size and (targets[valid].min() < 0 or targets[valid].max() >= vocab):
        raise ShapeError("cross_entropy", logits.shape, targets.shape, "target id out of range")

    safe = np.where(valid, targets, 0)
    logp = special.log_softmax(logits.data, axis=-1)
    nll = -np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    smooth = -logp.mean(axis=-1)
    per_token = (1.0 - label_smoothing) * nll + label_smoothing * smooth
    loss = (per_token * valid).sum() / count

    def backward_fn(grad):
        uniform = label_smoothing / vocab
        target_dist = np.full(logp.shape, uniform, dtype=logp.dtype)
        np.put_along_axis(target_dist, safe[..., None], uniform + (1.0 - label_smoothing), axis=-1)
        local = (np.exp(logp) - target_dist) * (valid[..., None] / count)
        _accumulate(logits, local * grad)

    return _result(np.asarray(loss, dtype=logits.data.dtype), (logits,), "cross_entropy", backward_fn)


def binary_cross_entropy(probabilities, labels, mask=None):
    """
    Token-mean binary cross-entropy of probabilities against 0/1 labels.

    Probabilities are clamped to [1e-7, 1 - 1e-7]; clamped entries receive no gradient.
    When the mask selects nothing the loss is zero.
    """
    labels = np.asarray(labels, dtype=probabilities.data.dtype)
    if labels.shape != probabilities.shape:
        raise ShapeError("binary_cross_entropy", probabilities.shape, labels.shape)
    mask = np.ones(labels.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != labels.shape:
        raise ShapeError("binary_cross_entropy", probabilities.shape, mask.shape)
    _check_inputs("binary_cross_entropy", probabilities)
    count = int(mask.sum())
    p = np.clip(probabilities.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (probabilities.data >= BCE_CLAMP) & (probabilities.data <= 1.0 - BCE_CLAMP)
    if count == 0:
        return _result(np.asarray(0.0, dtype=p.dtype), (probabilities,), "binary_cross_entropy",
                       lambda grad: None)
    per_token = -(labels * np.log(p) + (1.0 - labels) * np.log1p(-p))
    loss = (per_token * mask).sum() / count

    def backward_fn(grad):
        local = (p - labels) / (p * (1.0 - p)) * (mask * inside) / count
        _accumulate(probabilities, local * grad)

    return _result(np.asarray(loss, dtype=p.dtype), (probabilities,), "binary_cross_entropy", backward_fn)


# --- graph traversal -------------------------------------------------------------------


def _topological_order(root):
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def trace(loss):
    """Return the graph recorded behind `loss`, inputs before outputs."""
    nodes = [
        Node(op=t._op, inputs=tuple(id(p) for p in t._parents), output=id(t))
        for t in _topological_order(loss)
        if t._parents
    ]
    return Graph(nodes=nodes)


def backward(loss):
    """
    Accumulate d(loss)/d(leaf) into every reachable leaf that requires grad.

    The recorded graph is consumed: intermediate tensors drop their parents, closures and
    gradients afterwards.
    """
    if loss.data.size != 1:
        raise ShapeError("backward", loss.shape, (), "loss must be a scalar")
    if not loss.requires_grad:
        return
    order = _topological_order(loss)
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in order:
        if node._parents:
            node.grad = None
            node._parents = ()
            node._backward = None


def grad_check(fn, point, eps=1e-4, max_coords=None, seed=0):
    """
    Compare analytic gradients with central finite differences in float64.

    Args:
        fn (callable): Maps a Tensor to a scalar Tensor. Must be deterministic.
        point (Tensor | np.ndarray): Where to evaluate.
        eps (float): Finite-difference step.
        max_coords (int): Check only this many randomly chosen coordinates.
        seed (int): Seed for picking coordinates.

    Returns:
        float: max over coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    with default_dtype(np.float64):
        x = Tensor(base.copy(), requires_grad=True)
        loss = fn(x)
        if loss.data.size != 1:
            raise ShapeError("grad_check", loss.shape, (), "fn must return a scalar")
        backward(loss)
        analytic = x.grad if x.grad is not None else np.zeros_like(base)

        def evaluate(values):
            with no_grad():
                return float(fn(Tensor(values)).data)

        first, second = evaluate(base.copy()), evaluate(base.copy())
        if first != second:
            raise NumericError(f"grad_check: fn is not deterministic ({first!r} != {second!r})")

        coords = list(np.ndindex(base.shape))
        if max_coords is not None and len(coords) > max_coords:
            picks = np.random.default_rng(seed).choice(len(coords), size=max_coords, replace=False)
            coords = [coords[i] for i in sorted(picks)]

        worst = 0.0
        for idx in coords:
            plus, minus = base.copy(), base.copy()
            plus[idx] += eps
            minus[idx] -= eps
            numeric = (evaluate(plus) - evaluate(minus)) / (2.0 * eps)
            exact = float(analytic[idx])
            error = abs(exact - numeric) / max(1.0, abs(exact), abs(numeric))
            worst = max(worst, error)
    logging.debug(f"grad_check over {len(coords)} coordinates: max relative error {worst:.3e}")
    return worst
