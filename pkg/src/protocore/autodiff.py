"""Reverse-mode automatic differentiation over dense float64 arrays.

Define-by-run: every operation records its parents and a backward
closure on the output tensor, so the graph is rebuilt each step and
batch shapes may change freely. Scoped to what small MLPs and the
losses in this package need: no broadcasting beyond bias/scalar cases,
no views, float64 only.
"""

import json
import math

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes are not conformable for an op."""


class NonFiniteError(FloatingPointError):
    """Raised when a loss or gradient stops being finite."""


class Tensor:
    """Dense n-dimensional value with an optional gradient buffer.

    ``data`` is always a float64 ndarray; ``grad`` is lazily allocated
    by backward() and has the same shape. Tensors created by ops carry
    the backward closure that scatters the output gradient onto their
    parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self) -> "Tensor":
        """Copy of the value, cut from the graph."""
        return Tensor(self.data.copy())

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{flag})"

    # operator sugar; all defined in terms of the module-level ops
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def sum(self, axis=None):
        return tensor_sum(self, axis=axis)

    def mean(self, axis=None):
        return tensor_mean(self, axis=axis)

    def transpose(self):
        return transpose(self)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _make(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


# ---------------------------------------------------------------------------
# elementwise and linear-algebra ops


def add(a, b) -> Tensor:
    """Elementwise sum; also supports (n,m)+(m,) bias rows and scalars."""
    a, b = _wrap(a), _wrap(b)
    if a.shape == b.shape:
        def back(g):
            _accumulate(a, g)
            _accumulate(b, g)
    elif b.ndim == 0 or b.size == 1:
        def back(g):
            _accumulate(a, g)
            _accumulate(b, np.sum(g).reshape(b.shape))
    elif a.ndim == 2 and b.ndim == 1 and a.shape[1] == b.shape[0]:
        def back(g):
            _accumulate(a, g)
            _accumulate(b, g.sum(axis=0))
    else:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} not conformable")
    return _make(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"sub: shapes {a.shape} and {b.shape} differ")

    def back(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    """Elementwise product of same-shape tensors (or a scalar tensor)."""
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape and not (b.ndim == 0 or a.ndim == 0):
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def back(g):
        ga = g * b.data
        gb = g * a.data
        _accumulate(a, ga if ga.shape == a.shape else np.sum(ga).reshape(a.shape))
        _accumulate(b, gb if gb.shape == b.shape else np.sum(gb).reshape(b.shape))

    return _make(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    """Elementwise quotient of same-shape (or scalar) tensors."""
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape and not (b.ndim == 0 or a.ndim == 0):
        raise ShapeError(f"div: shapes {a.shape} and {b.shape} differ")

    def back(g):
        ga = g / b.data
        gb = -g * a.data / (b.data ** 2)
        _accumulate(a, ga if ga.shape == a.shape else np.sum(ga).reshape(a.shape))
        _accumulate(b, gb if gb.shape == b.shape else np.sum(gb).reshape(b.shape))

    return _make(a.data / b.data, (a, b), back)


def scale(a, c: float) -> Tensor:
    """Multiply by a python constant (not differentiated through)."""
    a = _wrap(a)
    c = float(c)

    def back(g):
        _accumulate(a, g * c)

    return _make(a.data * c, (a,), back)


def _mm(x, y):
    # einsum keeps a fixed per-element accumulation order, so row i of a
    # batched product is bit-identical to the single-row product
    return np.einsum("nk,km->nm", x, y)


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim not in (1, 2) or b.ndim not in (1, 2):
        raise ShapeError(f"matmul: only 1-D/2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} @ {b.shape}")
    a2 = a.data[None, :] if a.ndim == 1 else a.data
    b2 = b.data[:, None] if b.ndim == 1 else b.data
    out = _mm(a2, b2)
    if b.ndim == 1:
        out = out[:, 0]
    if a.ndim == 1:
        out = out[0]

    def back(g):
        g2 = g.reshape(a2.shape[0], b2.shape[1])
        if a.requires_grad:
            ga = np.einsum("nm,km->nk", g2, b2)
            _accumulate(a, ga[0] if a.ndim == 1 else ga)
        if b.requires_grad:
            gb = np.einsum("nk,nm->km", a2, g2)
            _accumulate(b, gb[:, 0] if b.ndim == 1 else gb)

    return _make(out, (a, b), back)


def transpose(a) -> Tensor:
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected 2-D, got shape {a.shape}")

    def back(g):
        _accumulate(a, g.T)

    return _make(a.data.T.copy(), (a,), back)


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0

    def back(g):
        _accumulate(a, g * mask)

    return _make(np.where(mask, a.data, 0.0), (a,), back)


def exp(a) -> Tensor:
    a = _wrap(a)
    out_data = np.exp(a.data)

    def back(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), back)


def log(a) -> Tensor:
    a = _wrap(a)

    def back(g):
        _accumulate(a, g / a.data)

    return _make(np.log(a.data), (a,), back)


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out_data = np.sqrt(a.data)

    def back(g):
        _accumulate(a, g * 0.5 / out_data)

    return _make(out_data, (a,), back)


def tensor_sum(a, axis=None) -> Tensor:
    a = _wrap(a)

    def back(g):
        if axis is None:
            _accumulate(a, np.full(a.shape, float(g)))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g, axis), a.shape).copy())

    return _make(np.sum(a.data, axis=axis), (a,), back)


def tensor_mean(a, axis=None) -> Tensor:
    a = _wrap(a)
    n = a.size if axis is None else a.shape[axis]

    def back(g):
        if axis is None:
            _accumulate(a, np.full(a.shape, float(g) / n))
        else:
            _accumulate(a, np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy())

    return _make(np.mean(a.data, axis=axis), (a,), back)


# ---------------------------------------------------------------------------
# gather / stack ops


def rows(a, idx) -> Tensor:
    """Gather rows of a 2-D tensor by integer index array."""
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"rows: expected 2-D, got shape {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)

    def back(g):
        if a.requires_grad:
            acc = np.zeros(a.shape)
            np.add.at(acc, idx, g)
            _accumulate(a, acc)

    return _make(a.data[idx], (a,), back)


def take_per_row(a, idx) -> Tensor:
    """out[i] = a[i, idx[i]] for a 2-D tensor."""
    a = _wrap(a)
    if a.ndim != 2:
        raise ShapeError(f"take_per_row: expected 2-D, got shape {a.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    if idx.shape != (a.shape[0],):
        raise ShapeError(f"take_per_row: index shape {idx.shape} vs {a.shape[0]} rows")
    ar = np.arange(a.shape[0])

    def back(g):
        if a.requires_grad:
            acc = np.zeros(a.shape)
            np.add.at(acc, (ar, idx), g)
            _accumulate(a, acc)

    return _make(a.data[ar, idx], (a,), back)


def stack_rows(vectors) -> Tensor:
    """Stack 1-D tensors of equal length into a (k, m) tensor."""
    vectors = [_wrap(v) for v in vectors]
    if not vectors:
        raise ShapeError("stack_rows: empty input")
    m = vectors[0].shape
    for v in vectors:
        if v.ndim != 1 or v.shape != m:
            raise ShapeError(f"stack_rows: expected 1-D of shape {m}, got {v.shape}")

    def back(g):
        for i, v in enumerate(vectors):
            _accumulate(v, g[i])

    return _make(np.stack([v.data for v in vectors]), tuple(vectors), back)


def concat_rows(mats) -> Tensor:
    """Concatenate 2-D tensors with equal column counts along rows."""
    mats = [_wrap(m) for m in mats]
    if not mats:
        raise ShapeError("concat_rows: empty input")
    cols = mats[0].shape[-1]
    for m in mats:
        if m.ndim != 2 or m.shape[1] != cols:
            raise ShapeError(f"concat_rows: expected (*, {cols}), got {m.shape}")
    offsets = np.cumsum([0] + [m.shape[0] for m in mats])

    def back(g):
        for i, m in enumerate(mats):
            _accumulate(m, g[offsets[i]:offsets[i + 1]])

    return _make(np.concatenate([m.data for m in mats]), tuple(mats), back)


# ---------------------------------------------------------------------------
# distance, similarity, softmax ops


def pairwise_sqdist(a, b) -> Tensor:
    """Squared Euclidean distances between rows: out[i, j] = ||a_i - b_j||^2."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"pairwise_sqdist: shapes {a.shape} and {b.shape}")
    diff = a.data[:, None, :] - b.data[None, :, :]
    out_data = np.einsum("nmd,nmd->nm", diff, diff)

    def back(g):
        _accumulate(a, 2.0 * np.einsum("nm,nmd->nd", g, diff))
        _accumulate(b, -2.0 * np.einsum("nm,nmd->md", g, diff))

    return _make(out_data, (a, b), back)


def row_normalize(a) -> Tensor:
    """Scale each row to unit Euclidean norm; rejects zero-norm rows."""
    a = _wrap(a)
    if a.ndim == 1:
        norms = np.linalg.norm(a.data)
        if norms == 0.0:
            raise ValueError("row_normalize: zero-norm vector")
        out_data = a.data / norms

        def back(g):
            _accumulate(a, (g - out_data * np.dot(g, out_data)) / norms)

        return _make(out_data, (a,), back)
    if a.ndim != 2:
        raise ShapeError(f"row_normalize: expected 1-D or 2-D, got {a.shape}")
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    if np.any(norms == 0.0):
        raise ValueError("row_normalize: zero-norm row")
    out_data = a.data / norms

    def back(g):
        inner = np.sum(g * out_data, axis=1, keepdims=True)
        _accumulate(a, (g - out_data * inner) / norms)

    return _make(out_data, (a,), back)


def softmax(a) -> Tensor:
    """Row-wise (last axis) stable softmax."""
    a = _wrap(a)
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    e = np.exp(shifted)
    out_data = e / np.sum(e, axis=-1, keepdims=True)

    def back(g):
        inner = np.sum(g * out_data, axis=-1, keepdims=True)
        _accumulate(a, out_data * (g - inner))

    return _make(out_data, (a,), back)


def log_softmax(a) -> Tensor:
    """Row-wise (last axis) stable log-softmax."""
    a = _wrap(a)
    shifted = a.data - np.max(a.data, axis=-1, keepdims=True)
    out_data = shifted - np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))

    def back(g):
        p = np.exp(out_data)
        _accumulate(a, g - p * np.sum(g, axis=-1, keepdims=True))

    return _make(out_data, (a,), back)


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood of integer labels under softmax(logits).

    Accepts (n, C) logits with (n,) labels or a single (C,) row with an
    integer label. Masked (-inf) logits receive zero probability and
    zero gradient.
    """
    logits = _wrap(logits)
    squeeze = logits.ndim == 1
    raw = logits.data[None, :] if squeeze else logits.data
    if raw.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits shape {logits.shape}")
    labels = np.asarray([labels] if squeeze else labels, dtype=np.intp)
    if labels.shape != (raw.shape[0],):
        raise ShapeError(
            f"softmax_cross_entropy: {labels.shape[0] if labels.ndim else 1} labels "
            f"for {raw.shape[0]} rows"
        )
    if np.any(labels < 0) or np.any(labels >= raw.shape[1]):
        raise ValueError("softmax_cross_entropy: label outside logit range")
    n = raw.shape[0]
    shifted = raw - np.max(raw, axis=1, keepdims=True)
    lsm = shifted - np.log(np.sum(np.exp(shifted), axis=1, keepdims=True))
    out_data = -np.mean(lsm[np.arange(n), labels])

    def back(g):
        p = np.exp(lsm)
        p[np.arange(n), labels] -= 1.0
        ga = p * (float(g) / n)
        _accumulate(logits, ga[0] if squeeze else ga)

    return _make(out_data, (logits,), back)


def mse(a, b) -> Tensor:
    """Mean squared error between same-shape tensors (scalar output)."""
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data

    def back(g):
        ga = (2.0 * float(g) / a.size) * diff
        _accumulate(a, ga)
        _accumulate(b, -ga)

    return _make(np.mean(diff ** 2), (a, b), back)


def squared_euclidean(a, b) -> Tensor:
    """Sum of squared differences between same-shape tensors (scalar)."""
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape:
        raise ShapeError(f"squared_euclidean: shapes {a.shape} and {b.shape} differ")
    diff = a.data - b.data

    def back(g):
        ga = (2.0 * float(g)) * diff
        _accumulate(a, ga)
        _accumulate(b, -ga)

    return _make(np.sum(diff ** 2), (a, b), back)


_FORWARD_OPS = {
    "matmul": matmul,
    "add": add,
    "relu": relu,
    "exp": exp,
    "log": log,
    "sum": tensor_sum,
    "mean": tensor_mean,
    "mse": mse,
    "softmax_cross_entropy": softmax_cross_entropy,
    "squared_euclidean": squared_euclidean,
    "scale": scale,
}


def forward_op(kind: str, *inputs) -> Tensor:
    """Apply a named op; the graph node is recorded on the output."""
    if kind not in _FORWARD_OPS:
        raise ValueError(f"forward_op: unknown op kind {kind!r}")
    return _FORWARD_OPS[kind](*inputs)


# ---------------------------------------------------------------------------
# backward pass


def backward(root: Tensor):
    """Populate .grad on every tensor the scalar root depends on.

    Gradients accumulate additively across uses; each graph node's
    backward closure runs exactly once, in reverse topological order.
    """
    if root.size != 1:
        raise ShapeError(f"backward: root must be scalar, got shape {root.shape}")
    topo = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    root.grad = np.ones(root.shape)
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(params):
    for p in params:
        p.zero_grad()


# ---------------------------------------------------------------------------
# gradient verification


def finite_diff_check(loss_fn, params, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference grads.

    loss_fn must rebuild the (deterministic) scalar loss from the
    current values of params on every call. The error at a coordinate
    is |analytic - numeric| / max(1, |analytic|).
    """
    if not 1e-6 <= epsilon <= 1e-3:
        raise ValueError(f"finite_diff_check: epsilon {epsilon} outside [1e-6, 1e-3]")
    params = list(params)
    zero_grads(params)
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("finite_diff_check: non-finite loss")
    backward(loss)
    analytic = [np.zeros(p.shape) if p.grad is None else p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = ga.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            hi = float(loss_fn().data)
            flat[i] = orig - epsilon
            lo = float(loss_fn().data)
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * epsilon)
            err = abs(gflat[i] - numeric) / max(1.0, abs(gflat[i]))
            if err > worst:
                worst = err
    return worst


# ---------------------------------------------------------------------------
# optimizers


class CosineSchedule:
    """Step size annealed from base to 0 over a fixed horizon."""

    def __init__(self, base: float, horizon: int):
        if horizon < 1:
            raise ValueError("cosine schedule horizon must be >= 1")
        self.base = base
        self.horizon = horizon

    def value(self, step: int) -> float:
        t = min(step, self.horizon)
        return 0.5 * self.base * (1.0 + math.cos(math.pi * t / self.horizon))


class ConstantSchedule:
    def __init__(self, base: float):
        self.base = base

    def value(self, step: int) -> float:
        return self.base


def _check_finite_grads(params):
    for i, p in enumerate(params):
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for parameter {i}")


class GradientDescent:
    """Plain p <- p - lr * grad with an optional schedule."""

    kind = "plain-gradient-descent"

    def __init__(self, params, lr: float, schedule=None):
        if lr <= 0:
            raise ValueError("step size must be positive")
        self.params = list(params)
        self.schedule = schedule or ConstantSchedule(lr)
        self.step_count = 0

    @property
    def step_size(self) -> float:
        return self.schedule.value(self.step_count)

    def step(self):
        _check_finite_grads(self.params)
        lr = self.step_size
        for p in self.params:
            if p.grad is not None:
                p.data -= lr * p.grad
        self.step_count += 1

    def zero_grad(self):
        zero_grads(self.params)


class Adam:
    """Adaptive-moment optimizer with bias correction."""

    kind = "adaptive-moment"

    def __init__(self, params, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, schedule=None):
        if lr <= 0:
            raise ValueError("step size must be positive")
        self.params = list(params)
        self.schedule = schedule or ConstantSchedule(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    @property
    def step_size(self) -> float:
        return self.schedule.value(self.step_count)

    def step(self):
        _check_finite_grads(self.params)
        lr = self.step_size
        t = self.step_count + 1
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros(p.shape)
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data -= lr * m_hat / (np.sqrt(v_hat) + self.eps)
        self.step_count = t

    def zero_grad(self):
        zero_grads(self.params)


def optimizer_step(optimizer):
    """Advance one optimization step; aborts (raises) on non-finite grads."""
    optimizer.step()


# ---------------------------------------------------------------------------
# parameter checkpoints

CHECKPOINT_FORMAT = "dense-param-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, named_params):
    """Write (name, tensor) pairs as versioned JSON; round-trips bit-exactly."""
    payload = checkpoint_payload(named_params)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, separators=(",", ":"))


def checkpoint_payload(named_params) -> dict:
    entries = []
    for name, tensor in named_params:
        arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor)
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "values": arr.reshape(-1).tolist(),
        })
    return {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
            "params": entries}


def load_checkpoint(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        payload = json.load(fh)
    return checkpoint_arrays(payload)


def checkpoint_arrays(payload: dict) -> dict:
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"not a parameter checkpoint: {payload.get('format')!r}")
    out = {}
    for entry in payload["params"]:
        arr = np.asarray(entry["values"], dtype=np.float64)
        out[entry["name"]] = arr.reshape(entry["shape"])
    return out
