"""
Minimal reverse-mode differentiation for the dense heads.

Operations run eagerly on numpy arrays. While a Graph is active (``with Graph():``)
every operation touching a tracked tensor appends a node to the graph's tape;
``backward(loss)`` walks the tape in reverse and accumulates gradients into the
leaf tensors that require them. Outside a graph nothing is recorded, which is how
eval-mode forwards run.

Parameters are stored as float32; every operation computes and every gradient
buffer accumulates in float64.
"""

import hashlib
import threading
from dataclasses import dataclass

import numpy as np

from scatsimclr.errors import ContractViolation, ShapeMismatchError

_local = threading.local()


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "tracked", "name")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value)
        self.requires_grad = requires_grad
        self.tracked = requires_grad
        self.grad = np.zeros(self.value.shape, dtype=np.float64) if requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def numpy(self):
        return np.array(self.value, dtype=np.float64)

    def zero_grad(self):
        if self.grad is not None:
            self.grad.fill(0.0)

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Tensor{label}(shape={self.shape})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


@dataclass
class Node:
    out: Tensor
    inputs: tuple
    vjp: object


class Graph:
    """Tape of recorded operations. Single-threaded; one per forward/backward pass."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _stack().pop()

    def __len__(self):
        return len(self.nodes)


def _stack():
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_graph():
    stack = _stack()
    return stack[-1] if stack else None


def record(value, inputs, vjp):
    """Wrap an op result; when a graph is active and any input is tracked, tape it.

    vjp maps the output gradient to one gradient (or None) per input.
    """
    out = Tensor(value)
    graph = active_graph()
    if graph is not None and any(t.tracked for t in inputs):
        out.tracked = True
        graph.nodes.append(Node(out, tuple(inputs), vjp))
    return out


def backward(loss, graph=None):
    """Accumulate d(loss)/d(leaf) into every reachable leaf's gradient buffer."""
    graph = graph if graph is not None else active_graph()
    if graph is None:
        raise ContractViolation("backward needs the graph the loss was recorded in")
    if loss.value.size != 1:
        raise ContractViolation(f"backward needs a scalar loss, got shape {loss.shape}")
    pending = {id(loss): np.ones(loss.shape, dtype=np.float64)}
    for node in reversed(graph.nodes):
        g = pending.pop(id(node.out), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if gi is None or not inp.tracked:
                continue
            if inp.requires_grad:
                inp.grad += gi
            elif id(inp) in pending:
                pending[id(inp)] = pending[id(inp)] + gi
            else:
                pending[id(inp)] = gi


def _expect(condition, message):
    if not condition:
        raise ContractViolation(message)


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def dense(x, W, b):
    """y = x W + b for x of shape (B, n), W (n, m), b (m,)."""
    x, W, b = as_tensor(x), as_tensor(W), as_tensor(b)
    _expect(x.value.ndim == 2 and W.value.ndim == 2 and b.value.ndim == 1,
            f"dense expects 2D x, 2D W and 1D b, got {x.shape}, {W.shape}, {b.shape}")
    _expect(x.shape[1] == W.shape[0] and W.shape[1] == b.shape[0],
            f"dense shape mismatch: x {x.shape}, W {W.shape}, b {b.shape}")
    xv = x.value.astype(np.float64, copy=False)
    Wv = W.value.astype(np.float64, copy=False)
    y = xv @ Wv + b.value.astype(np.float64, copy=False)

    def vjp(g):
        return g @ Wv.T, xv.T @ g, g.sum(axis=0)

    return record(y, (x, W, b), vjp)


def relu(x):
    x = as_tensor(x)
    mask = x.value > 0
    return record(np.where(mask, x.value, 0.0).astype(np.float64), (x,), lambda g: (g * mask,))


def softmax(x):
    """Row-wise softmax over the last axis of a (B, K) tensor."""
    x = as_tensor(x)
    _expect(x.value.ndim == 2, f"softmax expects a 2D tensor, got {x.shape}")
    shifted = x.value - x.value.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return record(y, (x,), vjp)


def dropout(x, rate, rng=None, training=True):
    """Inverted dropout; identity in eval mode or at rate 0."""
    _expect(0.0 <= rate < 1.0, f"dropout rate must be in [0, 1), got {rate}")
    x = as_tensor(x)
    if not training or rate == 0.0:
        return x
    _expect(rng is not None, "training-mode dropout needs a generator")
    mask = (rng.uniform(size=x.shape) >= rate) / (1.0 - rate)
    return record(x.value * mask, (x,), lambda g: (g * mask,))


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer (float64 buffers, updated in place)."""

    mean: np.ndarray
    var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5


def batch_normalize(x, gamma, beta, state, mode="train"):
    """Per-feature normalization of a (B, C) tensor.

    train: batch statistics, running statistics updated; eval: running statistics.
    """
    _expect(mode in ("train", "eval"), f"mode must be 'train' or 'eval', got {mode!r}")
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    _expect(x.value.ndim == 2 and gamma.shape == (x.shape[1],) and beta.shape == (x.shape[1],),
            f"batch_normalize shape mismatch: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    xv = x.value.astype(np.float64, copy=False)
    gv = gamma.value.astype(np.float64, copy=False)
    B = xv.shape[0]

    if mode == "train":
        mean = xv.mean(axis=0)
        var = xv.var(axis=0)
        unbiased = var * B / (B - 1) if B > 1 else var
        state.mean *= 1.0 - state.momentum
        state.mean += state.momentum * mean
        state.var *= 1.0 - state.momentum
        state.var += state.momentum * unbiased
    else:
        mean, var = state.mean.copy(), state.var.copy()

    inv_std = 1.0 / np.sqrt(var + state.eps)
    xhat = (xv - mean) * inv_std
    y = gv * xhat + beta.value.astype(np.float64, copy=False)

    def vjp(g):
        dxhat = g * gv
        if mode == "train":
            dx = inv_std / B * (B * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        else:
            dx = dxhat * inv_std
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    return record(y, (x, gamma, beta), vjp)


def cell_avg_pool(x, grid=1):
    """Average (B, C, H, W) over a grid x grid partition -> (B, C * grid * grid).

    Features are ordered channel-major, then cell row, then cell column.
    """
    x = as_tensor(x)
    _expect(x.value.ndim == 4, f"pooling expects a (B, C, H, W) tensor, got {x.shape}")
    B, C, H, W = x.shape
    _expect(grid >= 1 and H % grid == 0 and W % grid == 0,
            f"a {grid}x{grid} pooling grid does not divide {H}x{W} maps")
    h, w = H // grid, W // grid
    cells = x.value.astype(np.float64, copy=False).reshape(B, C, grid, h, grid, w)
    y = cells.mean(axis=(3, 5)).reshape(B, C * grid * grid)

    def vjp(g):
        g = g.reshape(B, C, grid, 1, grid, 1) / (h * w)
        return (np.broadcast_to(g, (B, C, grid, h, grid, w)).reshape(B, C, H, W),)

    return record(y, (x,), vjp)


def global_avg_pool(x):
    """(B, C, H, W) -> (B, C)."""
    return cell_avg_pool(x, 1)


def l2_normalize(x, eps=1e-12):
    """Scale each row of a (B, d) tensor to unit Euclidean norm."""
    x = as_tensor(x)
    _expect(x.value.ndim == 2, f"l2_normalize expects a 2D tensor, got {x.shape}")
    xv = x.value.astype(np.float64, copy=False)
    norm = np.maximum(np.sqrt((xv * xv).sum(axis=1, keepdims=True)), eps)
    y = xv / norm

    def vjp(g):
        return ((g - y * (g * y).sum(axis=1, keepdims=True)) / norm,)

    return record(y, (x,), vjp)


def add(a, b):
    """Elementwise sum of two same-shape tensors (residual connections)."""
    a, b = as_tensor(a), as_tensor(b)
    _expect(a.shape == b.shape, f"add needs equal shapes, got {a.shape} and {b.shape}")
    return record(a.value.astype(np.float64) + b.value, (a, b), lambda g: (g, g))


def take_rows(x, rows):
    """x[rows] for a (B, d) tensor and an integer index array."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    _expect(x.value.ndim == 2, f"take_rows expects a 2D tensor, got {x.shape}")

    def vjp(g):
        out = np.zeros(x.shape, dtype=np.float64)
        np.add.at(out, rows, g)
        return (out,)

    return record(x.value[rows].astype(np.float64), (x,), vjp)


def scale(x, factor):
    x = as_tensor(x)
    factor = float(factor)
    return record(x.value.astype(np.float64) * factor, (x,), lambda g: (g * factor,))


def total(x):
    """Sum of all entries, as a scalar tensor."""
    x = as_tensor(x)
    return record(np.asarray(x.value.astype(np.float64).sum()), (x,),
                  lambda g: (np.full(x.shape, float(g)),))


def cross_entropy(probs, targets, floor=1e-12):
    """Mean over rows of -sum(t * log p); p are probabilities, t are fixed targets."""
    probs = as_tensor(probs)
    t = np.asarray(targets.value if isinstance(targets, Tensor) else targets, dtype=np.float64)
    _expect(probs.value.ndim == 2 and probs.shape == t.shape,
            f"cross_entropy shape mismatch: probabilities {probs.shape}, targets {t.shape}")
    p = probs.value.astype(np.float64, copy=False)
    B = p.shape[0]
    clipped = np.maximum(p, floor)
    loss = -(t * np.log(clipped)).sum() / B

    def vjp(g):
        return (np.where(p > floor, -t / clipped, 0.0) * (float(g) / B),)

    return record(np.asarray(loss), (probs,), vjp)


def gram(x):
    """x x^T for a (B, d) tensor."""
    x = as_tensor(x)
    _expect(x.value.ndim == 2, f"gram expects a 2D tensor, got {x.shape}")
    xv = x.value.astype(np.float64, copy=False)
    return record(xv @ xv.T, (x,), lambda g: ((g + g.T) @ xv,))


def cosine_similarity_matrix(x):
    """Pairwise cosine similarities s[i, j] of the rows of x."""
    return gram(l2_normalize(x))


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

class ParamSet:
    """Named trainable tensors plus non-trainable float64 buffers, in insertion order."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params = {}
        self.buffers = {}

    def add(self, name, value):
        if name in self._params:
            raise ContractViolation(f"parameter {name!r} already exists")
        tensor = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        self._params[name] = tensor
        return tensor

    def add_buffer(self, name, value):
        self.buffers[name] = np.array(value, dtype=np.float64)
        return self.buffers[name]

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def count(self):
        """Exact number of trainable scalars."""
        return int(sum(t.value.size for t in self._params.values()))

    def zero_grad(self):
        for t in self._params.values():
            t.zero_grad()

    def grads(self):
        return {name: t.grad for name, t in self._params.items()}

    def state_dict(self):
        state = {name: t.value.copy() for name, t in self._params.items()}
        state.update({f"buffer:{name}": value.copy() for name, value in self.buffers.items()})
        return state

    def load_state_dict(self, state):
        expected = set(self.state_dict())
        missing = sorted(expected - set(state))
        unexpected = sorted(set(state) - expected)
        if missing or unexpected:
            raise ShapeMismatchError(f"state does not match parameters: missing {missing}, unexpected {unexpected}")
        for name, t in self._params.items():
            value = np.asarray(state[name])
            if value.shape != t.shape:
                raise ShapeMismatchError(
                    f"parameter {name!r}: stored shape {value.shape} does not fit {t.shape}"
                )
        for name, buf in self.buffers.items():
            value = np.asarray(state[f"buffer:{name}"])
            if value.shape != buf.shape:
                raise ShapeMismatchError(
                    f"buffer {name!r}: stored shape {value.shape} does not fit {buf.shape}"
                )
        for name, t in self._params.items():
            t.value[...] = np.asarray(state[name], dtype=self.dtype)
        for name, buf in self.buffers.items():
            buf[...] = np.asarray(state[f"buffer:{name}"], dtype=np.float64)

    def checksum(self):
        """SHA-256 over names and raw bytes of parameters and buffers."""
        digest = hashlib.sha256()
        for name, value in self.state_dict().items():
            digest.update(name.encode("utf-8"))
            digest.update(np.ascontiguousarray(value).tobytes())
        return digest.hexdigest()
