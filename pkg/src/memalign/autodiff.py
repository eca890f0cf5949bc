"""Dense float64 tensors with define-by-run reverse-mode differentiation.

Tensors wrap a numpy array. Every operation computes its result eagerly
and, while gradient recording is enabled, stores the closure that maps the
output gradient back to input gradients. ``backward()`` replays the
recorded graph once in reverse topological order; each call adds one full
chain-rule pass into ``.grad``, so gradients accumulate until cleared.

The graph is rebuilt on every forward pass. No broadcasting beyond
scalars, per-channel bias, and H×W masks into C×H×W maps.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np

_COSINE_EPS = 1e-12

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Compute forward values only inside the block (no graph recording)."""
    global _grad_enabled
    saved = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = saved


class Tensor:
    """A float64 array plus the bookkeeping for reverse-mode gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return tensor_sum(self, axis)

    def mean(self) -> "Tensor":
        return mean(self)

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=np.float64))


def _record(out: Tensor, parents: tuple[Tensor, ...], grad_fn) -> Tensor:
    if _grad_enabled and any(p.requires_grad or p._grad_fn is not None for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
    return out


def backward(loss: Tensor) -> None:
    """Accumulate one chain-rule pass from a scalar loss into ``.grad``."""
    if loss.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")

    # Postorder DFS: parents appear before their consumers.
    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if id(parent) not in visited:
                stack.append((parent, False))

    incoming: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        g = incoming.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = np.array(g, copy=True) if node.grad is None else node.grad + g
        if node._grad_fn is None:
            continue
        for parent, pg in zip(node._parents, node._grad_fn(g)):
            if pg is None:
                continue
            if not (parent.requires_grad or parent._grad_fn is not None):
                continue
            acc = incoming.get(id(parent))
            incoming[id(parent)] = pg if acc is None else acc + pg


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _check_elementwise(a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _reduce_like(g: np.ndarray, ref: np.ndarray) -> np.ndarray:
    if g.shape == ref.shape:
        return g
    return np.asarray(g.sum(), dtype=np.float64).reshape(ref.shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_reduce_like(g, a.data), _reduce_like(g, b.data)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_reduce_like(g, a.data), _reduce_like(-g, b.data)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_elementwise(a, b)
    out = Tensor(a.data * b.data)
    return _record(
        out, (a, b),
        lambda g: (_reduce_like(g * b.data, a.data), _reduce_like(g * a.data, b.data)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(-a.data)
    return _record(out, (a,), lambda g: (-g,))


# ---------------------------------------------------------------------------
# linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ValueError("matmul supports 2-D operands only")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.data.ndim != 2:
        raise ValueError("transpose supports 2-D tensors only")
    out = Tensor(a.data.T)
    return _record(out, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out = Tensor(a.data.reshape(shape))
    orig = a.data.shape
    return _record(out, (a,), lambda g: (g.reshape(orig),))


def tensor_sum(a, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        out = Tensor(np.asarray(a.data.sum()))
        shape = a.data.shape
        return _record(out, (a,), lambda g: (np.full(shape, float(g)),))
    axis = _normalize_axis(axis, a.data.ndim)
    out = Tensor(a.data.sum(axis=axis))
    shape = a.data.shape
    return _record(
        out, (a,),
        lambda g: (np.broadcast_to(np.expand_dims(g, axis), shape),),
    )


def mean(a) -> Tensor:
    a = as_tensor(a)
    if a.size == 0:
        raise ValueError("mean of an empty tensor")
    out = Tensor(np.asarray(a.data.mean()))
    shape, n = a.data.shape, a.data.size
    return _record(out, (a,), lambda g: (np.full(shape, float(g) / n),))


def norm(a, axis: int) -> Tensor:
    """L2 norm along ``axis``; the reduced axis is dropped."""
    a = as_tensor(a)
    axis = _normalize_axis(axis, a.data.ndim)
    val = np.sqrt((a.data * a.data).sum(axis=axis))
    out = Tensor(val)

    def grad_fn(g):
        denom = np.expand_dims(np.maximum(val, 1e-30), axis)
        return (np.expand_dims(g, axis) * a.data / denom,)

    return _record(out, (a,), grad_fn)


def _normalize_axis(axis: int, ndim: int) -> int:
    if not isinstance(axis, (int, np.integer)):
        raise ValueError(f"axis must be an integer, got {axis!r}")
    if not -ndim <= axis < ndim:
        raise ValueError(f"axis {axis} out of range for {ndim} dimensions")
    return axis % ndim


# ---------------------------------------------------------------------------
# nonlinearities


def relu(a) -> Tensor:
    a = as_tensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    return _record(out, (a,), lambda g: (g * (a.data > 0.0),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    z = a.data
    y = np.empty_like(z)
    pos = z >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    y[~pos] = ez / (1.0 + ez)
    out = Tensor(y)
    return _record(out, (a,), lambda g: (g * y * (1.0 - y),))


def softmax(a, axis: int) -> Tensor:
    """Max-stabilized softmax along ``axis``; entries sum to 1."""
    a = as_tensor(a)
    axis = _normalize_axis(axis, a.data.ndim)
    if a.data.shape[axis] == 0:
        raise ValueError("softmax along an empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def grad_fn(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(out, (a,), grad_fn)


def log_softmax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    axis = _normalize_axis(axis, a.data.ndim)
    if a.data.shape[axis] == 0:
        raise ValueError("log_softmax along an empty axis")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = Tensor(z - lse)
    sm = np.exp(z - lse)

    def grad_fn(g):
        return (g - sm * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), grad_fn)


# ---------------------------------------------------------------------------
# structured ops


def grl(a, coeff: float = 1.0) -> Tensor:
    """Gradient reversal: identity forward, gradient scaled by -coeff."""
    a = as_tensor(a)
    out = Tensor(a.data)
    return _record(out, (a,), lambda g: (-coeff * g,))


def conv2d(x, kernel) -> Tensor:
    """Same-padded stride-1 cross-correlation of C_in×H×W with C_out×C_in×k×k.

    Only k in {1, 3}; output is C_out×H×W.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.data.ndim != 3:
        raise ValueError(f"conv2d input must be C×H×W, got shape {x.shape}")
    if kernel.data.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ValueError(f"conv2d kernel must be C_out×C_in×k×k, got shape {kernel.shape}")
    c_in, h, w = x.shape
    c_out, kc_in, k, _ = kernel.shape
    if kc_in != c_in:
        raise ValueError(f"channel mismatch: input has {c_in}, kernel expects {kc_in}")
    if k not in (1, 3):
        raise ValueError(f"kernel size must be 1 or 3, got {k}")

    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (pad, pad))) if pad else x.data
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    cols = windows.transpose(0, 3, 4, 1, 2).reshape(c_in * k * k, h * w)
    wmat = kernel.data.reshape(c_out, c_in * k * k)
    out = Tensor((wmat @ cols).reshape(c_out, h, w))

    def grad_fn(g):
        g2 = g.reshape(c_out, h * w)
        gk = (g2 @ cols.T).reshape(kernel.shape)
        gcols = (wmat.T @ g2).reshape(c_in, k, k, h, w)
        gxp = np.zeros((c_in, h + 2 * pad, w + 2 * pad))
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + h, j:j + w] += gcols[:, i, j]
        gx = gxp[:, pad:pad + h, pad:pad + w] if pad else gxp
        return gx, gk

    return _record(out, (x, kernel), grad_fn)


def cosine_map(a, b) -> Tensor:
    """Per-location cosine of the channel vectors of two C×H×W maps.

    Locations where either vector's norm falls below 1e-12 yield 0.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 3 or a.shape != b.shape:
        raise ValueError(f"cosine_map needs matching C×H×W maps, got {a.shape} vs {b.shape}")
    dot = (a.data * b.data).sum(axis=0)
    na = np.sqrt((a.data * a.data).sum(axis=0))
    nb = np.sqrt((b.data * b.data).sum(axis=0))
    valid = (na > _COSINE_EPS) & (nb > _COSINE_EPS)
    na_s = np.where(valid, na, 1.0)
    nb_s = np.where(valid, nb, 1.0)
    cos = np.where(valid, dot / (na_s * nb_s), 0.0)
    out = Tensor(cos)

    def grad_fn(g):
        gv = g * valid
        ga = gv * (b.data / (na_s * nb_s) - cos * a.data / (na_s * na_s))
        gb = gv * (a.data / (na_s * nb_s) - cos * b.data / (nb_s * nb_s))
        return ga, gb

    return _record(out, (a, b), grad_fn)


def mask_mul(x, mask: np.ndarray) -> Tensor:
    """Broadcast an H×W mask (constant) into a C×H×W map."""
    x = as_tensor(x)
    mask = np.asarray(mask, dtype=np.float64)
    if x.data.ndim != 3 or mask.shape != x.shape[1:]:
        raise ValueError(f"mask shape {mask.shape} does not match map {x.shape}")
    out = Tensor(x.data * mask[None])
    return _record(out, (x,), lambda g: (g * mask[None],))


def add_channel_bias(x, bias) -> Tensor:
    """Add a length-C bias vector to every location of a C×H×W map."""
    x, bias = as_tensor(x), as_tensor(bias)
    if x.data.ndim != 3 or bias.data.shape != (x.shape[0],):
        raise ValueError(f"bias shape {bias.shape} does not match map {x.shape}")
    out = Tensor(x.data + bias.data[:, None, None])
    return _record(out, (x, bias), lambda g: (g, g.sum(axis=(1, 2))))


def masked_select(x, mask: np.ndarray) -> Tensor:
    """Gather the channel vectors of a C×H×W map where mask > 0.5, as N×C."""
    x = as_tensor(x)
    mask = np.asarray(mask)
    if x.data.ndim != 3 or mask.shape != x.shape[1:]:
        raise ValueError(f"mask shape {mask.shape} does not match map {x.shape}")
    c = x.shape[0]
    idx = np.flatnonzero(mask.reshape(-1) > 0.5)
    out = Tensor(x.data.reshape(c, -1)[:, idx].T)

    def grad_fn(g):
        gx = np.zeros((c, x.data.shape[1] * x.data.shape[2]))
        gx[:, idx] = g.T
        return (gx.reshape(x.data.shape),)

    return _record(out, (x,), grad_fn)


def gather_rows(x, indices) -> Tensor:
    """Select rows of an N×C matrix; repeated indices accumulate gradient."""
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ValueError("gather_rows needs a 2-D tensor")
    idx = np.asarray(indices, dtype=np.intp)
    out = Tensor(x.data[idx])

    def grad_fn(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _record(out, (x,), grad_fn)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


def numeric_gradients(f, params: Sequence[Tensor], h: float = 1e-5) -> list[np.ndarray]:
    """Central-difference gradients of the scalar ``f()`` w.r.t. each param.

    ``f`` must rebuild its graph from the params' current data on every call.
    """
    grads = []
    with no_grad():
        for p in params:
            gp = np.zeros_like(p.data)
            flat, gflat = p.data.reshape(-1), gp.reshape(-1)
            for i in range(flat.size):
                saved = flat[i]
                flat[i] = saved + h
                up = f().item()
                flat[i] = saved - h
                down = f().item()
                flat[i] = saved
                gflat[i] = (up - down) / (2.0 * h)
            grads.append(gp)
    return grads


def gradient_check(f, params: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative gap between analytic and central-difference gradients.

    The gap per parameter is ||a - n|| / (||a|| + ||n|| + 1e-12).
    """
    for p in params:
        p.zero_grad()
    loss = f()
    loss.backward()
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    numeric = numeric_gradients(f, params, h)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        gap = np.linalg.norm(a - n) / (np.linalg.norm(a) + np.linalg.norm(n) + 1e-12)
        worst = max(worst, gap)
    return worst
