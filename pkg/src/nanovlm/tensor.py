"""Minimal reverse-mode autodiff engine on numpy arrays.

Single-threaded and deterministic: the same graph with the same inputs
produces bitwise-identical results. Training code uses float32; gradient
checking wants float64 (pass float64 arrays in and the graph stays float64).
"""

from __future__ import annotations

import contextlib

import numpy as np
from scipy.special import erf

MASK_NEG = -1e9  # additive attention mask; exp() underflows to exactly 0.0


class TensorError(Exception):
    pass


class ShapeError(TensorError):
    pass


class FiniteError(TensorError):
    pass


class GraphError(TensorError):
    pass


_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference / finite differences)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-d value plus optional gradient buffer; node in the backward graph.

    Gradients accumulate across backward() calls until zero_grad() is invoked,
    so multi-loss training can just backward each term (or their sum) and step.
    """

    __slots__ = ("data", "grad", "requires_grad", "_backward", "_parents")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._backward = None
        self._parents = ()

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; heavy ops live as module functions below
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def backward(self) -> None:
        backward(self)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x)
    if like is not None and arr.dtype != like.data.dtype:
        arr = arr.astype(like.data.dtype)
    return Tensor(arr)


def _node(data: np.ndarray, parents, backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient back down to `shape` after numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out_data = a.data + b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g, b.data.shape))

    return _node(out_data, (a, b), backward_fn)


def sub(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out_data = a.data - b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(-g, b.data.shape))

    return _node(out_data, (a, b), backward_fn)


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    out_data = a.data * b.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape))

    return _node(out_data, (a, b), backward_fn)


def reciprocal(a) -> Tensor:
    a = as_tensor(a)
    out_data = 1.0 / a.data

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g * (-out_data * out_data))

    return _node(out_data, (a,), backward_fn)


def matmul(a, b) -> Tensor:
    """Matrix product; leading batch dims follow numpy broadcasting."""
    a = as_tensor(a)
    b = as_tensor(b)
    sa, sb = a.data.shape, b.data.shape
    if len(sa) < 2 or len(sb) < 2 or sa[-1] != sb[-2]:
        raise ShapeError(f"matmul shape mismatch: {sa} @ {sb}")
    try:
        out_data = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul shape mismatch: {sa} @ {sb}") from exc

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g @ np.swapaxes(b.data, -1, -2), sa))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(np.swapaxes(a.data, -1, -2) @ g, sb))

    return _node(out_data, (a, b), backward_fn)


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.data.ndim)))
    out_data = np.transpose(a.data, axes)
    inv = np.argsort(axes)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(np.transpose(g, inv))

    return _node(out_data, (a,), backward_fn)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    in_shape = a.data.shape
    out_data = a.data.reshape(shape)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g.reshape(in_shape))

    return _node(out_data, (a,), backward_fn)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward_fn(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                t.accumulate_grad(g[tuple(idx)])

    return _node(out_data, tuple(tensors), backward_fn)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)
    out_data = a.data[key]

    def backward_fn(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            np.add.at(full, key, g)
            a.accumulate_grad(full)

    return _node(out_data, (a,), backward_fn)


def gather_rows(a, index: np.ndarray) -> Tensor:
    """Pick one row per batch item: (B, S, D) x (B,) -> (B, D)."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    batch = np.arange(a.data.shape[0])
    out_data = a.data[batch, index]

    def backward_fn(g):
        if a.requires_grad:
            full = np.zeros_like(a.data)
            full[batch, index] = g
            a.accumulate_grad(full)

    return _node(out_data, (a,), backward_fn)


def embedding(table, ids: np.ndarray) -> Tensor:
    """Row lookup (..., ) int ids into (V, D) table -> (..., D)."""
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ShapeError(f"embedding id out of range for table of {table.data.shape[0]} rows")
    out_data = table.data[ids]

    def backward_fn(g):
        if table.requires_grad:
            full = np.zeros_like(table.data)
            np.add.at(full, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
            table.accumulate_grad(full)

    return _node(out_data, (table,), backward_fn)


def t_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if a.requires_grad:
            if axis is None:
                a.accumulate_grad(np.broadcast_to(g, a.data.shape).copy())
            else:
                gg = g if keepdims else np.expand_dims(g, axis)
                a.accumulate_grad(np.broadcast_to(gg, a.data.shape).copy())

    return _node(out_data, (a,), backward_fn)


def t_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    n = a.data.size if axis is None else a.data.shape[axis]
    return mul(t_sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def t_exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_data)

    return _node(out_data, (a,), backward_fn)


def t_log(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return _node(out_data, (a,), backward_fn)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                        np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))

    def backward_fn(g):
        if a.requires_grad:
            a.accumulate_grad(g * out_data * (1.0 - out_data))

    return _node(out_data, (a,), backward_fn)


def softplus(a) -> Tensor:
    """log(1 + e^x), computed without overflow; d/dx = sigmoid(x)."""
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0.0) + np.log1p(np.exp(-np.abs(a.data)))

    def backward_fn(g):
        if a.requires_grad:
            sig = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                           np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
            a.accumulate_grad(g * sig)

    return _node(out_data, (a,), backward_fn)


def gelu(a) -> Tensor:
    """Exact GELU: 0.5 x (1 + erf(x / sqrt(2)))."""
    a = as_tensor(a)
    inv_sqrt2 = 0.7071067811865476
    inv_sqrt2pi = 0.3989422804014327
    phi = 0.5 * (1.0 + erf(a.data * inv_sqrt2))
    out_data = a.data * phi

    def backward_fn(g):
        if a.requires_grad:
            dens = inv_sqrt2pi * np.exp(-0.5 * a.data * a.data)
            a.accumulate_grad(g * (phi + a.data * dens))

    return _node(out_data, (a,), backward_fn)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    out_data = np.clip(a.data, lo, hi)

    def backward_fn(g):
        if a.requires_grad:
            inside = (a.data >= lo) & (a.data <= hi)
            a.accumulate_grad(g * inside.astype(a.data.dtype))

    return _node(out_data, (a,), backward_fn)


def softmax(a, axis: int = -1) -> Tensor:
    """Stable softmax with max subtraction. Rejects NaN/+inf input.

    -inf-style entries (additive masking with MASK_NEG) are fine: their
    exponent underflows to exactly 0, which keeps masked positions from
    contributing even a single ULP.
    """
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    if not np.isfinite(m).all():
        raise FiniteError("softmax input contains NaN or +inf")
    e = np.exp(a.data - m)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def backward_fn(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            a.accumulate_grad((g - dot) * out_data)

    return _node(out_data, (a,), backward_fn)


def layer_norm(a, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to mean 0 / variance 1, then affine."""
    a = as_tensor(a)
    gain = as_tensor(gain, like=a)
    bias = as_tensor(bias, like=a)
    d = a.data.shape[-1]
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = xhat * gain.data + bias.data

    def backward_fn(g):
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).reshape(-1, d).sum(axis=0))
        if bias.requires_grad:
            bias.accumulate_grad(g.reshape(-1, d).sum(axis=0))
        if a.requires_grad:
            gx = g * gain.data
            mean_gx = gx.mean(axis=-1, keepdims=True)
            mean_gxh = (gx * xhat).mean(axis=-1, keepdims=True)
            a.accumulate_grad(inv * (gx - mean_gx - xhat * mean_gxh))

    return _node(out_data, (a, gain, bias), backward_fn)


def normalize_rows(a, eps: float = 1e-12) -> Tensor:
    """L2-normalize the last axis; zero rows are guarded by eps."""
    a = as_tensor(a)
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    norm = np.maximum(norm, eps)
    out_data = a.data / norm

    def backward_fn(g):
        if a.requires_grad:
            dot = (g * out_data).sum(axis=-1, keepdims=True)
            a.accumulate_grad((g - out_data * dot) / norm)

    return _node(out_data, (a,), backward_fn)


def cross_entropy_rows(logits, targets: np.ndarray, weights: np.ndarray | None = None) -> Tensor:
    """Mean softmax cross-entropy over rows of (N, V) logits.

    `weights` (N,) selects/weights rows; the result is sum(w*ce)/sum(w) so a
    0/1 mask gives a per-selected-row mean. Rows with weight 0 contribute
    nothing, gradients included.
    """
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    n, v = logits.data.shape
    if targets.shape != (n,):
        raise ShapeError(f"targets shape {targets.shape} does not match {n} logit rows")
    if weights is None:
        weights = np.ones(n, dtype=logits.data.dtype)
    else:
        weights = np.asarray(weights, dtype=logits.data.dtype)
    wsum = weights.sum()
    if wsum <= 0:
        raise ValueError("cross_entropy_rows: no rows selected by weights")
    m = logits.data.max(axis=1, keepdims=True)
    shifted = logits.data - m
    lse = np.log(np.exp(shifted).sum(axis=1)) + m[:, 0]
    ce = lse - logits.data[np.arange(n), targets]
    out_data = np.asarray((weights * ce).sum() / wsum, dtype=logits.data.dtype)

    def backward_fn(g):
        if logits.requires_grad:
            p = np.exp(shifted)
            p /= p.sum(axis=1, keepdims=True)
            p[np.arange(n), targets] -= 1.0
            logits.accumulate_grad(g * p * (weights / wsum)[:, None])

    return _node(out_data, (logits,), backward_fn)


# ---------------------------------------------------------------------------
# backward pass


def backward(loss: Tensor) -> None:
    """Reverse-mode sweep from a scalar loss.

    Fills .grad on every reachable requires_grad tensor. Grads accumulate
    across calls; reset with zero_grad() between optimizer steps.
    """
    if loss.data.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if not loss.requires_grad:
        return

    topo: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited and p.requires_grad:
                stack.append((p, False))

    loss.accumulate_grad(np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None:
            node._backward(node.grad)


def zero_grads(params) -> None:
    """Reset gradient buffers to zeros for a dict or iterable of tensors."""
    values = params.values() if isinstance(params, dict) else params
    for p in values:
        p.zero_grad()


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(f, xs, h: float = 1e-4, eps: float = 1e-6) -> float:
    """Max relative error between analytic gradients and central differences.

    `f` maps the tensors to a scalar Tensor; `xs` is a Tensor, a list, or a
    dict of Tensors (float64 strongly recommended: float32 cannot separate
    finite-difference noise from real gradient bugs at the 1e-4 level).
    Relative error per coordinate is |a - n| / max(|a|, |n|, eps).
    """
    if isinstance(xs, Tensor):
        tensors = [xs]
    elif isinstance(xs, dict):
        tensors = list(xs.values())
    else:
        tensors = list(xs)
    for t in tensors:
        t.zero_grad()

    loss = f()
    if loss.data.size != 1:
        raise GraphError("grad_check target must be scalar")
    if not np.isfinite(loss.data).all():
        raise FiniteError("grad_check: function returned non-finite value")
    backward(loss)

    worst = 0.0
    with no_grad():
        for t in tensors:
            if not t.requires_grad:
                continue
            flat = t.data.reshape(-1)
            gflat = t.grad.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + h
                fp = float(f().data)
                flat[i] = orig - h
                fm = float(f().data)
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise FiniteError("grad_check: function returned non-finite value")
                numeric = (fp - fm) / (2.0 * h)
                analytic = float(gflat[i])
                denom = max(abs(analytic), abs(numeric), eps)
                worst = max(worst, abs(analytic - numeric) / denom)
    return worst
