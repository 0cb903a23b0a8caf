"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every primitive builds its output eagerly and records a closure that maps the
output cotangent to input cotangents. ``backward`` orders the recorded graph
into a :class:`Tape` and replays it in reverse.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels
from .errors import ConfigError, ContractError, DimensionError, LabelError, NumericError

DTYPE = np.float64
LN_EPS = 1e-5


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None):
        data = np.array(values, dtype=DTYPE)
        if 0 in data.shape:
            raise DimensionError(f"tensor shape must be positive, got {data.shape}")
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def _result(cls, data: np.ndarray, parents: tuple[Tensor, ...], backward) -> Tensor:
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Tape:
    """Graph nodes in topological order (inputs before outputs)."""

    nodes: list[Tensor] = field(default_factory=list)

    @classmethod
    def record(cls, root: Tensor) -> Tape:
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        return cls(order)

    def replay(self, root: Tensor, seed: np.ndarray) -> None:
        cotangents: dict[int, np.ndarray] = {id(root): seed}
        for node in reversed(self.nodes):
            g = cotangents.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                prev = cotangents.get(key)
                cotangents[key] = pg if prev is None else prev + pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.ndim != 0:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape.record(loss).replay(loss, np.ones((), dtype=DTYPE))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_check(a: Tensor, b: Tensor, kind: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


# --- primitives -------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes; leading axes broadcast."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def _bw(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(ad @ bd, (a, b), _bw)


def affine(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x``; ``w`` is [in x out]."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise DimensionError(f"affine: cannot multiply {x.shape} by {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"affine: bias shape {b.shape} != ({w.shape[1]},)")
    wd = w.data
    n_in, n_out = wd.shape
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, n_in)
    out = x2 @ wd
    if b is not None:
        out += b.data
    out = out.reshape(lead + (n_out,))

    def _bw(g):
        g2 = g.reshape(-1, n_out)
        gx = (g2 @ wd.T).reshape(lead + (n_in,)) if x.requires_grad else None
        gw = x2.T @ g2 if w.requires_grad else None
        if b is None:
            return gx, gw
        return gx, gw, (g2.sum(axis=0) if b.requires_grad else None)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor._result(out, parents, _bw)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "add")
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb))
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "sub")
    sa, sb = a.shape, b.shape
    return Tensor._result(
        a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb))
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_check(a, b, "mul")
    ad, bd = a.data, b.data

    def _bw(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return Tensor._result(ad * bd, (a, b), _bw)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return Tensor._result(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    # subgradient 0 at exactly 0
    mask = a.data > 0
    return Tensor._result(np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    shape = a.shape
    return Tensor._result(
        np.asarray(a.data.mean()), (a,), lambda g: (np.full(shape, g / n),)
    )


def sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    shape = a.shape

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), _bw)


def elementwise(kind: str, a: Tensor, b=None) -> Tensor:
    """Dispatch one of the pointwise kinds by name."""
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "scale":
        return scale(a, b)
    if kind == "relu":
        return relu(a)
    if kind == "mean":
        return mean(a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.ndim <= axis < max(x.ndim, 1):
        raise DimensionError(f"softmax: axis {axis} out of range for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return Tensor._result(y, (x,), _bw)


def multihead_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """Scaled dot-product attention run independently on ``num_heads`` column blocks.

    ``q`` is [B, n_q, d]; ``k`` and ``v`` are [B, n_k, d]. Head ``j`` uses
    columns ``j*d/h:(j+1)*d/h``; head outputs are concatenated in that order.
    The attention weights of the last call are kept on the output as
    ``weights`` ([B, h, n_q, n_k]).
    """
    if q.ndim != 3:
        raise DimensionError(f"multihead_attention: q must be [B x n x d], got {q.shape}")
    B, n_q, d = q.shape
    n_k = k.shape[1] if k.ndim == 3 else -1
    if k.shape != (B, n_k, d) or v.shape != (B, n_k, d):
        raise DimensionError(f"multihead_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    if num_heads < 1 or d % num_heads:
        raise ConfigError(f"model dim {d} is not divisible by {num_heads} heads")
    qd = np.ascontiguousarray(q.data)
    kd = np.ascontiguousarray(k.data)
    vd = np.ascontiguousarray(v.data)
    out, w = _kernels.mha_fwd(qd, kd, vd, num_heads)

    def _bw(g):
        return _kernels.mha_bwd(np.ascontiguousarray(g), qd, kd, vd, w, num_heads)

    return Tensor._result(out, (q, k, v), _bw)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = LN_EPS) -> Tensor:
    """Normalize the last axis to zero mean and unit population variance."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: last dim {d} does not match gamma {gamma.shape} / beta {beta.shape}"
        )
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    shape = x.shape
    gd = gamma.data
    out, xhat, inv = _kernels.layer_norm_fwd(
        np.ascontiguousarray(x.data.reshape(-1, d)), gd, beta.data, float(eps)
    )

    def _bw(g):
        gx, ggamma, gbeta = _kernels.layer_norm_bwd(
            np.ascontiguousarray(g.reshape(-1, d)), xhat, inv, gd
        )
        return gx.reshape(shape), ggamma, gbeta

    return Tensor._result(out.reshape(shape), (x, gamma, beta), _bw)


def _check_labels(labels, n_rows: int, n_classes: int, what: str = "label") -> np.ndarray:
    lab = np.asarray(labels, dtype=np.int64).reshape(-1)
    if lab.shape[0] != n_rows:
        raise DimensionError(f"{what}s: expected {n_rows} entries, got {lab.shape[0]}")
    bad = np.flatnonzero((lab < 0) | (lab >= n_classes))
    if bad.size:
        i = int(bad[0])
        raise LabelError(f"{what} {int(lab[i])} at index {i} outside [0, {n_classes})")
    return lab


def cross_entropy_loss(logits: Tensor, labels) -> Tensor:
    """Mean over rows of -log softmax(logits)[label], via log-sum-exp."""
    if logits.ndim != 2:
        raise DimensionError(f"cross_entropy_loss: logits must be [B x N_C], got {logits.shape}")
    B, C = logits.shape
    lab = _check_labels(labels, B, C)
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    rows = np.arange(B)
    loss = -logp[rows, lab].mean()

    def _bw(g):
        p = np.exp(logp)
        p[rows, lab] -= 1.0
        return (p * (g / B),)

    return Tensor._result(np.asarray(loss), (logits,), _bw)


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = a.shape
    return Tensor._result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return Tensor._result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = tuple(tensors)
    shapes = {t.shape for t in tensors}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in tensors], axis=axis)

    def _bw(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor._result(out, tensors, _bw)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather slices along ``axis``; repeated indices accumulate in backward."""
    idx = np.asarray(indices, dtype=np.int64)
    shape = a.shape

    def _bw(g):
        ga = np.zeros(shape, dtype=DTYPE)
        np.add.at(ga, (slice(None),) * (axis % len(shape)) + (idx,), g)
        return (ga,)

    return Tensor._result(np.take(a.data, idx, axis=axis), (a,), _bw)


def select_rows(a: Tensor, index) -> Tensor:
    """out[..., b, :] = a[index[b], ..., b, :] for a stacked [K x B x C] tensor."""
    idx = np.asarray(index, dtype=np.int64)
    K, B = a.shape[0], a.shape[1]
    if idx.shape != (B,):
        raise DimensionError(f"select_rows: index shape {idx.shape} != ({B},)")
    rows = np.arange(B)
    shape = a.shape

    def _bw(g):
        ga = np.zeros(shape, dtype=DTYPE)
        ga[idx, rows] = g
        return (ga,)

    return Tensor._result(a.data[idx, rows], (a,), _bw)


# --- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int
    excluded: list[tuple[int, tuple[int, ...]]]
    worst: tuple[int, tuple[int, ...]] | None = None

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} max_rel_error={self.max_rel_error:.3e} checked={self.n_checked} "
            f"excluded={len(self.excluded)}"
        )


def _scalar(f, inputs) -> float:
    out = f(*inputs)
    v = float(out.data) if isinstance(out, Tensor) else float(out)
    if not math.isfinite(v):
        raise NumericError(f"gradient_check: function returned non-finite value {v}")
    return v


def gradient_check(
    f: Callable[..., Tensor],
    x: Tensor | Iterable[Tensor],
    h: float = 1e-4,
    tol: float = 1e-5,
    abs_floor: float = 1e-7,
    kink_tol: float = 1e-3,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*inputs)`` to central differences.

    Relative error per coordinate is ``|a - n| / max(|a|, |n|, abs_floor)``.
    A coordinate whose one-sided slopes disagree by more than ``kink_tol``
    (relative) sits on a non-differentiable point; it is excluded when the
    analytic value disagrees with the central difference there.
    """
    inputs = [x] if isinstance(x, Tensor) else list(x)
    for t in inputs:
        t.zero_grad()
    out = f(*inputs)
    if not isinstance(out, Tensor) or out.data.ndim != 0:
        raise ContractError("gradient_check: f must return a scalar Tensor")
    if not math.isfinite(float(out.data)):
        raise NumericError("gradient_check: non-finite function value")
    backward(out)
    analytic = [
        t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs
    ]
    if not all(np.all(np.isfinite(a)) for a in analytic):
        raise NumericError("gradient_check: non-finite analytic gradient")
    f0 = float(out.data)

    worst_err, worst = 0.0, None
    excluded: list[tuple[int, tuple[int, ...]]] = []
    n_checked = 0
    for ti, t in enumerate(inputs):
        flat = t.data.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            fp = _scalar(f, inputs)
            flat[j] = orig - h
            fm = _scalar(f, inputs)
            flat[j] = orig
            num = (fp - fm) / (2 * h)
            a = analytic[ti].reshape(-1)[j]
            err = abs(a - num) / max(abs(a), abs(num), abs_floor)
            idx = tuple(int(i) for i in np.unravel_index(j, t.shape)) if t.ndim else ()
            if err >= tol:
                fwd, bwd = (fp - f0) / h, (f0 - fm) / h
                if abs(fwd - bwd) > kink_tol * max(1.0, abs(fwd), abs(bwd)):
                    excluded.append((ti, idx))
                    continue
            n_checked += 1
            if err > worst_err:
                worst_err, worst = err, (ti, idx)
    for t in inputs:
        t.zero_grad()
    return GradCheckReport(float(worst_err), bool(worst_err < tol), n_checked, excluded, worst)
