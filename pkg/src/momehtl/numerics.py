"""Small reverse-mode autodiff over numpy arrays, plus a finite-difference oracle.

Every op records a closure that maps the upstream gradient to gradients for
its parents. ``grad`` walks the recorded graph and returns fresh arrays, so
parameters are never mutated by differentiation.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.special import erf

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation passes)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    """An immutable array node in a differentiable computation."""

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @classmethod
    def from_op(cls, data, parents: Sequence["Tensor"], backward) -> "Tensor":
        """Create the output of an op.

        ``backward(g)`` must return one gradient (or None) per parent.
        """
        out = cls(data)
        if _GRAD_ENABLED and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- arithmetic --------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self, other
        return Tensor.from_op(
            a.data + b.data, (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __neg__(self):
        return Tensor.from_op(-self.data, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return as_tensor(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = as_tensor(other, self.dtype)
        a, b = self, other
        return Tensor.from_op(
            a.data * b.data, (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other ** -1.0
        return self * (1.0 / other)

    def __pow__(self, exponent: float):
        x = self.data
        return Tensor.from_op(
            x ** exponent, (self,), lambda g: (g * exponent * x ** (exponent - 1),)
        )

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        shape = self.shape
        dtype = self.dtype

        parts = idx if isinstance(idx, tuple) else (idx,)
        fancy = any(isinstance(p, (np.ndarray, list)) for p in parts)

        def backward(g):
            out = np.zeros(shape, dtype=dtype)
            if fancy:
                np.add.at(out, idx, g)
            else:
                out[idx] = g
            return (out,)

        return Tensor.from_op(self.data[idx], (self,), backward)

    # -- shape ops ---------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return Tensor.from_op(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return Tensor.from_op(self.data.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return Tensor.from_op(
            np.swapaxes(self.data, a, b), (self,), lambda g: (np.swapaxes(g, a, b),)
        )

    def broadcast_to(self, shape) -> "Tensor":
        old = self.shape
        return Tensor.from_op(
            np.broadcast_to(self.data, shape).copy(), (self,), lambda g: (_unbroadcast(g, old),)
        )

    # -- reductions --------------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor.from_op(self.data.sum(axis=axis, keepdims=keepdims), (self,), backward)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = math.prod(self.shape[a] for a in axes)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    # -- elementwise -------------------------------------------------------
    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        return Tensor.from_op(y, (self,), lambda g: (g * y,))

    def log(self) -> "Tensor":
        x = self.data
        return Tensor.from_op(np.log(x), (self,), lambda g: (g / x,))

    def clamp_min(self, lo: float) -> "Tensor":
        x = self.data
        return Tensor.from_op(np.maximum(x, lo), (self,), lambda g: (g * (x > lo),))


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(np.array(data), requires_grad=True, name=name)


# ---------------------------------------------------------------------------
# core ops
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 2:
        raise ValueError(f"matmul needs a.ndim >= 1 and b.ndim >= 2, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    vec = ad.ndim == 1

    def backward(g):
        a2 = ad[None, :] if vec else ad
        g2 = g[..., None, :] if vec else g
        ga = g2 @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if vec:
            ga = ga.reshape(ga.shape[:-2] + ga.shape[-1:])
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return Tensor.from_op(ad @ bd, (a, b), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as exc:
        raise ValueError(f"add shape mismatch: {a.shape} + {b.shape}") from exc
    return a + b


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return as_tensor(x).mean(axis=axis, keepdims=keepdims)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty sequence")
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat shape mismatch: {[t.shape for t in tensors]}") from exc
    splits = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return Tensor.from_op(data, tensors, backward)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if len({t.shape for t in tensors}) > 1:
        raise ValueError(f"stack shape mismatch: {[t.shape for t in tensors]}")
    data = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(tensors)))

    return Tensor.from_op(data, tensors, backward)


_SQRT1_2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x) -> Tensor:
    """Exact (erf) GELU."""
    x = as_tensor(x)
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _SQRT1_2))
    y = (xd * cdf).astype(xd.dtype)

    def backward(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * xd * xd)
        return ((g * (cdf + xd * pdf)).astype(xd.dtype),)

    return Tensor.from_op(y, (x,), backward)


def layer_norm(x, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean and unit variance (no affine)."""
    x = as_tensor(x)
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def backward(g):
        gm = g.mean(axis=-1, keepdims=True)
        gx = (g * xhat).mean(axis=-1, keepdims=True)
        return (inv * (g - gm - xhat * gx),)

    return Tensor.from_op(xhat, (x,), backward)


def _check_temperature(temperature: float) -> None:
    if not temperature > 0:
        raise ValueError(f"temperature must be positive, got {temperature}")


def softmax(v, temperature: float = 1.0, axis: int = -1) -> Tensor:
    """Max-shifted softmax of ``v / temperature`` along ``axis``."""
    _check_temperature(temperature)
    v = as_tensor(v)
    z = v.data / temperature
    e = np.exp(z - z.max(axis=axis, keepdims=True))
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return ((s * (g - (g * s).sum(axis=axis, keepdims=True))) / temperature,)

    return Tensor.from_op(s, (v,), backward)


def log_softmax(v, temperature: float = 1.0, axis: int = -1) -> Tensor:
    _check_temperature(temperature)
    v = as_tensor(v)
    z = v.data / temperature
    shifted = z - z.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def backward(g):
        return ((g - s * g.sum(axis=axis, keepdims=True)) / temperature,)

    return Tensor.from_op(out, (v,), backward)


def kl_divergence(p, q, eps: float = 1e-8) -> Tensor:
    """sum_i p_i * ln(max(p_i, eps) / max(q_i, eps)) over the last axis."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence length mismatch: {p.shape} vs {q.shape}")
    return (p * (p.clamp_min(eps).log() - q.clamp_min(eps).log())).sum(axis=-1)


def kl_from_logits(teacher, student, temperature: float = 1.0, eps: float = 1e-8) -> Tensor:
    """KL(softmax(teacher) || softmax(student)) with the same eps clamp as
    :func:`kl_divergence`, evaluated in log space."""
    log_eps = math.log(eps)
    lt = log_softmax(teacher, temperature)
    ls = log_softmax(student, temperature)
    return (lt.exp() * (lt.clamp_min(log_eps) - ls.clamp_min(log_eps))).sum(axis=-1)


def cross_entropy(logits, label) -> Tensor:
    """-log_softmax(logits)[label]; batched when ``label`` is an int array."""
    logits = as_tensor(logits)
    labels = np.asarray(label)
    k = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"label shape {labels.shape} does not match logits {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= k):
        raise ValueError(f"label out of range for {k} classes: {labels}")
    lp = log_softmax(logits)
    if labels.ndim == 0:
        return -lp[int(labels)]
    rows = np.indices(labels.shape)
    return -lp[tuple(rows) + (labels,)]


def mse_pair(a, b) -> Tensor:
    """Unaveraged squared L2 distance over the last axis."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape[-1:] != b.shape[-1:]:
        raise ValueError(f"mse_pair length mismatch: {a.shape} vs {b.shape}")
    d = a - b
    return (d * d).sum(axis=-1)


# ---------------------------------------------------------------------------
# differentiation
# ---------------------------------------------------------------------------

def _toposort(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack_.append((p, False))
    return order


def grad(loss: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Gradients of scalar ``loss`` w.r.t. each tensor in ``wrt``.

    Tensors the loss does not depend on get zero arrays.
    """
    if loss.data.size != 1:
        raise ValueError(f"grad needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_toposort(loss)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return [
        np.asarray(grads.get(id(t), np.zeros_like(t.data)), dtype=t.dtype).reshape(t.shape)
        for t in wrt
    ]


def finite_diff_gradient(f: Callable[[np.ndarray], float], x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``."""
    if not h > 0:
        raise ValueError("step h must be positive")
    x = np.array(x, dtype=np.float64)
    out = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = out.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return out


@dataclass
class GradReport:
    """Outcome of comparing analytic gradients with central differences."""

    max_abs_diff: float = 0.0
    max_rel_diff: float = 0.0
    worst: dict[str, tuple[int, float]] = field(default_factory=dict)
    failures: list[tuple[str, int, float, float]] = field(default_factory=list)
    checked: int = 0
    tol: float = 1e-4

    @property
    def passed(self) -> bool:
        return not self.failures

    def summary(self) -> str:
        status = "PASS" if self.passed else f"FAIL ({len(self.failures)} coords)"
        return (f"{status}: {self.checked} coords, max_abs={self.max_abs_diff:.3e}, "
                f"max_rel={self.max_rel_diff:.3e}, tol={self.tol:g}")


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor] | Sequence[Tensor],
    h: float = 1e-5,
    tol: float = 1e-4,
    max_coords: int | None = None,
    seed: int = 0,
    richardson: bool = False,
) -> GradReport:
    """Compare ``grad(loss_fn(), params)`` with central differences.

    ``loss_fn`` is re-evaluated with each coordinate nudged in place (and then
    restored). ``max_coords`` caps how many coordinates are probed per
    parameter tensor; small tensors are always checked in full.
    """
    if not isinstance(params, Mapping):
        params = {f"p{i}": p for i, p in enumerate(params)}
    report = GradReport(tol=tol)
    if not params:
        return report
    names = list(params)
    tensors = [params[n] for n in names]
    analytic = grad(loss_fn(), tensors)
    rng = np.random.default_rng(seed)
    for name, t, ga in zip(names, tensors, analytic):
        if not t.data.flags.c_contiguous:
            raise ValueError(f"parameter {name} is not contiguous")
        flat = t.data.reshape(-1)
        n = flat.size
        if max_coords is not None and n > max_coords:
            idx = np.sort(rng.choice(n, size=max_coords, replace=False))
        else:
            idx = np.arange(n)
        ga_flat = ga.reshape(-1)
        worst = (-1, 0.0)
        for i in idx:
            orig = flat[i]

            def central(step):
                flat[i] = orig + step
                fp = loss_fn().item()
                flat[i] = orig - step
                fm = loss_fn().item()
                flat[i] = orig
                return (fp - fm) / (2.0 * step)

            if richardson:
                num = (4.0 * central(h / 2) - central(h)) / 3.0
            else:
                num = central(h)
            a = float(ga_flat[i])
            diff = abs(a - num)
            rel = diff / max(abs(a), abs(num), 1e-8)
            report.checked += 1
            report.max_abs_diff = max(report.max_abs_diff, diff)
            report.max_rel_diff = max(report.max_rel_diff, rel)
            if rel > worst[1] or worst[0] < 0:
                worst = (int(i), rel)
            if rel > tol:
                report.failures.append((name, int(i), a, num))
        report.worst[name] = worst
    return report

