"""Differentiable computation substrate.

A small reverse-mode engine over float64 numpy arrays. The primitive set is
exactly what the flow model needs: affine maps, relu/sigmoid, softmax and
log-softmax, layer norm, scaled dot-product attention, elementwise arithmetic,
reductions, log, concat and basic indexing. Gradients are exact and the
backward pass visits nodes in a fixed topological order, so repeated runs on
identical inputs are bit-identical.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .errors import NonFiniteValue, ShapeMismatch

__all__ = [
    "Tensor", "ParamGroup", "backward", "grad_check",
    "affine", "relu", "sigmoid", "softmax", "log_softmax", "layer_norm",
    "scaled_dot_attention", "concat", "maximum", "log", "exp", "sqrt",
]


def _as_array(values) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    return arr


def _check_finite(arr: np.ndarray, op: str) -> None:
    # One-pass check: the sum of an array is finite iff every entry is,
    # at the magnitudes this model produces.
    if not np.isfinite(arr.sum()):
        raise NonFiniteValue(f"non-finite values produced by '{op}'")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """A node in the recorded computation: value, graph edges, gradient slot."""

    __slots__ = ("values", "grad", "requires_grad", "_parents", "_vjp", "name")

    def __init__(self, values, requires_grad=False, _parents=(), _vjp=None,
                 name=None, _op="tensor"):
        self.values = _as_array(values)
        _check_finite(self.values, _op)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents: tuple[Tensor, ...] = _parents
        self._vjp = _vjp  # grad_out -> tuple of parent grads (None for skips)
        self.name = name

    # -- basics ---------------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.values.shape}{tag})"

    def zero_grad(self):
        self.grad = None

    def detach(self) -> np.ndarray:
        return self.values.copy()

    # -- arithmetic -------------------------------------------------------------

    def __add__(self, other):
        other = _wrap(other)
        out_vals = self.values + other.values

        def vjp(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(g, other.shape))

        return Tensor(out_vals, _parents=(self, other), _vjp=vjp, _op="add")

    __radd__ = __add__

    def __neg__(self):
        return Tensor(-self.values, _parents=(self,), _vjp=lambda g: (-g,), _op="neg")

    def __sub__(self, other):
        other = _wrap(other)
        out_vals = self.values - other.values

        def vjp(g):
            return (_unbroadcast(g, self.shape), _unbroadcast(-g, other.shape))

        return Tensor(out_vals, _parents=(self, other), _vjp=vjp, _op="sub")

    def __rsub__(self, other):
        return _wrap(other).__sub__(self)

    def __mul__(self, other):
        other = _wrap(other)
        out_vals = self.values * other.values
        a_vals, b_vals = self.values, other.values

        def vjp(g):
            return (_unbroadcast(g * b_vals, self.shape),
                    _unbroadcast(g * a_vals, other.shape))

        return Tensor(out_vals, _parents=(self, other), _vjp=vjp, _op="mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other)
        out_vals = self.values / other.values
        a_vals, b_vals = self.values, other.values

        def vjp(g):
            return (_unbroadcast(g / b_vals, self.shape),
                    _unbroadcast(-g * a_vals / (b_vals * b_vals), other.shape))

        return Tensor(out_vals, _parents=(self, other), _vjp=vjp, _op="div")

    def __rtruediv__(self, other):
        return _wrap(other).__truediv__(self)

    def __pow__(self, p: float):
        p = float(p)
        x = self.values
        out_vals = x ** p

        def vjp(g):
            with np.errstate(divide="ignore", invalid="ignore"):
                d = p * x ** (p - 1.0)
            d = np.where(np.isfinite(d), d, 0.0)
            return (g * d,)

        return Tensor(out_vals, _parents=(self,), _vjp=vjp, _op="pow")

    def __matmul__(self, other):
        other = _wrap(other)
        a, b = self.values, other.values
        if a.ndim == 0 or b.ndim == 0:
            raise ShapeMismatch("matmul requires operands with ndim >= 1")
        a2 = a[None, :] if a.ndim == 1 else a
        b2 = b[:, None] if b.ndim == 1 else b
        if a2.shape[-1] != b2.shape[-2]:
            raise ShapeMismatch(f"matmul inner dims {a2.shape} x {b2.shape}")
        out2 = a2 @ b2
        out_vals = out2
        if b.ndim == 1:
            out_vals = out_vals[..., 0]
        if a.ndim == 1:
            out_vals = out_vals[..., 0, :] if b.ndim > 1 else out_vals[..., 0]

        def vjp(g):
            g2 = g.reshape(out2.shape)
            da = _unbroadcast(g2 @ np.swapaxes(b2, -1, -2), a2.shape)
            db = _unbroadcast(np.swapaxes(a2, -1, -2) @ g2, b2.shape)
            return (da.reshape(a.shape), db.reshape(b.shape))

        return Tensor(out_vals, _parents=(self, other), _vjp=vjp, _op="matmul")

    def __getitem__(self, key):
        out_vals = self.values[key]
        shape = self.shape

        def vjp(g):
            buf = np.zeros(shape, dtype=np.float64)
            np.add.at(buf, key, g)
            return (buf,)

        return Tensor(out_vals, _parents=(self,), _vjp=vjp, _op="getitem")

    # -- shape ops --------------------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        out_vals = self.values.reshape(shape)

        def vjp(g):
            return (g.reshape(old),)

        return Tensor(out_vals, _parents=(self,), _vjp=vjp, _op="reshape")

    def swapaxes(self, a: int, b: int):
        out_vals = np.swapaxes(self.values, a, b)

        def vjp(g):
            return (np.swapaxes(g, a, b),)

        return Tensor(out_vals, _parents=(self,), _vjp=vjp, _op="swapaxes")

    def broadcast_to(self, shape):
        shape = tuple(shape)
        out_vals = np.broadcast_to(self.values, shape).copy()
        old = self.shape

        def vjp(g):
            return (_unbroadcast(g, old),)

        return Tensor(out_vals, _parents=(self,), _vjp=vjp, _op="broadcast_to")

    # -- reductions -------------------------------------------------------------

    def sum(self, axis=None, keepdims=False):
        out_vals = self.values.sum(axis=axis, keepdims=keepdims)
        shape = self.shape

        def vjp(g):
            if axis is None:
                return (np.broadcast_to(g, shape).copy(),)
            if not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor(out_vals, _parents=(self,), _vjp=vjp, _op="sum")

    def mean(self, axis=None, keepdims=False):
        n = self.size if axis is None else self.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    # -- autodiff ---------------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from this scalar; accumulates into leaf `.grad`."""
        if self.size != 1:
            raise ShapeMismatch("backward requires a scalar loss node")
        order = _toposort(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.values)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                # leaf: accumulate
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root: Tensor) -> list[Tensor]:
    """Reverse topological order over nodes that require grad (deterministic)."""
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    order.reverse()
    return order


# -- parameter grouping ---------------------------------------------------------


@dataclass
class ParamGroup:
    """Named set of learnable tensors sharing a learning rate and decay."""

    name: str
    tensors: dict[str, Tensor] = field(default_factory=dict)
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    frozen: bool = False

    def __post_init__(self):
        for t in self.tensors.values():
            t.requires_grad = not self.frozen

    def add(self, name: str, values) -> Tensor:
        t = Tensor(values, requires_grad=not self.frozen, name=f"{self.name}.{name}")
        self.tensors[name] = t
        return t

    def set_frozen(self, frozen: bool):
        self.frozen = frozen
        for t in self.tensors.values():
            t.requires_grad = not frozen

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors.values())


def backward(loss: Tensor, groups=None) -> dict[str, np.ndarray]:
    """Run reverse mode from `loss`; return grads for every non-frozen parameter.

    Parameters unreachable from the loss get a zero gradient and a warning.
    Frozen groups produce no entries.
    """
    for g in groups or ():
        g.zero_grad()
    loss.backward()
    grads: dict[str, np.ndarray] = {}
    for group in groups or ():
        if group.frozen:
            continue
        for key, t in group.tensors.items():
            if t.grad is None:
                warnings.warn(
                    f"parameter '{group.name}.{key}' is not reachable from the loss;"
                    " gradient set to zero",
                    stacklevel=2,
                )
                t.grad = np.zeros_like(t.values)
            grads[f"{group.name}.{key}"] = t.grad
    return grads


# -- primitives ------------------------------------------------------------------


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w + b."""
    return (x @ w) + b


def relu(x: Tensor) -> Tensor:
    x = _wrap(x)
    mask = x.values > 0.0
    out_vals = np.where(mask, x.values, 0.0)

    def vjp(g):
        return (g * mask,)

    return Tensor(out_vals, _parents=(x,), _vjp=vjp, _op="relu")


def sigmoid(x: Tensor) -> Tensor:
    x = _wrap(x)
    v = x.values
    out_vals = np.where(v >= 0, 1.0 / (1.0 + np.exp(-np.abs(v))),
                        np.exp(-np.abs(v)) / (1.0 + np.exp(-np.abs(v))))

    def vjp(g):
        return (g * out_vals * (1.0 - out_vals),)

    return Tensor(out_vals, _parents=(x,), _vjp=vjp, _op="sigmoid")


def log(x: Tensor) -> Tensor:
    x = _wrap(x)
    out_vals = np.log(x.values)
    xv = x.values

    def vjp(g):
        return (g / xv,)

    return Tensor(out_vals, _parents=(x,), _vjp=vjp, _op="log")


def exp(x: Tensor) -> Tensor:
    x = _wrap(x)
    out_vals = np.exp(x.values)

    def vjp(g):
        return (g * out_vals,)

    return Tensor(out_vals, _parents=(x,), _vjp=vjp, _op="exp")


def sqrt(x: Tensor) -> Tensor:
    x = _wrap(x)
    out_vals = np.sqrt(x.values)

    def vjp(g):
        return (g * 0.5 / out_vals,)

    return Tensor(out_vals, _parents=(x,), _vjp=vjp, _op="sqrt")


def maximum(x: Tensor, floor: float) -> Tensor:
    """Elementwise max against a constant; gradient passes where x >= floor."""
    x = _wrap(x)
    mask = x.values >= floor
    out_vals = np.where(mask, x.values, floor)

    def vjp(g):
        return (g * mask,)

    return Tensor(out_vals, _parents=(x,), _vjp=vjp, _op="maximum")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax: subtracts the running max before exp."""
    x = _wrap(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_vals = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        inner = (g * out_vals).sum(axis=axis, keepdims=True)
        return ((g - inner) * out_vals,)

    return Tensor(out_vals, _parents=(x,), _vjp=vjp, _op="softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = _wrap(x)
    shifted = x.values - x.values.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_vals = shifted - lse
    soft = np.exp(out_vals)

    def vjp(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return Tensor(out_vals, _parents=(x,), _vjp=vjp, _op="log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then scale+shift."""
    mu = x.mean(axis=-1, keepdims=True)
    centered = x - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    return gain * (centered / sqrt(var + eps)) + bias


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, Tensor]:
    """Attention over the last two axes; returns (output, row-stochastic weights)."""
    dk = q.shape[-1]
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(dk))
    weights = softmax(scores, axis=-1)
    return weights @ v, weights


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out_vals = np.concatenate([t.values for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return Tensor(out_vals, _parents=tuple(tensors), _vjp=vjp, _op="concat")


# -- verification -----------------------------------------------------------------


def grad_check(forward, params, eps: float = 1e-5, tol: float = 1e-5,
               max_coords: int = 200, seed: int = 0) -> float:
    """Compare analytic gradients against central finite differences.

    `forward` rebuilds the scalar loss from the current parameter values.
    A random subsample of at least `max_coords` scalar coordinates is probed
    (all of them when the model is smaller). Returns the max over probed
    coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    `tol` is the caller's pass bar; it does not alter the computation.
    """
    if not (1e-6 <= eps <= 1e-3):
        raise ValueError("eps must lie in [1e-6, 1e-3]")
    groups = [p for p in params if not p.frozen]
    for g in groups:
        g.zero_grad()
    loss = forward()
    loss.backward()

    flat: list[tuple[Tensor, np.ndarray]] = []
    for group in groups:
        for t in group.tensors.values():
            grad = t.grad if t.grad is not None else np.zeros_like(t.values)
            flat.append((t, grad))

    total = sum(t.size for t, _ in flat)
    rng = np.random.default_rng(seed)
    n_probe = min(total, max(max_coords, 0))
    picks = rng.choice(total, size=n_probe, replace=False)

    offsets = np.cumsum([0] + [t.size for t, _ in flat])
    worst = 0.0
    for pick in np.sort(picks):
        slot = int(np.searchsorted(offsets, pick, side="right") - 1)
        tensor, grad = flat[slot]
        idx = np.unravel_index(pick - offsets[slot], tensor.values.shape)
        orig = tensor.values[idx]
        tensor.values[idx] = orig + eps
        f_plus = float(forward().values)
        tensor.values[idx] = orig - eps
        f_minus = float(forward().values)
        tensor.values[idx] = orig
        numeric = (f_plus - f_minus) / (2.0 * eps)
        analytic = float(grad[idx])
        err = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        worst = max(worst, err)
    return worst
