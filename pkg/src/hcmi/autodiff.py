"""Small reverse-mode autodiff over float64 numpy arrays.

Every differentiable value is a :class:`Tensor` holding an immutable array plus
the closure needed to push an upstream gradient back to its parents. Only the
op set required by the retrieval losses is provided.
"""

from __future__ import annotations

from collections.abc import Callable, Iterable, Mapping
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64
NORM_EPS = 1e-12


@contextmanager
def working_precision(dtype):
    """Temporarily build every new tensor with ``dtype`` (e.g. ``np.longdouble``)."""
    global DTYPE
    previous, DTYPE = DTYPE, np.dtype(dtype).type
    try:
        yield
    finally:
        DTYPE = previous


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class ContractError(ValueError):
    """Raised when an op is used outside its contract (e.g. non-scalar loss)."""


class DeterminismError(RuntimeError):
    """Raised when a loss function gives different values for identical inputs."""


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, data, parents=(), backward_fn=None, requires_grad=False, name=None):
        arr = np.array(data, dtype=DTYPE)
        arr.setflags(write=False)
        self.data = arr
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad or any(p.requires_grad for p in self.parents)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _node(data, parents, backward_fn):
    return Tensor(data, parents, backward_fn)


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data + b.data
    except ValueError:
        raise ShapeError(f"cannot add shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    try:
        out = a.data * b.data
    except ValueError:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}") from None

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    active = a.data > 0
    return _node(np.where(active, a.data, 0.0), (a,), lambda g: (g * active,))


def hinge(a: Tensor) -> Tensor:
    """max(a, 0); subgradient 0 at exactly zero (same as relu)."""
    return relu(a)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    x = a.data
    return _node(np.log(x), (a,), lambda g: (g / x,))


# -- linear algebra / layout -------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product, batched over leading axes with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(out, (a, b), backward)


def pairwise_dot(a: Tensor, b: Tensor) -> Tensor:
    """All token inner products between two batches of token sets.

    ``a`` is (Na, na, D), ``b`` is (Nb, nb, D); returns (Na, Nb, na, nb). Each
    entry is an elementwise product summed in a fixed order, so swapping the
    operands yields the exact transpose.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[-1] != b.shape[-1]:
        raise ShapeError(f"pairwise_dot shape mismatch: {a.shape} vs {b.shape}")
    out = np.sum(a.data[:, None, :, None, :] * b.data[None, :, None, :, :], axis=-1)

    def backward(g):
        return np.einsum("ijkl,jld->ikd", g, b.data), np.einsum("ijkl,ikd->jld", g, a.data)

    return _node(out, (a, b), backward)


def transpose(a: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inverse = tuple(np.argsort(axes))
    return _node(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inverse),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, tuple(axes))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing (slice)."""
    out = a.data[index]

    def backward(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.add.at(full, index, g)
        return (full,)

    return _node(out, (a,), backward)


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _node(out, tensors, backward)


def stack(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)

    def backward(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _node(out, tensors, backward)


# -- reductions --------------------------------------------------------------


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(out, (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / float(n))


def max(a: Tensor, axis: int = -1) -> Tensor:  # noqa: A001
    """Max along one axis; gradient goes to the first (lowest-index) argmax."""
    idx = np.argmax(a.data, axis=axis)
    out = np.take_along_axis(a.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis)

    def backward(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        np.put_along_axis(full, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (full,)

    return _node(out, (a,), backward)


def argmax(a, axis: int = -1) -> np.ndarray:
    data = a.data if isinstance(a, Tensor) else np.asarray(a)
    return np.argmax(data, axis=axis)


def logsumexp(a: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stable log-sum-exp along ``axis`` over entries where ``mask`` is true.

    An all-false mask slice yields -inf with zero gradient.
    """
    x = a.data
    if mask is None:
        mask = np.ones(x.shape, dtype=bool)
    mask = np.broadcast_to(mask, x.shape)
    xm = np.where(mask, x, -np.inf)
    m = np.max(xm, axis=axis, keepdims=True)
    empty = ~np.isfinite(m)
    m_safe = np.where(empty, 0.0, m)
    s = np.sum(np.where(mask, np.exp(xm - m_safe), 0.0), axis=axis, keepdims=True)
    with np.errstate(divide="ignore"):
        out_k = np.where(empty, -np.inf, m_safe + np.log(np.where(empty, 1.0, s)))
    out = out_k.squeeze(axis)

    def backward(g):
        w = np.where(mask & ~empty, np.exp(np.where(mask, x, 0.0) - np.where(empty, 0.0, out_k)), 0.0)
        return (w * np.expand_dims(g, axis),)

    return _node(out, (a,), backward)


def logaddexp(a, b) -> Tensor:
    """Elementwise log(exp(a) + exp(b)); tolerates -inf in at most one argument."""
    a, b = as_tensor(a), as_tensor(b)
    out = np.logaddexp(a.data, b.data)

    def backward(g):
        wa = np.exp(a.data - out)
        wb = np.exp(b.data - out)
        return _unbroadcast(g * wa, a.shape), _unbroadcast(g * wb, b.shape)

    return _node(out, (a, b), backward)


# -- composite ops -----------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    z = np.exp(x - np.max(x, axis=axis, keepdims=True))
    p = z / z.sum(axis=axis, keepdims=True)

    def backward(g):
        return (p * (g - np.sum(g * p, axis=axis, keepdims=True)),)

    return _node(p, (a,), backward)


def l2_normalize(a: Tensor, axis: int = -1) -> Tensor:
    """Unit-norm rows along ``axis``; ``NORM_EPS`` is added to the denominator."""
    x = a.data
    norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    d = norm + NORM_EPS
    y = x / d

    def backward(g):
        # d/dx of x/(|x|+eps) applied to g
        proj = np.sum(g * x, axis=axis, keepdims=True)
        safe = np.where(norm > 0, norm, 1.0)
        return (g / d - x * proj / (d * d * safe) * (norm > 0),)

    return _node(y, (a,), backward)


# -- parameters & gradients --------------------------------------------------


@dataclass
class ParamSet:
    """Named parameter tensors with trainable/frozen flags."""

    values: dict[str, np.ndarray] = field(default_factory=dict)
    trainable: dict[str, bool] = field(default_factory=dict)

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self.values:
            raise KeyError(f"duplicate parameter name: {name}")
        self.values[name] = np.array(value, dtype=DTYPE)
        self.trainable[name] = trainable

    def __getitem__(self, name: str) -> np.ndarray:
        return self.values[name]

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)

    def names(self, trainable_only: bool = False) -> list[str]:
        return [n for n in self.values if self.trainable[n] or not trainable_only]

    def set(self, name: str, value) -> None:
        value = np.asarray(value, dtype=DTYPE)
        if value.shape != self.values[name].shape:
            raise ShapeError(f"{name}: shape {self.values[name].shape} is fixed, got {value.shape}")
        self.values[name] = value.copy()

    def copy(self) -> ParamSet:
        return ParamSet({k: v.copy() for k, v in self.values.items()}, dict(self.trainable))

    def leaves(self) -> dict[str, Tensor]:
        """Fresh leaf tensors for one forward pass."""
        return {
            name: Tensor(v, requires_grad=self.trainable[name], name=name)
            for name, v in self.values.items()
        }


def backward(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Reverse pass from scalar ``loss``; returns gradients for ``wrt`` in order."""
    if loss.data.shape != ():
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [(loss, False)]
    while stack_:
        node, done = stack_.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=DTYPE)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node.backward_fn is not None else grads.get(id(node))
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return [grads.get(id(t), np.zeros(t.shape, dtype=DTYPE)) for t in wrt]


def grad(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor], params: ParamSet
) -> tuple[float, dict[str, np.ndarray]]:
    """Evaluate ``loss_fn`` on fresh leaves and return (loss, d loss / d param).

    Only trainable parameters appear in the gradient map.
    """
    leaves = params.leaves()
    loss = loss_fn(leaves)
    names = params.names(trainable_only=True)
    gs = backward(loss, [leaves[n] for n in names])
    return loss.item(), dict(zip(names, gs))


def finite_diff_check(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: ParamSet,
    step: float = 1e-5,
    seed: int = 0,
    analytic: Mapping[str, np.ndarray] | None = None,
    names: Iterable[str] | None = None,
    fd_dtype=None,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Every scalar of every trainable parameter (or of ``names``) is perturbed by
    ``±step``. ``analytic`` overrides the autodiff gradient, which lets tests
    feed in a corrupted gradient as a negative control. ``seed`` is unused by
    the perturbation itself and exists so callers can tie a check to the seed
    that built ``params``. ``fd_dtype`` evaluates the perturbed losses in a
    wider float type (``np.longdouble``) so that tiny gradient entries are not
    swamped by float64 rounding in the difference quotient; the analytic side
    is always computed at float64.
    """
    del seed
    base = params.copy()

    def value(ps: ParamSet):
        if fd_dtype is None:
            return loss_fn(ps.leaves()).item()
        with working_precision(fd_dtype):
            return loss_fn(ps.leaves()).data[()]

    first, second = value(base), value(base)
    if first != second:
        raise DeterminismError(f"loss_fn is not deterministic: {first!r} != {second!r}")
    if analytic is None:
        _, analytic = grad(loss_fn, base)
    worst = 0.0
    for name in names if names is not None else base.names(trainable_only=True):
        orig = base[name]
        flat_grad = np.asarray(analytic[name]).reshape(-1)
        for k in range(orig.size):
            plus, minus = orig.copy().reshape(-1), orig.copy().reshape(-1)
            plus[k] += step
            minus[k] -= step
            base.values[name] = plus.reshape(orig.shape)
            fp = value(base)
            base.values[name] = minus.reshape(orig.shape)
            fm = value(base)
            base.values[name] = orig
            numeric = float((fp - fm) / (2.0 * step))
            a = flat_grad[k]
            err = abs(a - numeric) / np.maximum(1e-8, abs(a) + abs(numeric))
            worst = np.maximum(worst, err)
    return float(worst)


class Adam:
    """Adam with default moments; updates a ParamSet in place."""

    def __init__(self, params: ParamSet, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros_like(params[n]) for n in params.names(trainable_only=True)}
        self.v = {n: np.zeros_like(params[n]) for n in params.names(trainable_only=True)}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name, g in grads.items():
            m = self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            v = self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            self.params.values[name] = self.params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
