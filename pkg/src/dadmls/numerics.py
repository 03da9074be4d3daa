"""Dense tensors with reverse-mode gradients, seeded sampling and SGD.

Every differentiable op is a forward function plus a backward rule looked up
by name in :data:`GRAD_RULES` at backward time, so a rule can be swapped out
(the gradient-check harness relies on that for its negative control).
"""

from __future__ import annotations

import contextlib
import zlib
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GRAD_RULES",
    "NonFiniteError",
    "OptSettings",
    "PolySgd",
    "Rng",
    "SgdMomentum",
    "SgdMomentumState",
    "Tensor",
    "add",
    "as_tensor",
    "concat",
    "default_dtype",
    "gaussian",
    "grad_check",
    "is_grad_enabled",
    "leaky_relu",
    "linear",
    "matmul",
    "mean",
    "mse",
    "mul",
    "no_grad",
    "poly_lr",
    "set_default_dtype",
    "sgd_momentum_step",
    "softmax_cross_entropy",
    "square",
    "sub",
    "sum",
]


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


_DTYPE = np.float64
_GRAD_ENABLED = True


def default_dtype() -> type:
    return _DTYPE


def set_default_dtype(dtype) -> None:
    """Switch between 64-bit (tests) and 32-bit (fast training) storage."""
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float64, np.float32):
        raise ValueError(f"unsupported dtype {dtype!r}")
    _DTYPE = dtype


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate ops without recording a graph."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    # one reduction covers the common case; an overflowing sum falls back to a full scan
    if np.isfinite(arr.sum()):
        return
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op}: non-finite value produced")


class Tensor:
    """A numpy array plus an optional gradient and the op that produced it."""

    __slots__ = ("data", "grad", "requires_grad", "_op", "_parents", "_ctx")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype or _DTYPE, copy=True)
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._op: str | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._ctx: dict = {}

    @classmethod
    def _from_op(cls, data: np.ndarray, op: str, parents: Sequence[Tensor], ctx: dict) -> Tensor:
        _check_finite(data, op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        track = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._op = op if track else None
        out._parents = tuple(parents) if track else ()
        out._ctx = ctx if track else {}
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.grad = None
        out.requires_grad = False
        out._op, out._parents, out._ctx = None, (), {}
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a constant")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every leaf with ``requires_grad``."""
        if not self.requires_grad:
            raise RuntimeError("backward on a tensor that does not require grad")
        if grad is None:
            if self.data.size != 1:
                raise RuntimeError("grad must be given for non-scalar outputs")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._op is None:
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = GRAD_RULES[node._op](node._ctx, g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                _check_finite(pg, f"{node._op} backward")
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg


GradRule = Callable[[dict, np.ndarray], tuple]
GRAD_RULES: dict[str, GradRule] = {}


def _rule(name: str):
    def register(fn: GradRule) -> GradRule:
        GRAD_RULES[name] = fn
        return fn

    return register


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    return Tensor._from_op(a.data + b.data, "add", (a, b), {"sa": a.shape, "sb": b.shape})


@_rule("add")
def _add_grad(ctx, g):
    return _unbroadcast(g, ctx["sa"]), _unbroadcast(g, ctx["sb"])


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    return Tensor._from_op(a.data - b.data, "sub", (a, b), {"sa": a.shape, "sb": b.shape})


@_rule("sub")
def _sub_grad(ctx, g):
    return _unbroadcast(g, ctx["sa"]), -_unbroadcast(g, ctx["sb"])


def mul(a, b) -> Tensor:
    """Elementwise product; either side may be a constant or broadcast."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    return Tensor._from_op(a.data * b.data, "mul", (a, b), {"a": a.data, "b": b.data})


@_rule("mul")
def _mul_grad(ctx, g):
    a, b = ctx["a"], ctx["b"]
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ctx = {"a": a.data, "b": b.data, "need_a": a.requires_grad, "need_b": b.requires_grad}
    return Tensor._from_op(a.data @ b.data, "matmul", (a, b), ctx)


@_rule("matmul")
def _matmul_grad(ctx, g):
    ga = g @ ctx["b"].T if ctx["need_a"] else None
    gb = ctx["a"].T @ g if ctx["need_b"] else None
    return ga, gb


def linear(x, w, b) -> Tensor:
    """Affine map ``x @ w + b`` as a single graph node."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0] or b.shape != (w.shape[1],):
        raise ValueError(f"linear: incompatible shapes {x.shape}, {w.shape}, {b.shape}")
    ctx = {"x": x.data, "w": w.data, "need": (x.requires_grad, w.requires_grad, b.requires_grad)}
    return Tensor._from_op(x.data @ w.data + b.data, "linear", (x, w, b), ctx)


@_rule("linear")
def _linear_grad(ctx, g):
    nx_, nw, nb = ctx["need"]
    return (g @ ctx["w"].T if nx_ else None,
            ctx["x"].T @ g if nw else None,
            g.sum(axis=0) if nb else None)


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    if not 0 <= slope <= 1:
        raise ValueError("leaky_relu: slope must lie in [0, 1]")
    # max(x, slope*x) equals the piecewise form for slope <= 1 and skips building a mask
    return Tensor._from_op(np.maximum(x.data, slope * x.data), "leaky_relu", (x,), {"x": x.data, "slope": slope})


@_rule("leaky_relu")
def _leaky_relu_grad(ctx, g):
    return (np.where(ctx["x"] > 0, g, ctx["slope"] * g),)


def square(x) -> Tensor:
    x = as_tensor(x)
    return Tensor._from_op(x.data * x.data, "square", (x,), {"x": x.data})


@_rule("square")
def _square_grad(ctx, g):
    return (2.0 * ctx["x"] * g,)


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    return Tensor._from_op(np.asarray(x.data.sum(axis=axis)), "sum", (x,), {"shape": x.shape, "axis": axis})


@_rule("sum")
def _sum_grad(ctx, g):
    if ctx["axis"] is not None:
        g = np.expand_dims(g, ctx["axis"])
    return (np.broadcast_to(g, ctx["shape"]).copy(),)


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    return mul(sum(x, axis), 1.0 / n)


def concat(xs: Sequence, axis: int = 1) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ValueError(f"concat: {exc}") from None
    splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return Tensor._from_op(out, "concat", xs, {"splits": splits, "axis": axis})


@_rule("concat")
def _concat_grad(ctx, g):
    return tuple(np.split(g, ctx["splits"], axis=ctx["axis"]))


def mse(pred, target) -> Tensor:
    """Mean over rows of the squared error averaged over columns."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"mse: shapes {pred.shape} and {target.shape} differ")
    return mean(square(sub(pred, target)))


def softmax_cross_entropy(logits, labels) -> Tensor:
    """Batch-mean of ``-log softmax(logits)[label]``, max-subtracted."""
    logits = as_tensor(logits)
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ValueError(f"softmax_cross_entropy: logits must be 2-D, got {logits.shape}")
    n, c = logits.shape
    if c < 2:
        raise ValueError("softmax_cross_entropy: need at least 2 classes")
    if labels.shape != (n,) or not np.issubdtype(labels.dtype, np.integer):
        raise ValueError("softmax_cross_entropy: labels must be an integer vector matching the batch")
    if n and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"softmax_cross_entropy: label out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    loss = np.asarray(np.mean(logsum - z[rows, labels]))
    probs = np.exp(z - logsum[:, None])
    return Tensor._from_op(loss, "softmax_cross_entropy", (logits,), {"probs": probs, "labels": labels})


@_rule("softmax_cross_entropy")
def _softmax_cross_entropy_grad(ctx, g):
    probs = ctx["probs"].copy()
    n = probs.shape[0]
    probs[np.arange(n), ctx["labels"]] -= 1.0
    return (probs * (g / n),)


# --- random sampling -------------------------------------------------------


class Rng:
    """Seeded Philox (counter-based) stream with named, independent children.

    ``Rng(s).child("x")`` always yields the same stream for the same ``s`` and
    name, regardless of how much the parent has been consumed.
    """

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        if not 0 <= int(seed) < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        self.seed = int(seed)
        self._key = tuple(_key)
        ss = np.random.SeedSequence(self.seed, spawn_key=self._key)
        self._gen = np.random.Generator(np.random.Philox(ss))

    def child(self, name: str | int) -> Rng:
        tag = name if isinstance(name, int) else zlib.crc32(str(name).encode("utf-8"))
        return Rng(self.seed, self._key + (int(tag),))

    @property
    def counter(self) -> int:
        """Current Philox block counter (low word)."""
        return int(self._gen.bit_generator.state["state"]["counter"][0])

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape, dtype=np.float64).astype(_DTYPE, copy=False)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self._gen.integers(low, high, size=size)

    def uniform(self, low: float, high: float, size=None) -> np.ndarray:
        return self._gen.uniform(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def gaussian(rng: Rng, shape) -> Tensor:
    """I.i.d. standard-normal constant tensor."""
    return Tensor(rng.normal(shape))


# --- optimisation -------------------------------------------------------------


@dataclass
class SgdMomentumState:
    momentum: float = 0.9
    weight_decay: float = 0.0
    velocity: list[np.ndarray] = field(default_factory=list)


def sgd_momentum_step(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
                      state: SgdMomentumState, lr: float) -> None:
    """Heavy-ball SGD with L2 decay folded into the gradient, in place."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if len(params) != len(grads):
        raise ValueError("params and grads differ in length")
    if not state.velocity:
        state.velocity = [np.zeros_like(p.data) for p in params]
    if len(state.velocity) != len(params):
        raise ValueError("optimizer state was built for a different parameter list")
    for p, g, v in zip(params, grads, state.velocity):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or v.shape != p.data.shape:
            raise ValueError(f"sgd: shape mismatch for parameter of shape {p.data.shape}")
        v *= state.momentum
        v += g + state.weight_decay * p.data
        if lr:
            p.data -= lr * v


class SgdMomentum:
    """Optimizer bound to a parameter list."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.state = SgdMomentumState(momentum, weight_decay)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        sgd_momentum_step(self.params, [p.grad for p in self.params], self.state, lr)


def poly_lr(base_lr: float, iter: int, total_iters: int, power: float = 0.9) -> float:  # noqa: A002
    if total_iters <= 0:
        raise ValueError("total_iters must be positive")
    if not 0 <= iter <= total_iters:
        raise ValueError(f"iter {iter} outside [0, {total_iters}]")
    return base_lr * (1.0 - iter / total_iters) ** power


# --- gradient checking --------------------------------------------------------


def grad_check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], eps: float = 1e-5,
               max_entries: int = 200, rng: Rng | None = None, floor: float = 1e-6) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Parameters larger than ``max_entries`` in total are checked on a random
    subset of entries. Per-entry error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in params:
        p.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NonFiniteError("grad_check: non-finite loss")
    loss.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

    index = [(i, j) for i, p in enumerate(params) for j in range(p.data.size)]
    if len(index) > max_entries:
        rng = rng or Rng(0)
        index = [index[t] for t in sorted(rng.choice(len(index), max_entries))]

    worst = 0.0
    with no_grad():
        for i, j in index:
            flat = params[i].data.reshape(-1)
            orig = flat[j]
            flat[j] = orig + eps
            up = float(loss_fn().data)
            flat[j] = orig - eps
            down = float(loss_fn().data)
            flat[j] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NonFiniteError("grad_check: non-finite loss")
            numeric = (up - down) / (2 * eps)
            a = analytic[i].reshape(-1)[j]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst


@dataclass(frozen=True)
class OptSettings:
    lr: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0
    poly_power: float = 0.9

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")


class PolySgd(SgdMomentum):
    """Momentum SGD whose learning rate follows ``poly_lr`` over ``total_iters`` steps."""

    def __init__(self, params: Sequence[Tensor], settings: OptSettings, total_iters: int):
        super().__init__(params, settings.momentum, settings.weight_decay)
        self.settings = settings
        self.total_iters = max(int(total_iters), 1)
        self.iter = 0

    @property
    def lr(self) -> float:
        it = min(self.iter, self.total_iters)
        return poly_lr(self.settings.lr, it, self.total_iters, self.settings.poly_power)

    def step(self, lr: float | None = None) -> None:
        super().step(self.lr if lr is None else lr)
        self.iter += 1
