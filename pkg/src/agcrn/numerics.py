"""Dense float64 tensors with reverse-mode gradients.

Every op records its parents and a vector-Jacobian closure on the output
tensor; :meth:`Tensor.backward` walks the recorded graph in reverse
topological order.  Inside :func:`no_grad` nothing is recorded, which is
what the finite-difference checker and inference paths use.
"""
from __future__ import annotations

import contextlib
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64
MAX_RANK = 4

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf."""


class NonDeterministicLossError(RuntimeError):
    """Two evaluations of the same loss disagreed."""


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the same seed always gives the same stream."""
    return np.random.Generator(np.random.PCG64(int(seed)))


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _op: str = ""):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim > MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds {MAX_RANK} (shape {arr.shape})")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self._op = _op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op or 'leaf'})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if grad is None:
            if self.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got {self.shape}")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(self, False)]
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
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)


class Parameter(Tensor):
    """A named trainable leaf.  ``grad`` accumulates until :meth:`zero_grad`."""

    __slots__ = ("name",)

    def __init__(self, value, name: str):
        super().__init__(value, requires_grad=True)
        self.name = name

    @property
    def value(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def op(name: str, out: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap a forward result; ``backward(g)`` returns one gradient per parent.

    This is also the hook for defining new differentiable ops outside this
    module.
    """
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(f"{name} produced non-finite values")
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    t = Tensor(out, requires_grad=needs, _parents=tuple(parents) if needs else (), _op=name)
    if needs:
        t._backward = backward
    return t


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _check_broadcast(name: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: cannot broadcast {a.shape} with {b.shape}") from None


# elementwise binary ops


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return op("add", a.data + b.data, (a, b),
              lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return op("sub", a.data - b.data, (a, b),
              lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return op("mul", a.data * b.data, (a, b),
              lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


# linear algebra


def matmul(a, b) -> Tensor:
    """``a @ b`` with numpy batching rules; both operands must be rank >= 2."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return op("matmul", out, (a, b), backward)


def _parse_subscripts(spec: str) -> tuple[str, str, str]:
    try:
        lhs, out = spec.replace(" ", "").split("->")
        sa, sb = lhs.split(",")
    except ValueError:
        raise ValueError(f"einsum spec must look like 'ab,bc->ac', got {spec!r}") from None
    for s in (sa, sb):
        if len(set(s)) != len(s) or not set(s) <= set(out) | set(sa if s is sb else sb):
            raise ValueError(f"einsum spec {spec!r} is not supported for differentiation")
    return sa, sb, out


def einsum(spec: str, a, b) -> Tensor:
    """Two-operand contraction; gradients are the matching transposed contractions."""
    a, b = as_tensor(a), as_tensor(b)
    sa, sb, so = _parse_subscripts(spec)
    dims: dict[str, int] = {}
    for s, t in ((sa, a), (sb, b)):
        if len(s) != t.ndim:
            raise ShapeError(f"einsum {spec!r}: operand rank {t.ndim} vs subscripts {s!r}")
        for ch, n in zip(s, t.shape):
            if dims.setdefault(ch, n) != n:
                raise ShapeError(
                    f"einsum {spec!r}: extent mismatch on {ch!r} between {a.shape} and {b.shape}")
    out = np.einsum(f"{sa},{sb}->{so}", a.data, b.data, optimize=True)

    def backward(g):
        ga = np.einsum(f"{so},{sb}->{sa}", g, b.data, optimize=True) if a.requires_grad else None
        gb = np.einsum(f"{so},{sa}->{sb}", g, a.data, optimize=True) if b.requires_grad else None
        return ga, gb

    return op("einsum", out, (a, b), backward)


def pool_contract(e, w) -> Tensor:
    """Generate per-node weights ``theta[n] = sum_d e[n, d] * w[d]``.

    ``e`` is N x d, ``w`` is d x K x Cin x Cout; the result is N x K x Cin x Cout.
    """
    e, w = as_tensor(e), as_tensor(w)
    if e.ndim != 2 or w.ndim != 4 or w.shape[0] != e.shape[1]:
        raise ShapeError(f"pool_contract: embedding {e.shape} vs pool {w.shape}")
    flat = matmul(e, reshape(w, (w.shape[0], -1)))
    return reshape(flat, (e.shape[0],) + w.shape[1:])


def transpose(x) -> Tensor:
    x = as_tensor(x)
    return op("transpose", np.swapaxes(x.data, -1, -2).copy(), (x,),
              lambda g: (np.swapaxes(g, -1, -2),))


def permute(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return op("permute", np.ascontiguousarray(x.data.transpose(axes)), (x,),
              lambda g: (g.transpose(inverse),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    return op("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[t.shape for t in ts]}: {exc}") from None
    cuts = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return op("concat", out, ts, lambda g: tuple(np.split(g, cuts, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.stack([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"stack: {[t.shape for t in ts]}: {exc}") from None
    return op("stack", out, ts,
              lambda g: tuple(np.take(g, i, axis=axis) for i in range(len(ts))))


def index(x, key) -> Tensor:
    """Basic (non-fancy) indexing."""
    x = as_tensor(x)

    def backward(g):
        full = np.zeros_like(x.data)
        full[key] = g
        return (full,)

    return op("index", np.array(x.data[key]), (x,), backward)


# reductions


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    return op("sum", np.array(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.size
    return op("mean", np.array(x.data.mean()), (x,),
              lambda g: (np.full(x.shape, float(g) / n),))


# nonlinearities


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def relu(x) -> Tensor:
    x = as_tensor(x)
    return op("relu", np.maximum(x.data, 0.0), (x,), lambda g: (g * (x.data > 0),))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid(x.data)
    return op("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)
    return op("tanh", t, (x,), lambda g: (g * (1.0 - t * t),))


def absolute(x) -> Tensor:
    x = as_tensor(x)
    return op("abs", np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


_UNARY = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh, "abs": absolute}


def apply_unary(x, kind: str) -> Tensor:
    try:
        fn = _UNARY[kind]
    except KeyError:
        raise ValueError(f"unknown unary kind {kind!r}; expected one of {sorted(_UNARY)}") from None
    return fn(x)


def softmax_rows(x) -> Tensor:
    """Softmax along the last axis, shifted by the row max for stability."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    ez = np.exp(z)
    s = ez / ez.sum(axis=-1, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return op("softmax", s, (x,), backward)


# gradient checking


@dataclass
class ParamCheck:
    name: str
    max_rel_err: float
    passed: bool
    n_checked: int
    n_total: int


@dataclass
class CheckReport:
    tol: float
    step: float
    params: list[ParamCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.params)

    @property
    def max_rel_err(self) -> float:
        return max((p.max_rel_err for p in self.params), default=0.0)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "tol": self.tol,
            "step": self.step,
            "max_rel_err": self.max_rel_err,
            "params": [asdict(p) for p in self.params],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    params: Iterable[Parameter],
    step: float = 1e-5,
    tol: float = 1e-4,
    max_entries: int = 10_000,
    seed: int = 0,
    denom_floor: float = 1e-6,
) -> CheckReport:
    """Compare analytic gradients against central differences.

    ``loss_fn`` must rebuild the loss from the current parameter values on
    every call.  Parameters with more than ``max_entries`` scalars are probed
    on a seeded random subset.  Relative error is
    ``|a - n| / max(|a|, |n|, denom_floor)``.
    """
    params = list(params)
    for p in params:
        p.zero_grad()
    loss = loss_fn()
    f0 = loss.item()
    loss.backward()
    analytic = {id(p): p.grad.copy() for p in params}
    with no_grad():
        f_again = loss_fn().item()
    if f_again != f0:
        raise NonDeterministicLossError(f"loss evaluated to {f0!r} then {f_again!r}")

    rng = make_rng(seed)
    report = CheckReport(tol=tol, step=step)
    for p in params:
        flat = p.data.reshape(-1)
        if flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        else:
            idx = np.arange(flat.size)
        grad = analytic[id(p)].reshape(-1)
        worst = 0.0
        with no_grad():
            for i in idx:
                orig = flat[i]
                flat[i] = orig + step
                fp = loss_fn().item()
                flat[i] = orig - step
                fm = loss_fn().item()
                flat[i] = orig
                numeric = (fp - fm) / (2.0 * step)
                err = relative_error(grad[i], numeric, denom_floor)
                if not math.isfinite(err):
                    err = math.inf
                worst = max(worst, err)
        report.params.append(ParamCheck(
            name=p.name, max_rel_err=float(worst), passed=bool(worst <= tol),
            n_checked=int(idx.size), n_total=int(flat.size)))
    for p in params:
        p.zero_grad()
    return report
