"""Dense float64 tensors with reverse-mode differentiation.

Each operation records its parents and a backward closure on the output tensor.
:func:`backward` linearizes the recorded graph into a tape (reverse topological
order) and replays it once, accumulating into ``.grad`` buffers.

Broadcasting is limited to leading dimensions: a bias of shape ``(d,)`` may be
added to ``(..., d)``, a ``(L, d)`` table to ``(B, L, d)``, and so on.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, NumericalDomainError, ShapeError
from .prng import SplitMix64

DTYPE = np.float64
LN_EPS = 1e-5

_state = threading.local()


@contextmanager
def no_grad():
    """Suspend graph recording on this thread."""
    prev = getattr(_state, "no_grad", False)
    _state.no_grad = True
    try:
        yield
    finally:
        _state.no_grad = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


class Parameter(Tensor):
    """A trainable leaf tensor with a dotted name such as ``deep.0.attn.wq``."""

    __slots__ = ()

    def __init__(self, data, name: str):
        super().__init__(data, requires_grad=True, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def from_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Wrap a forward result and its backward closure into a graph node.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per parent.
    Nothing is recorded when no parent requires a gradient.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    out._parents = ()
    out._backward = None
    out.requires_grad = not getattr(_state, "no_grad", False) and any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)

        def _bw(g, parents=out._parents):
            grads = backward_fn(g)
            for p, pg in zip(parents, grads):
                if pg is not None and p.requires_grad:
                    p._accumulate(pg)

        out._backward = _bw
    return out


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce a broadcast gradient back to ``shape`` (leading-dimension broadcast only)."""
    if g.shape == shape:
        return g
    lead = g.ndim - len(shape)
    g = g.sum(axis=tuple(range(lead))) if lead > 0 else g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_suffix(a: tuple, b: tuple, op: str) -> None:
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    tail = long_[len(long_) - len(short):]
    if any(s != t and s != 1 and t != 1 for s, t in zip(short, tail)) or (
        len(short) and short[-1] != tail[-1]
    ):
        raise ShapeError(f"{op}: shapes {a} and {b} are not compatible")


# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a.shape, b.shape, "add")
    out = a.data + b.data
    return from_op(out, (a, b), lambda g: (_sum_to(g, a.shape), _sum_to(g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_suffix(a.shape, b.shape, "mul")
    out = a.data * b.data
    return from_op(
        out, (a, b), lambda g: (_sum_to(g * b.data, a.shape), _sum_to(g * a.data, b.shape))
    )


def scale(a: Tensor, c: float) -> Tensor:
    return from_op(a.data * c, (a,), lambda g: (g * c,))


def mul_const(a: Tensor, m: np.ndarray) -> Tensor:
    """Multiply by a constant array (masks, dropout); the constant gets no gradient."""
    m = np.asarray(m, dtype=DTYPE)
    out = a.data * m
    if out.shape != a.shape:
        raise ShapeError(f"mul_const: constant of shape {m.shape} would broadcast {a.shape}")
    return from_op(out, (a,), lambda g: (g * m,))


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return from_op(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,))


def dropout(a: Tensor, p: float, rng, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or ``p == 0``."""
    if not training or p <= 0.0:
        return a
    keep = (rng.uniform(a.shape) >= p).astype(DTYPE) / (1.0 - p)
    return mul_const(a, keep)


# shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return from_op(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def swap_last(a: Tensor) -> Tensor:
    axes = list(range(a.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(a, axes)


# reductions


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return from_op(np.array(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),))


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.data.size)


# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``b`` either carries the same leading (batch/head) dimensions as ``a`` or is a
    plain matrix shared across them.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for {a.shape} and {b.shape}")
    if b.ndim > 2 and b.shape[:-2] != a.shape[:-2]:
        raise ShapeError(f"matmul: leading dimensions differ for {a.shape} and {b.shape}")
    if a.ndim > 2 and b.ndim > 2 and a.ndim != b.ndim:
        raise ShapeError(f"matmul: rank mismatch for {a.shape} and {b.shape}")
    if a.ndim == 2 and b.ndim > 2:
        raise ShapeError(f"matmul: cannot broadcast {a.shape} against batched {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        if b.ndim == 2 and gb.ndim > 2:
            gb = gb.reshape(-1, *b.shape).sum(axis=0)
        return ga, gb

    return from_op(out, (a, b), bw)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Position-wise affine map ``x @ weight + bias`` with ``weight`` of shape (din, dout)."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    if x.ndim == 1:
        y = reshape(matmul(reshape(x, (1, -1)), weight), (weight.shape[1],))
    elif x.ndim == 2:
        y = matmul(x, weight)
    else:
        lead = x.shape[:-1]
        y = reshape(matmul(reshape(x, (-1, x.shape[-1])), weight), (*lead, weight.shape[1]))
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        y = add(y, bias)
    return y


# normalizations


def softmax_rows(x: Tensor, valid: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis, stabilized by subtracting the row max.

    ``valid`` is an optional boolean array broadcastable to ``x``; invalid
    entries receive exactly zero weight and no gradient. Every row needs at
    least one valid entry.
    """
    if x.shape[-1] < 1:
        raise ShapeError("softmax_rows: rows must have at least one entry")
    if np.isnan(x.data).any():
        raise NumericalDomainError("softmax_rows: NaN in input")
    z = x.data
    if valid is not None:
        valid = np.broadcast_to(np.asarray(valid, dtype=bool), z.shape)
        z = np.where(valid, z, -np.inf)
    m = z.max(axis=-1, keepdims=True)
    if not np.isfinite(m).all():
        raise NumericalDomainError("softmax_rows: row without a finite valid entry")
    e = np.exp(z - m)
    y = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return from_op(y, (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = LN_EPS) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError("layer_norm: last dimension must be positive")
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain {gain.shape}/bias {bias.shape} do not match d={d}")
    if eps <= 0:
        raise ShapeError("layer_norm: eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def bw(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return from_op(out, (x, gain, bias), bw)


# differentiation


def _tape(root: Tensor) -> list[Tensor]:
    """Nodes reachable from ``root`` in topological order (parents first)."""
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf with ``requires_grad``.

    Intermediate gradients are released afterwards; leaf gradients accumulate
    across calls until zeroed.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = _tape(loss)
    loss._accumulate(np.ones_like(loss.data))
    for node in reversed(tape):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
    for node in tape:
        if node._backward is not None:
            node.grad = None


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None


# gradient checking


@dataclass
class GradCheckReport:
    per_param: dict[str, float]
    tol: float
    h: float
    n_checked: int = 0
    worst: tuple[str, tuple] | None = None
    details: dict = field(default_factory=dict)

    @property
    def max_rel_error(self) -> float:
        return max(self.per_param.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol

    def summary(self) -> str:
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"max relative error {self.max_rel_error:.3e} over {self.n_checked} entries "
            f"(tol {self.tol:g}) {verdict}"
        )


def _named(params) -> list[tuple[str, Tensor]]:
    if isinstance(params, Mapping):
        return list(params.items())
    return [(p.name or f"param{i}", p) for i, p in enumerate(params)]


def finite_diff_check(
    f: Callable[[], Tensor],
    params,
    h: float = 1e-4,
    tol: float = 1e-3,
    floor: float = 1e-6,
    max_entries: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients of ``f`` with central differences.

    The error of one entry is ``|a - n| / max(|a|, |n|, floor)``; ``floor`` keeps
    entries whose true gradient is zero from producing 0/0. ``f`` takes no
    arguments and reads the parameters in place, so it must be deterministic.
    With ``max_entries`` only a seeded sample of that many entries per
    parameter is probed.
    """
    if h <= 0:
        raise ContractError("finite_diff_check: h must be positive")
    named = _named(params)
    tensors = [t for _, t in named]
    zero_grads(tensors)
    loss = f()
    base = float(loss.data)
    if float(f().data) != base:
        raise ContractError("finite_diff_check: f is not deterministic")
    backward(loss)
    report = GradCheckReport(per_param={}, tol=tol, h=h)
    worst = -1.0
    for name, p in named:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        ga = analytic.reshape(-1)
        probe = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            probe = SplitMix64(seed + len(report.per_param)).choice(flat.size, max_entries)
        errs = np.zeros(flat.size)
        for idx in probe:
            orig = flat[idx]
            with no_grad():
                flat[idx] = orig + h
                fp = float(f().data)
                flat[idx] = orig - h
                fm = float(f().data)
            flat[idx] = orig
            num = (fp - fm) / (2.0 * h)
            errs[idx] = abs(ga[idx] - num) / max(abs(ga[idx]), abs(num), floor)
        report.per_param[name] = float(errs.max()) if errs.size else 0.0
        report.n_checked += len(probe)
        if errs.size and errs.max() > worst:
            worst = float(errs.max())
            report.worst = (name, np.unravel_index(int(errs.argmax()), p.shape))
    zero_grads(tensors)
    return report
