"""Small reverse-mode autodiff engine on top of numpy.

Tensors carry a numpy array and, when part of a recorded graph, a closure
that maps the output gradient to gradients for each parent.  Only leaf
tensors with ``requires_grad`` accumulate into ``.grad``; gradient zeroing
is left to the caller.

Forward passes run in whatever dtype the inputs carry (float32 for
training, float64 inside the gradient-check harness).  Broadcasting is
limited to adding a bias vector over the last axis and to constant
(non-Tensor) operands.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "DimensionError",
    "ContractError",
    "no_grad",
    "is_grad_enabled",
    "parameter",
    "glorot_uniform",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "softmax",
    "log_softmax",
    "layer_norm",
    "gelu",
    "tanh",
    "relu",
    "exp",
    "log",
    "square",
    "tsum",
    "mean",
    "reshape",
    "transpose",
    "concat",
    "gather_rows",
    "scatter_rows",
    "pick",
    "minimum",
    "clip",
    "masked_mse",
    "mse",
    "AdamState",
    "adam_step",
    "Adam",
    "clip_grad_norm",
    "gradcheck",
]

GELU_C = math.sqrt(2.0 / math.pi)
GELU_A = 0.044715


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A documented precondition was violated."""


_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __truediv__(self, other):
        if not isinstance(other, (int, float)):
            raise TypeError("only division by a Python scalar is supported")
        return scale(self, 1.0 / other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``grad``."""
        if self.data.size != 1 or self.data.ndim != 0:
            raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a[..., m, k] @ b[k, n]`` or batched ``a[..., m, k] @ b[..., k, n]``.

    Batched operands must share identical leading dimensions.
    """
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} vs {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise DimensionError(f"matmul batch mismatch: {a.shape} vs {b.shape}")
    if b.ndim == 2:
        out = (a.data.reshape(-1, a.shape[-1]) @ b.data).reshape(a.shape[:-1] + (b.shape[1],))
    else:
        out = np.matmul(a.data, b.data)

    def backward(g):
        ga = None
        if a.requires_grad:
            if b.ndim == 2:
                ga = (g.reshape(-1, g.shape[-1]) @ b.data.T).reshape(a.shape)
            else:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = None
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return ga, gb

    return _make(out, (a, b), backward)


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b) -> Tensor:
    """Same-shape add, bias add over the last axis, or add of a constant."""
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        const = np.asarray(b, dtype=a.dtype)
        if const.ndim and const.shape != a.shape and const.shape != a.shape[-const.ndim:]:
            raise DimensionError(f"add shape mismatch: {a.shape} vs {const.shape}")
        return _make(a.data + const, (a,), lambda g: (g,))
    if a.shape == b.shape:
        return _make(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        d = b.shape[0]
        return _make(a.data + b.data, (a, b), lambda g: (g, g.reshape(-1, d).sum(axis=0)))
    raise DimensionError(f"add shape mismatch: {a.shape} vs {b.shape}")


def sub(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        return add(a, -np.asarray(b, dtype=a.dtype))
    if a.shape != b.shape:
        raise DimensionError(f"sub shape mismatch: {a.shape} vs {b.shape}")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    a = _as_tensor(a)
    if not isinstance(b, Tensor):
        const = np.broadcast_to(np.asarray(b, dtype=a.dtype), a.shape)
        return _make(a.data * const, (a,), lambda g: (g * const,))
    if a.shape != b.shape:
        raise DimensionError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    return _make(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data * a.dtype.type(c), (a,), lambda g: (g * a.dtype.type(c),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _make(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (g * pos,))


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    return _make(y, (x,), lambda g: (g * y,))


def log(x: Tensor) -> Tensor:
    return _make(np.log(x.data), (x,), lambda g: (g / x.data,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))."""
    v = x.data
    c, a = x.dtype.type(GELU_C), x.dtype.type(GELU_A)
    v2 = v * v
    t = np.tanh(c * v * (1 + a * v2))
    y = 0.5 * v * (1 + t)

    def backward(g):
        d_inner = c * (1 + 3 * a * v2)
        return (g * (0.5 * (1 + t) + 0.5 * v * (1 - t * t) * d_inner),)

    return _make(y.astype(x.dtype), (x,), backward)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"minimum shape mismatch: {a.shape} vs {b.shape}")
    take_a = a.data <= b.data
    return _make(np.where(take_a, a.data, b.data), (a, b), lambda g: (g * take_a, g * ~take_a))


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    inside = (x.data >= lo) & (x.data <= hi)
    return _make(np.clip(x.data, lo, hi), (x,), lambda g: (g * inside,))


# ---------------------------------------------------------------- reductions / shape


def tsum(x: Tensor, axis: int | None = None) -> Tensor:
    if axis is None:
        return _make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))
    y = x.data.sum(axis=axis)
    return _make(y, (x,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(tsum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    inv = np.argsort(axes)
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    xs = [_as_tensor(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    splits = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def gather_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """``x[B, T, D]``, ``idx[B, L]`` -> ``x[b, idx[b, l]]`` with shape [B, L, D]."""
    if x.ndim != 3 or idx.ndim != 2 or idx.shape[0] != x.shape[0]:
        raise DimensionError(f"gather_rows shape mismatch: {x.shape} vs idx {idx.shape}")
    rows = np.arange(x.shape[0])[:, None]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, idx), g)
        return (gx,)

    return _make(x.data[rows, idx], (x,), backward)


def scatter_rows(x: Tensor, idx: np.ndarray, length: int) -> Tensor:
    """Place ``x[B, L, D]`` at rows ``idx[B, L]`` of a zero [B, length, D] array."""
    if x.ndim != 3 or idx.shape != x.shape[:2]:
        raise DimensionError(f"scatter_rows shape mismatch: {x.shape} vs idx {idx.shape}")
    rows = np.arange(x.shape[0])[:, None]
    out = np.zeros((x.shape[0], length, x.shape[2]), dtype=x.dtype)
    out[rows, idx] = x.data
    return _make(out, (x,), lambda g: (g[rows, idx],))


def pick(x: Tensor, idx: np.ndarray) -> Tensor:
    """Select ``x[..., idx[...]]`` along the last axis."""
    idx = np.asarray(idx)
    if idx.shape != x.shape[:-1]:
        raise DimensionError(f"pick shape mismatch: {x.shape} vs idx {idx.shape}")
    sel = idx[..., None]

    def backward(g):
        gx = np.zeros_like(x.data)
        np.put_along_axis(gx, sel, g[..., None], axis=-1)
        return (gx,)

    return _make(np.take_along_axis(x.data, sel, axis=-1)[..., 0], (x,), backward)


# ---------------------------------------------------------------- nn primitives


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _make(y, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)
    return _make(y, (x,), lambda g: (g - p * g.sum(axis=axis, keepdims=True),))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm expects gain/bias of shape ({d},), got {gain.shape}/{bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def backward(g):
        gx = gg = gb = None
        if x.requires_grad:
            gxh = g * gain.data
            gx = inv * (gxh - gxh.mean(axis=-1, keepdims=True) - xhat * (gxh * xhat).mean(axis=-1, keepdims=True))
        if gain.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if bias.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        return gx, gg, gb

    return _make(y.astype(x.dtype), (x, gain, bias), backward)


def masked_mse(pred: Tensor, target, mask: np.ndarray) -> Tensor:
    """Mean squared error over masked entries only.

    ``mask`` is boolean with shape ``pred.shape[:-1]`` (row mask: every
    feature of a masked row counts) or ``pred.shape`` (cell mask).
    """
    target_arr = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=pred.dtype)
    if pred.shape != target_arr.shape:
        raise DimensionError(f"masked_mse shape mismatch: {pred.shape} vs {target_arr.shape}")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape == pred.shape[:-1]:
        cells = np.broadcast_to(mask[..., None], pred.shape)
    elif mask.shape == pred.shape:
        cells = mask
    else:
        raise DimensionError(f"masked_mse mask shape {mask.shape} fits neither {pred.shape[:-1]} nor {pred.shape}")
    count = int(cells.sum())
    if count == 0:
        raise ContractError("masked_mse needs at least one masked entry")
    diff = np.where(cells, pred.data - target_arr, 0).astype(pred.dtype)
    loss = np.asarray((diff * diff).sum() / count, dtype=pred.dtype)
    parents = (pred, target) if isinstance(target, Tensor) else (pred,)

    def backward(g):
        gp = g * 2.0 * diff / count
        return (gp, -gp) if len(parents) == 2 else (gp,)

    return _make(loss, parents, backward)


def mse(pred: Tensor, target) -> Tensor:
    return masked_mse(pred, target, np.ones(pred.shape, dtype=bool))


# ---------------------------------------------------------------- optimisation


@dataclass
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    step_count: int = 0
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def like(cls, param: np.ndarray, **kw) -> "AdamState":
        return cls(np.zeros_like(param), np.zeros_like(param), **kw)


def adam_step(param: np.ndarray, grad: np.ndarray, state: AdamState) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state`` and returns the new param."""
    if param.shape != grad.shape or state.first_moment.shape != param.shape:
        raise DimensionError(
            f"adam_step shape mismatch: param {param.shape}, grad {grad.shape}, state {state.first_moment.shape}"
        )
    state.step_count += 1
    b1, b2 = state.beta1, state.beta2
    state.first_moment = b1 * state.first_moment + (1.0 - b1) * grad
    state.second_moment = b2 * state.second_moment + (1.0 - b2) * grad * grad
    m_hat = state.first_moment / (1.0 - b1**state.step_count)
    v_hat = state.second_moment / (1.0 - b2**state.step_count)
    step = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return (param - step).astype(param.dtype)


class Adam:
    def __init__(self, params: Iterable[Tensor], lr: float = 1e-4, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.states = [
            AdamState.like(p.data, learning_rate=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)
            for p in self.params
        ]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        for p, st in zip(self.params, self.states):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            st.learning_rate = self.lr
            p.data = adam_step(p.data, g.astype(p.dtype), st)


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params))
    if total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in params:
            p.grad = (p.grad * factor).astype(p.dtype)
    return total


# ---------------------------------------------------------------- gradient check


def gradcheck(fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    The error is ``max|analytic - numeric|`` over every checked entry,
    divided by the largest gradient magnitude seen across all ``params``
    (so tensors whose true gradient is zero, like a key bias under
    softmax, are judged on the scale of the whole check).  Run it on
    float64 tensors.
    """
    for p in params:
        p.grad = None
    fn().backward()
    max_diff, scale_ = 0.0, 0.0
    for p in params:
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            with no_grad():
                up = float(fn().data)
            flat[i] = orig - h
            with no_grad():
                down = float(fn().data)
            flat[i] = orig
            nflat[i] = (up - down) / (2 * h)
        max_diff = max(max_diff, float(np.abs(analytic - numeric).max()))
        scale_ = max(scale_, float(np.abs(analytic).max()), float(np.abs(numeric).max()))
    for p in params:
        p.grad = None
    return max_diff / max(scale_, 1e-12)
