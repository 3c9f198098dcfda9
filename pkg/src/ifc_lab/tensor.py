"""Dense float64 tensors with reverse-mode differentiation and FLOP counting.

Every primitive records its parents and a backward closure on the output
tensor; :meth:`Tensor.backward` walks that graph in reverse topological
order. The graph is rebuilt on every forward pass.

Matmul-like primitives (``matmul``, ``conv2d``) add their multiply-add count
to a thread-local :class:`FlopLedger` while it is enabled. Element-wise ops,
softmax and normalisation are free under this convention.
"""
from __future__ import annotations

import contextlib
import threading
import warnings
from collections import defaultdict
from typing import Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ContractError(ValueError):
    """A precondition of a primitive was violated (bad shapes, bad arguments)."""


class NonFiniteError(ArithmeticError):
    """A primitive produced NaN or Inf."""


class DetachedGraphWarning(UserWarning):
    pass


class FlopLedger:
    """Multiply-add counters keyed by operation kind."""

    def __init__(self):
        self.counters: dict[str, int] = defaultdict(int)
        self.enabled = True

    def add(self, kind: str, macs: int) -> None:
        if self.enabled:
            self.counters[kind] += int(macs)

    def snapshot(self) -> dict[str, int]:
        return dict(self.counters)

    def total(self) -> int:
        return sum(self.counters.values())

    def reset(self) -> None:
        self.counters.clear()


class _State(threading.local):
    def __init__(self):
        self.ledger = FlopLedger()
        self.grad_enabled = True
        self.check_finite = True


_state = _State()


def ledger() -> FlopLedger:
    return _state.ledger


def flop_snapshot() -> dict[str, int]:
    """Copy of the current thread's counters."""
    return _state.ledger.snapshot()


def flop_reset() -> None:
    _state.ledger.reset()


def flop_total() -> int:
    return _state.ledger.total()


@contextlib.contextmanager
def flops_disabled():
    led = _state.ledger
    prev = led.enabled
    led.enabled = False
    try:
        yield
    finally:
        led.enabled = prev


@contextlib.contextmanager
def no_grad():
    prev = _state.grad_enabled
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def grad_enabled() -> bool:
    return _state.grad_enabled


def set_finite_checks(flag: bool) -> None:
    _state.check_finite = bool(flag)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    # construction helpers -------------------------------------------------
    @classmethod
    def _result(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data if data.dtype == DTYPE else data.astype(DTYPE)
        if _state.check_finite and not np.isfinite(out.data).all():
            raise NonFiniteError(f"non-finite values produced by {op}")
        track = _state.grad_enabled and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out.grad = None
        out.op = op
        if track:
            out._parents = tuple(parents)
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
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    # autodiff -------------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            if not np.isfinite(self.data).all():
                raise NonFiniteError("loss is not finite")
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            warnings.warn("loss is detached from every trainable leaf; grads stay zero",
                          DetachedGraphWarning, stacklevel=2)
            return

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

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.grad is None:
                    node.grad = np.zeros_like(node.data)
                node.grad += g
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # operator sugar -------------------------------------------------------
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
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def sigmoid(self):
        return sigmoid(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# elementwise --------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Tensor._result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return Tensor._result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._result(a.data / b.data, (a, b), bw, "div")


def power(x: Tensor, exponent: float) -> Tensor:
    x = as_tensor(x)
    out = x.data ** exponent

    def bw(g):
        return (g * exponent * x.data ** (exponent - 1),)

    return Tensor._result(out, (x,), bw, "pow")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)

    def bw(g):
        return (g * out,)

    return Tensor._result(out, (x,), bw, "exp")


def log(x: Tensor) -> Tensor:
    def bw(g):
        return (g / x.data,)

    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(x.data)
    return Tensor._result(out, (x,), bw, "log")


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    out = np.clip(x.data, lo, hi)

    def bw(g):
        keep = np.ones_like(x.data, dtype=bool)
        if lo is not None:
            keep &= x.data >= lo
        if hi is not None:
            keep &= x.data <= hi
        return (g * keep,)

    return Tensor._result(out, (x,), bw, "clamp")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def bw(g):
        return (g * mask,)

    return Tensor._result(x.data * mask, (x,), bw, "relu")


def _sigmoid_np(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid_np(x.data)

    def bw(g):
        return (g * out * (1.0 - out),)

    return Tensor._result(out, (x,), bw, "sigmoid")


def log_sigmoid(x: Tensor) -> Tensor:
    """log(sigmoid(x)) without overflow."""
    z = x.data
    out = np.minimum(z, 0.0) - np.log1p(np.exp(-np.abs(z)))

    def bw(g):
        return (g * (1.0 - _sigmoid_np(z)),)

    return Tensor._result(out, (x,), bw, "log_sigmoid")


# reductions and shape -----------------------------------------------------
def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._result(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = x.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        n = int(np.prod([x.shape[a] for a in axes]))
    return tsum(x, axis, keepdims) * (1.0 / n)


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)

    def bw(g):
        return (g.reshape(x.shape),)

    return Tensor._result(out, (x,), bw, "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = np.argsort(axes)

    def bw(g):
        return (np.transpose(g, inv),)

    return Tensor._result(np.transpose(x.data, axes), (x,), bw, "transpose")


def swap_last(x: Tensor) -> Tensor:
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, tuple(axes))


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    basic = _is_basic_index(index)

    def bw(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] += g
        else:
            np.add.at(full, index, g)
        return (full,)

    return Tensor._result(np.array(out, dtype=DTYPE), (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ax = axis % tensors[0].ndim
    sizes = [t.shape[ax] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, splits, axis=ax))

    return Tensor._result(np.concatenate([t.data for t in tensors], axis=ax), tensors, bw, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):])
                for t in tensors]
    return concat(expanded, axis)


# linear algebra -----------------------------------------------------------
def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product ``a[..., n, k] @ b[..., k, m]``.

    Leading extents must be equal or absent on one side. Counts n*k*m
    multiply-adds per batch element.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ContractError(f"matmul needs >= 2-d operands, got {a.shape} and {b.shape}")
    n, k = a.shape[-2:]
    k2, m = b.shape[-2:]
    if k != k2:
        raise ContractError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    la, lb = a.shape[:-2], b.shape[:-2]
    if la and lb and la != lb:
        if len(la) != len(lb) or any(x != y and x != 1 and y != 1 for x, y in zip(la, lb)):
            raise ContractError(f"matmul batch extents not broadcastable: {a.shape} @ {b.shape}")
    batch = np.broadcast_shapes(la, lb)
    _state.ledger.add("matmul", int(np.prod(batch, dtype=np.int64)) * n * k * m)
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            if b.ndim == 2 and a.ndim > 2:
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            else:
                gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return Tensor._result(out, (a, b), bw, "matmul")


def softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ContractError("softmax over an empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return Tensor._result(out, (x,), bw, "softmax")


softmax = softmax_lastdim


def log_softmax_lastdim(x: Tensor) -> Tensor:
    if x.ndim == 0 or x.shape[-1] < 1:
        raise ContractError("log-softmax over an empty last dimension")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return Tensor._result(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ContractError("layer_norm over a zero-length axis")
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ContractError(f"gamma/beta must have shape ({d},), got {gamma.shape}, {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = gg = gb = None
        if gamma.requires_grad:
            gg = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gb = g.reshape(-1, d).sum(axis=0)
        if x.requires_grad:
            gh = g * gamma.data
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True)
                         - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, gg, gb

    return Tensor._result(out, (x, gamma, beta), bw, "layer_norm")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ContractError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)

    def bw(g):
        return (g * keep,)

    return Tensor._result(x.data * keep, (x,), bw, "dropout")


# convolution --------------------------------------------------------------
def _edge_index(n: int, pad: int) -> np.ndarray:
    return np.clip(np.arange(-pad, n + pad), 0, n - 1)


def pad_edge(x: Tensor, pad: int) -> Tensor:
    """Replicate-pad the last two axes by ``pad`` on every side."""
    if pad == 0:
        return x
    H, W = x.shape[-2:]
    ih, iw = _edge_index(H, pad), _edge_index(W, pad)
    out = x.data[..., ih, :][..., iw]

    def bw(g):
        gh = np.zeros(g.shape[:-2] + (H, g.shape[-1]))
        for j, src in enumerate(ih):
            gh[..., src, :] += g[..., j, :]
        gx = np.zeros(x.shape)
        for j, src in enumerate(iw):
            gx[..., src] += gh[..., j]
        return (gx,)

    return Tensor._result(out, (x,), bw, "pad_edge")


def pad_zero(x: Tensor, pad: int) -> Tensor:
    if pad == 0:
        return x
    widths = [(0, 0)] * (x.ndim - 2) + [(pad, pad), (pad, pad)]

    def bw(g):
        return (g[..., pad:-pad, pad:-pad],)

    return Tensor._result(np.pad(x.data, widths), (x,), bw, "pad_zero")


def conv2d(x: Tensor, w: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, padding_mode: str = "zeros") -> Tensor:
    """Cross-correlation of ``x[B, C_in, H, W]`` with ``w[C_out, C_in, k, k]``.

    Counts ``output_elems * C_in * k * k`` multiply-adds.
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ContractError(f"conv2d expects 4-d input and weight, got {x.shape}, {w.shape}")
    B, cin, H, W = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w or kh != kw:
        raise ContractError(f"conv2d channel/kernel mismatch: input {x.shape}, weight {w.shape}")
    if bias is not None and bias.shape != (cout,):
        raise ContractError(f"conv2d bias must have shape ({cout},)")
    k = kh
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    if Ho <= 0 or Wo <= 0:
        raise ContractError(f"conv2d output extent non-positive for input {H}x{W}, k={k}, "
                            f"stride={stride}, padding={padding}")
    if padding_mode == "replicate":
        xp = pad_edge(x, padding)
    elif padding_mode == "zeros":
        xp = pad_zero(x, padding)
    else:
        raise ContractError(f"unknown padding mode {padding_mode!r}")

    _state.ledger.add("conv2d", B * cout * Ho * Wo * cin * k * k)

    xd = xp.data
    if k == 1:
        cols = xd[:, :, ::stride, ::stride][:, :, :Ho, :Wo].transpose(0, 2, 3, 1).reshape(-1, cin)
    else:
        win = np.lib.stride_tricks.sliding_window_view(xd, (k, k), axis=(2, 3))
        win = win[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, cin * k * k)
    wmat = w.data.reshape(cout, -1)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(B, Ho, Wo, cout).transpose(0, 3, 1, 2)

    parents = (xp, w) if bias is None else (xp, w, bias)

    def bw(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, cout)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gxp = None
        if xp.requires_grad:
            gcols = gm @ wmat
            gxp = np.zeros(xd.shape)
            if k == 1:
                gxp[:, :, 0:Ho * stride:stride, 0:Wo * stride:stride] += \
                    gcols.reshape(B, Ho, Wo, cin).transpose(0, 3, 1, 2)
            else:
                gc = np.ascontiguousarray(gcols.reshape(B, Ho, Wo, cin, k, k).transpose(4, 5, 0, 3, 1, 2))
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + Ho * stride:stride, j:j + Wo * stride:stride] += gc[i, j]
        grads = [gxp, gw]
        if bias is not None:
            grads.append(gm.sum(axis=0))
        return tuple(grads)

    return Tensor._result(np.ascontiguousarray(out), parents, bw, "conv2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    out = x.data.repeat(2, axis=-2).repeat(2, axis=-1)

    def bw(g):
        s = g.shape
        return (g.reshape(s[:-2] + (s[-2] // 2, 2, s[-1] // 2, 2)).sum(axis=(-3, -1)),)

    return Tensor._result(out, (x,), bw, "upsample")


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    return float(np.sqrt(total))
