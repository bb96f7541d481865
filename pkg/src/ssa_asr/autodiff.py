"""Dense float64 tensors with tape-based reverse-mode differentiation.

The primitive set is exactly what the encoder, injection module and CTC head
need; there is no general broadcasting engine. Every primitive checks its
output for NaN/Inf and raises NumericError, so a non-finite value is caught
at the op that produced it.

Recording only happens inside a `with tape():` block. Outside of one (the
inference path) primitives just compute numpy values, which keeps streaming
decode cheap.
"""

from __future__ import annotations

from contextlib import contextmanager
from typing import Callable, Iterator, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in creation order, which is a topological order of the
    compute graph, so the backward pass is a single reverse sweep.
    """

    __slots__ = ("nodes",)

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []

    def __len__(self) -> int:
        return len(self.nodes)


_TAPE_STACK: list[Tape] = []


@contextmanager
def tape() -> Iterator[Tape]:
    """Activate a fresh tape; primitives record onto it while inside."""
    t = Tape()
    _TAPE_STACK.append(t)
    try:
        yield t
    finally:
        _TAPE_STACK.pop()


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def _ensure_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite value produced by {op}")


class Tensor:
    """Immutable-by-convention float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        _ensure_finite(arr, "tensor creation")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # small amount of sugar; everything routes through the primitives below
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other) -> "Tensor":
        return self.__mul__(other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    # += so weight sharing across instances and time steps sums correctly
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _make(out_data: np.ndarray, op: str, parents: tuple[Tensor, ...],
          backward: Callable[[np.ndarray], None]) -> Tensor:
    _ensure_finite(out_data, op)
    t = _active_tape()
    track = t is not None and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.requires_grad = track
    out.grad = None
    if track:
        out._parents = parents
        out._backward = backward
        t.nodes.append(out)
    else:
        out._parents = ()
        out._backward = None
    return out


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar loss.

    Returns a map from every requires_grad tensor touched by the tape to its
    gradient (zeros if the tensor did not influence the loss). Gradients are
    also left on `.grad`.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.shape}")
    t = _active_tape()
    if t is None or not t.nodes:
        raise ContractError("backward called with no active non-empty tape")

    loss.grad = np.ones_like(loss.data)
    tracked: dict[int, Tensor] = {}
    for node in reversed(t.nodes):
        for p in node._parents:
            if p.requires_grad:
                tracked.setdefault(id(p), p)
        if node.requires_grad:
            tracked.setdefault(id(node), node)
        if node.grad is None or node._backward is None:
            continue
        node._backward(node.grad)

    out: dict[Tensor, np.ndarray] = {}
    for tensor in tracked.values():
        out[tensor] = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
    return out


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    """a + b. b may match a, be a last-axis bias vector, match a.shape[1:],
    or be a scalar."""
    a, b = as_tensor(a), as_tensor(b)
    if b.shape == a.shape:
        mode = "same"
    elif b.ndim == 1 and a.ndim >= 1 and a.shape[-1:] == b.shape:
        mode = "bias"
    elif a.ndim >= 1 and b.shape == a.shape[1:]:
        mode = "lead"
    elif b.ndim == 0:
        mode = "scalar"
    else:
        raise DimensionError(f"add: incompatible shapes {a.shape} and {b.shape}")
    out = a.data + b.data

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            if mode == "same":
                _accumulate(b, g)
            elif mode == "bias":
                _accumulate(b, g.reshape(-1, b.shape[0]).sum(axis=0))
            elif mode == "lead":
                _accumulate(b, g.sum(axis=0))
            else:
                _accumulate(b, np.asarray(g.sum()))

    return _make(out, "add", (a, b), bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; b must match a or broadcast to it with size-1 axes
    (same rank), e.g. a (T, D) masked by b (T, 1)."""
    a, b = as_tensor(a), as_tensor(b)
    if b.shape != a.shape:
        if b.ndim != a.ndim or any(
            bs not in (1, as_) for bs, as_ in zip(b.shape, a.shape)
        ):
            raise DimensionError(f"mul: incompatible shapes {a.shape} and {b.shape}")
    out = a.data * b.data
    reduce_axes = tuple(i for i, (bs, as_) in enumerate(zip(b.shape, a.shape)) if bs == 1 and as_ != 1)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            gb = g * a.data
            if reduce_axes:
                gb = gb.sum(axis=reduce_axes, keepdims=True)
            _accumulate(b, gb)

    return _make(out, "mul", (a, b), bw)


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    out = a.data * c

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, g * c)

    return _make(out, "scale", (a,), bw)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Supported: (n,k)@(k,m), (B,n,k)@(B,k,m), (B,n,k)@(k,m)."""
    a, b = as_tensor(a), as_tensor(b)
    ok = (
        (a.ndim == 2 and b.ndim == 2 and a.shape[1] == b.shape[0])
        or (a.ndim == 3 and b.ndim == 3 and a.shape[0] == b.shape[0] and a.shape[2] == b.shape[1])
        or (a.ndim == 3 and b.ndim == 2 and a.shape[2] == b.shape[0])
    )
    if not ok:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g: np.ndarray) -> None:
        if a.requires_grad:
            _accumulate(a, np.matmul(g, np.swapaxes(b.data, -1, -2)))
        if b.requires_grad:
            if a.ndim == 3 and b.ndim == 2:
                k, m = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, m)
            else:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, gb)

    return _make(out, "matmul", (a, b), bw)


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g * (x.data > 0.0))

    return _make(out, "relu", (x,), bw)


def swish(x: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    x = as_tensor(x)
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g * (sig + x.data * sig * (1.0 - sig)))

    return _make(out, "swish", (x,), bw)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax along `axis`; each slice sums to 1."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            inner = (g * out).sum(axis=axis, keepdims=True)
            _accumulate(x, out * (g - inner))

    return _make(out, "softmax", (x,), bw)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g - np.exp(out) * g.sum(axis=axis, keepdims=True))

    return _make(out, "log_softmax", (x,), bw)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    d = x.shape[-1]
    if d < 2:
        raise ContractError(f"layer_norm needs last-axis size >= 2, got {d}")
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs last axis {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    y = xc * inv
    out = y * gain.data + bias.data

    def bw(g: np.ndarray) -> None:
        if bias.requires_grad:
            _accumulate(bias, g.reshape(-1, d).sum(axis=0))
        if gain.requires_grad:
            _accumulate(gain, (g * y).reshape(-1, d).sum(axis=0))
        if x.requires_grad:
            dy = g * gain.data
            m1 = dy.mean(axis=-1, keepdims=True)
            m2 = (dy * y).mean(axis=-1, keepdims=True)
            _accumulate(x, inv * (dy - m1 - y * m2))

    return _make(out, "layer_norm", (x, gain, bias), bw)


def conv1d_strided(x: Tensor, w: Tensor, stride: int) -> Tensor:
    """Strided 1-D convolution used for subsampling.

    x is (T, D_in), w is (K, D_in, D_out). Output frame t covers input rows
    [t*stride + stride - K, t*stride + stride - 1] (right-aligned, zero-padded
    on the left), so frame t never sees past row t*stride + stride - 1.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 3 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv1d_strided: incompatible shapes {x.shape} and {w.shape}")
    t_in, d_in = x.shape
    k = w.shape[0]
    if t_in < stride:
        raise ContractError(f"conv1d_strided: input of {t_in} frames shorter than stride {stride}")
    t_out = t_in // stride
    pad = max(0, k - stride)
    xp = np.vstack([np.zeros((pad, d_in)), x.data]) if pad else x.data
    starts = pad + np.arange(t_out) * stride + stride - k
    out = np.zeros((t_out, w.shape[2]))
    for j in range(k):
        out += xp[starts + j] @ w.data[j]

    def bw(g: np.ndarray) -> None:
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for j in range(k):
                gw[j] = xp[starts + j].T @ g
            _accumulate(w, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[starts + j] += g @ w.data[j].T
            _accumulate(x, gxp[pad:])

    return _make(out, "conv1d_strided", (x, w), bw)


def conv1d_depthwise_causal(x: Tensor, w: Tensor, history: np.ndarray | None = None) -> Tensor:
    """Causal depthwise conv. x is (T, D), w is (K, D); output frame t mixes
    input frames t-K+1 .. t per channel.

    `history` supplies the K-1 frames preceding x (streaming); it is constant
    data, never differentiated. Defaults to zeros, matching offline padding.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv1d_depthwise_causal: incompatible shapes {x.shape} and {w.shape}")
    t_len, d = x.shape
    k = w.shape[0]
    if history is None:
        history = np.zeros((k - 1, d))
    if history.shape != (k - 1, d):
        raise DimensionError(
            f"conv1d_depthwise_causal: history {history.shape} must be {(k - 1, d)}"
        )
    xp = np.vstack([history, x.data])
    out = np.zeros((t_len, d))
    for j in range(k):
        out += xp[j:j + t_len] * w.data[j]

    def bw(g: np.ndarray) -> None:
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for j in range(k):
                gw[j] = (g * xp[j:j + t_len]).sum(axis=0)
            _accumulate(w, gw)
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[j:j + t_len] += g * w.data[j]
            _accumulate(x, gxp[k - 1:])

    return _make(out, "conv1d_depthwise_causal", (x, w), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, g.reshape(x.shape))

    return _make(out, "reshape", (x,), bw)


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    x = as_tensor(x)
    out = np.swapaxes(x.data, a, b)

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, np.swapaxes(g, a, b))

    return _make(out, "swapaxes", (x,), bw)


def tsum(x: Tensor) -> Tensor:
    """Sum of all elements, as a scalar tensor."""
    x = as_tensor(x)
    out = np.asarray(x.data.sum())

    def bw(g: np.ndarray) -> None:
        if x.requires_grad:
            _accumulate(x, np.broadcast_to(g, x.shape).copy())

    return _make(out, "tsum", (x,), bw)


def tmean(x: Tensor) -> Tensor:
    return scale(tsum(x), 1.0 / as_tensor(x).data.size)


def add_n(terms: Sequence[Tensor]) -> Tensor:
    """Fold a list of same-shape tensors into their sum."""
    if not terms:
        raise ContractError("add_n of an empty list")
    acc = terms[0]
    for t in terms[1:]:
        acc = add(acc, t)
    return acc
