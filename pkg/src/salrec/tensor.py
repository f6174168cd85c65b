"""Minimal reverse-mode autodiff over dense float64 arrays.

Only the operations the saliency network needs are implemented:
2d convolution, 2x2 max pooling, nearest-neighbour upsampling,
sigmoid/tanh/relu, elementwise arithmetic, log/clamp and reductions.
No broadcasting except the conv bias over the channel axis and the
internal broadcast-multiply used by peepholes and the trainable alpha.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationTape",
    "no_grad",
    "backward",
    "conv2d",
    "maxpool2d",
    "upsample_nearest",
    "sigmoid",
    "tanh",
    "relu",
    "add",
    "sub",
    "mul",
    "broadcast_mul",
    "scale",
    "add_const",
    "log",
    "clamp",
    "tsum",
    "tmean",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (evaluation-mode forwards)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    """Dense n-dimensional float64 array with an optional gradient buffer.

    Data is immutable by convention once the tensor is created; only the
    grad buffer is mutated (by backward passes and ``zero_grad``).
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple = ()
        self._backward_fn: Optional[Callable[[np.ndarray], None]] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def detach(self) -> "Tensor":
        """A new leaf sharing this tensor's values, severed from the graph."""
        return Tensor(self.data.copy(), requires_grad=False)

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: Sequence[Tensor],
          backward_fn: Callable[[np.ndarray], None]) -> Tensor:
    """Create a result tensor, recording the op if any parent needs grad."""
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


class ComputationTape:
    """Topologically ordered record of the ops reachable from a root tensor.

    Reverse replay visits every recorded op exactly once and accumulates
    gradients additively into every tensor that requires them.
    """

    def __init__(self, root: Tensor):
        self.root = root
        self.ops: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:  # iterative DFS; sequences can be deep
            node, expanded = stack.pop()
            if expanded:
                self.ops.append(node)
                continue
            if id(node) in seen or node._backward_fn is None:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))

    def replay_backward(self) -> None:
        self.root.accumulate_grad(np.ones_like(self.root.data))
        for node in reversed(self.ops):
            node._backward_fn(node.grad)


def backward(loss: Tensor) -> ComputationTape:
    """Fill grad buffers of every tensor the scalar loss depends on."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    tape = ComputationTape(loss)
    tape.replay_backward()
    return tape


# ---------------------------------------------------------------------------
# elementwise arithmetic


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _node(a.data + b.data, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(-g)

    return _node(a.data - b.data, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * b.data)
        if b.requires_grad:
            b.accumulate_grad(g * a.data)

    return _node(a.data * b.data, (a, b), bwd)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum g down to `shape` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def broadcast_mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product with numpy broadcasting.

    Used where broadcasting is intentional: scalar trainable alpha against a
    feature map, and per-channel peephole weights against the cell state.
    """
    data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.shape))

    return _node(data, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return _node(a.data * c, (a,), bwd)


def add_const(a: Tensor, c: float) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g)

    return _node(a.data + float(c), (a,), bwd)


# ---------------------------------------------------------------------------
# activations and pointwise functions


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * s * (1.0 - s))

    return _node(s, (a,), bwd)


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * (1.0 - t * t))

    return _node(t, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0  # subgradient at 0 is 0

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * mask)

    return _node(np.where(mask, a.data, 0.0), (a,), bwd)


def activation(a: Tensor, kind: str) -> Tensor:
    try:
        return {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}[kind](a)
    except KeyError:
        raise ValueError(f"unknown activation kind {kind!r}") from None


def log(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g / a.data)

    return _node(np.log(a.data), (a,), bwd)


def clamp(a: Tensor, lo: float, hi: float) -> Tensor:
    """Clip values to [lo, hi]; gradient is zero outside the interval."""
    inside = (a.data >= lo) & (a.data <= hi)

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(g * inside)

    return _node(np.clip(a.data, lo, hi), (a,), bwd)


# ---------------------------------------------------------------------------
# reductions


def tsum(a: Tensor) -> Tensor:
    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, g.reshape(-1)[0]))

    return _node(np.asarray(a.data.sum()), (a,), bwd)


def tmean(a: Tensor) -> Tensor:
    n = a.data.size

    def bwd(g):
        if a.requires_grad:
            a.accumulate_grad(np.full_like(a.data, g.reshape(-1)[0] / n))

    return _node(np.asarray(a.data.mean()), (a,), bwd)


# ---------------------------------------------------------------------------
# spatial ops


def conv2d(input: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2d cross-correlation of NCHW input with an OIHW kernel.

    Output spatial size is (H + 2*padding - kH) // stride + 1. Bias, when
    given, is added per output channel (the one sanctioned broadcast).
    """
    if input.data.ndim != 4 or kernel.data.ndim != 4:
        raise ValueError(
            f"conv2d expects 4d input/kernel, got {input.shape} and {kernel.shape}")
    if stride < 1:
        raise ValueError(f"conv2d stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"conv2d padding must be >= 0, got {padding}")
    n, cin, h, w = input.shape
    cout, kcin, kh, kw = kernel.shape
    if cin != kcin:
        raise ValueError(
            f"conv2d channel mismatch: input {input.shape} has Cin={cin}, "
            f"kernel {kernel.shape} expects Cin={kcin}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(
            f"conv2d kernel {kernel.shape} larger than padded input "
            f"({hp}x{wp} from {input.shape} with padding={padding})")
    if bias is not None and bias.shape != (cout,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({cout},)")

    xp = np.pad(input.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    windows = windows[:, :, ::stride, ::stride]  # (N, Cin, H', W', kH, kW)
    ho, wo = windows.shape[2], windows.shape[3]
    cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, cin * kh * kw)
    kmat = kernel.data.reshape(cout, cin * kh * kw)
    out = cols @ kmat.T  # (N, H'*W', Cout)
    if bias is not None:
        out = out + bias.data
    out = out.transpose(0, 2, 1).reshape(n, cout, ho, wo)

    def bwd(g):
        gmat = g.reshape(n, cout, ho * wo).transpose(0, 2, 1)  # (N, H'W', Cout)
        if kernel.requires_grad:
            dk = np.einsum("npo,npk->ok", gmat, cols)
            kernel.accumulate_grad(dk.reshape(kernel.shape))
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=(0, 2, 3)))
        if input.requires_grad:
            dcols = (gmat @ kmat).reshape(n, ho, wo, cin, kh, kw)
            dcols = dcols.transpose(0, 3, 4, 5, 1, 2)  # (N, Cin, kH, kW, H', W')
            dxp = np.zeros((n, cin, hp, wp))
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i:i + stride * ho:stride,
                        j:j + stride * wo:stride] += dcols[:, :, i, j]
            if padding:
                dxp = dxp[:, :, padding:hp - padding, padding:wp - padding]
            input.accumulate_grad(dxp)

    parents = (input, kernel) if bias is None else (input, kernel, bias)
    return _node(out, parents, bwd)


def maxpool2d(input: Tensor) -> Tensor:
    """2x2 max pooling with stride 2; ties route to the first position in
    row-major window order."""
    if input.data.ndim != 4:
        raise ValueError(f"maxpool2d expects 4d input, got {input.shape}")
    n, c, h, w = input.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2d requires even spatial dims, got {h}x{w}")
    win = (input.data.reshape(n, c, h // 2, 2, w // 2, 2)
           .transpose(0, 1, 2, 4, 3, 5)
           .reshape(n, c, h // 2, w // 2, 4))
    idx = win.argmax(axis=-1)  # first max in row-major order
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        if input.requires_grad:
            dwin = np.zeros_like(win)
            np.put_along_axis(dwin, idx[..., None], g[..., None], axis=-1)
            dx = (dwin.reshape(n, c, h // 2, w // 2, 2, 2)
                  .transpose(0, 1, 2, 4, 3, 5)
                  .reshape(n, c, h, w))
            input.accumulate_grad(dx)

    return _node(out, (input,), bwd)


def upsample_nearest(input: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by a factor of 2 in both spatial dims."""
    if input.data.ndim != 4:
        raise ValueError(f"upsample_nearest expects 4d input, got {input.shape}")
    out = input.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        if input.requires_grad:
            n, c, h2, w2 = g.shape
            dx = g.reshape(n, c, h2 // 2, 2, w2 // 2, 2).sum(axis=(3, 5))
            input.accumulate_grad(dx)

    return _node(out, (input,), bwd)
