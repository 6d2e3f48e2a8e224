"""Dense tensors with tape-based reverse-mode differentiation.

Tensors are channel-first arrays without a batch axis, ``[C, *spatial]``.
Operations executed inside an active :class:`Tape` are recorded when at least
one input requires a gradient; outside a tape every result is a constant.

    >>> w = Tensor([1.0, -2.0], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = sum_(square(w))
    >>> tape.backward(loss)
    >>> w.grad.tolist()
    [2.0, -4.0]
"""

from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "GradientError",
    "AdamState",
    "Adam",
    "adam_step",
    "record",
    "as_tensor",
    "get_dtype",
    "set_precision",
    "precision",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "square",
    "mean",
    "sum_",
    "concat_channels",
    "conv_nd",
    "leaky_relu",
    "upsample_nearest",
]

_DTYPE: type = np.float32
_TAPES: list["Tape"] = []


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GradientError(RuntimeError):
    """Raised for invalid backward calls and non-finite gradients."""


def get_dtype():
    return _DTYPE


def set_precision(bits: int) -> None:
    """Switch the default floating type globally (32 for training, 64 for checks)."""
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


@contextmanager
def precision(bits: int) -> Iterator[None]:
    previous = 32 if _DTYPE is np.float32 else 64
    set_precision(bits)
    try:
        yield
    finally:
        set_precision(previous)


class Tensor:
    """A dense array plus the bookkeeping needed for reverse-mode autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype or _DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
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

    def item(self) -> float:
        return float(self.data.item())

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Constant view of the same storage; the tape treats it as an input with no gradient."""
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.name = self.name
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scalar_mul(self, -1.0)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable operations.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    def __init__(self):
        self.nodes: list[Node] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _TAPES.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def signature(self) -> list[tuple]:
        """Op names with input and output shapes, for replay comparisons."""
        return [(n.op, tuple(t.shape for t in n.inputs), n.output.shape) for n in self.nodes]

    def backward(self, loss: Tensor) -> None:
        """Populate ``.grad`` on every leaf tensor that requires a gradient.

        Leaf gradients are overwritten, not accumulated. Nodes are visited in
        exact reverse recording order.
        """
        if loss.data.size != 1:
            raise GradientError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            raise GradientError("loss was not produced through the tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(n.output) for n in self.nodes}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            for t, gi in zip(node.inputs, node.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = t
        for key, t in leaves.items():
            t.grad = grads[key].astype(t.data.dtype, copy=False).reshape(t.shape)


def record(op: str, inputs: Sequence[Tensor], out_data: np.ndarray,
           backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap ``out_data`` as a tensor and record it on the active tape if needed.

    ``backward`` maps the output gradient to one gradient (or None) per input.
    This is the extension point other modules use to define fused ops.
    """
    out = Tensor(out_data, dtype=out_data.dtype if isinstance(out_data, np.ndarray) else None)
    if _TAPES and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _TAPES[-1].nodes.append(Node(op, tuple(inputs), out, backward))
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ----------------------------------------------------------------------------
# elementwise and reductions


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return record("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return record("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)
    return record("mul", (a, b), a.data * b.data, lambda g: (g * b.data, g * a.data))


def scalar_mul(a: Tensor, s: float) -> Tensor:
    a = as_tensor(a)
    s = a.dtype.type(s)
    return record("scalar_mul", (a,), a.data * s, lambda g: (g * s,))


def square(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return record("square", (a,), a.data * a.data, lambda g: (2 * g * a.data,))


def sum_(a: Tensor) -> Tensor:
    a = as_tensor(a)
    return record("sum", (a,), np.asarray(a.data.sum(), dtype=a.dtype),
                  lambda g: (np.full(a.shape, g, dtype=a.dtype),))


def mean(a: Tensor) -> Tensor:
    a = as_tensor(a)
    n = a.size
    return record("mean", (a,), np.asarray(a.data.mean(), dtype=a.dtype),
                  lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_channels: spatial shapes differ {a.shape} vs {b.shape}")
    ca = a.shape[0]
    return record("concat_channels", (a, b), np.concatenate([a.data, b.data], axis=0),
                  lambda g: (g[:ca], g[ca:]))


def leaky_relu(x: Tensor, alpha: float = 0.2) -> Tensor:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {alpha}")
    x = as_tensor(x)
    slope = np.where(x.data > 0, x.dtype.type(1), x.dtype.type(alpha))
    return record("leaky_relu", (x,), x.data * slope, lambda g: (g * slope,))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    if factor < 2:
        raise ValueError(f"upsample factor must be >= 2, got {factor}")
    x = as_tensor(x)
    d = x.ndim - 1
    out = x.data
    for ax in range(1, d + 1):
        out = np.repeat(out, factor, axis=ax)

    def backward(g):
        split = [x.shape[0]]
        for n in x.shape[1:]:
            split += [n, factor]
        return (g.reshape(split).sum(axis=tuple(range(2, 2 * d + 1, 2))),)

    return record("upsample_nearest", (x,), out, backward)


# ----------------------------------------------------------------------------
# convolution


def _same_pads(n: int, k: int, stride: int) -> tuple[int, int]:
    out = -(-n // stride)
    total = max((out - 1) * stride + k - n, 0)
    return total // 2, total - total // 2


def conv_nd(x: Tensor, kernels: Tensor, bias: Tensor | None = None,
            stride: int = 1, padding: str = "same") -> Tensor:
    """2D/3D cross-correlation of ``x[C_in, *sp]`` with ``kernels[C_out, C_in, k, ...]``.

    Same padding is zero padding with the extra cell (if any) on the upper
    side, giving output extents ``ceil(n / stride)``.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    d = kernels.ndim - 2
    if d not in (2, 3) or x.ndim != d + 1:
        raise ShapeError(f"conv_nd: expected {d}D input for kernels {kernels.shape}, got {x.shape}")
    c_out, c_in, *ks = kernels.shape
    k = ks[0]
    if any(kk != k for kk in ks) or k % 2 == 0:
        raise ShapeError(f"conv_nd: kernels must be odd and isotropic, got {kernels.shape}")
    if x.shape[0] != c_in:
        raise ShapeError(f"conv_nd: input channels {x.shape} do not match kernels {kernels.shape}")
    if stride not in (1, 2):
        raise ValueError(f"conv_nd: stride must be 1 or 2, got {stride}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"conv_nd: bias {bias.shape} does not match {c_out} output channels")
    spatial = x.shape[1:]
    if padding == "same":
        pads = [_same_pads(n, k, stride) for n in spatial]
    elif padding == "valid":
        if any(n < k for n in spatial):
            raise ShapeError(f"conv_nd: valid padding needs extents >= {k}, got {spatial}")
        pads = [(0, 0)] * d
    else:
        raise ValueError(f"unknown padding {padding!r}")

    xp = np.pad(x.data, [(0, 0)] + pads)
    win = sliding_window_view(xp, (k,) * d, axis=tuple(range(1, d + 1)))
    win = win[(slice(None),) + (slice(None, None, stride),) * d]
    out_sp = win.shape[1:d + 1]
    n_out = int(np.prod(out_sp))
    cols = np.moveaxis(win, 0, d).reshape(n_out, c_in * k ** d)
    wmat = kernels.data.reshape(c_out, -1)
    out = (cols @ wmat.T).T.reshape((c_out,) + out_sp)
    if bias is not None:
        out = out + bias.data.reshape((c_out,) + (1,) * d)

    def backward(g):
        g2 = g.reshape(c_out, n_out)
        gw = (g2 @ cols).reshape(kernels.shape) if kernels.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (g2.T @ wmat).reshape(out_sp + (c_in,) + (k,) * d)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for off in itertools.product(range(k), repeat=d):
                sl = tuple(slice(o, o + (m - 1) * stride + 1, stride) for o, m in zip(off, out_sp))
                gxp[(slice(None),) + sl] += np.moveaxis(gcols[(Ellipsis,) + off], -1, 0)
            gx = gxp[(slice(None),) + tuple(slice(lo, lo + n) for (lo, _), n in zip(pads, spatial))]
        return gx, gw, gb

    inputs = (x, kernels) if bias is None else (x, kernels, bias)
    return record("conv_nd", inputs, out, backward)


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
              state: AdamState, lr: float) -> None:
    """One bias-corrected Adam update, in place on ``params`` and ``state``.

    A missing gradient is treated as zero. Non-finite gradients abort the
    step before any parameter is touched.
    """
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise GradientError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1 ** state.t
    bc2 = 1.0 - state.beta2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name!r} has shape {g.shape}, parameter {p.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p.data -= update.astype(p.dtype, copy=False)


class Adam:
    """Adam over a fixed, named parameter set."""

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.state = AdamState(beta1, beta2, eps)

    def step(self) -> None:
        adam_step(self.params, {k: p.grad for k, p in self.params.items()}, self.state, self.lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None
