"""Dense float tensors with tape-based reverse-mode differentiation.

Operations record themselves onto the innermost active :class:`Tape` when at
least one input requires a gradient. Outside a tape every op is a plain
forward computation, which is how "constant" branches (the other generator's
batch, frozen networks) are evaluated.

    with Tape() as tape:
        loss = mean(square(x))
    tape.backward(loss)

Ops preserve the floating dtype of their inputs; training runs in float32,
gradient checks promote to float64.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "NonFiniteError",
    "Tensor",
    "Tape",
    "backward",
    "grad_check",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "add_scalar",
    "expand",
    "reshape",
    "detach",
    "sum",
    "mean",
    "variance",
    "abs",
    "sqrt",
    "floored_sqrt",
    "square",
    "tanh",
    "sigmoid",
    "softplus",
    "leaky_relu",
    "relu",
    "matmul",
    "conv2d",
    "conv1x1",
    "upsample_nearest2x",
    "avgpool2x",
    "pixel_norm",
]

_node_ids = itertools.count()
_tape_stack: list["Tape"] = []

PIXEL_NORM_EPS = 1e-8


class NonFiniteError(FloatingPointError):
    """A forward op produced NaN/Inf from finite inputs."""


class Tensor:
    """n-dimensional float array that can take part in a tape."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_is_leaf")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id = next(_node_ids)
        self._is_leaf = True

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
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, other) if isinstance(other, Tensor) else add_scalar(self, other)

    def __radd__(self, other):
        return add_scalar(self, other)

    def __sub__(self, other):
        return sub(self, other) if isinstance(other, Tensor) else add_scalar(self, -other)

    def __rsub__(self, other):
        return add_scalar(neg(self), other)

    def __mul__(self, other):
        return mul(self, other) if isinstance(other, Tensor) else scale(self, other)

    def __rmul__(self, other):
        return scale(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return div(self, other)
        return scale(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Op:
    kind: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of differentiable ops.

    Ops are appended in execution order, so replaying them in reverse is a
    valid topological order for the backward pass.
    """

    def __init__(self):
        self.ops: list[_Op] = []

    def __enter__(self) -> "Tape":
        _tape_stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape_stack.remove(self)

    def __len__(self) -> int:
        return len(self.ops)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not loss.requires_grad:
            return
        grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        if loss._is_leaf:
            leaves[loss.node_id] = loss
        for op in reversed(self.ops):
            g = grads.pop(op.output.node_id, None)
            if g is None:
                continue
            for t, gi in zip(op.inputs, op.backward(g)):
                if gi is None or not t.requires_grad:
                    continue
                if t._is_leaf:
                    leaves[t.node_id] = t
                prev = grads.get(t.node_id)
                grads[t.node_id] = gi if prev is None else prev + gi
        for nid, t in leaves.items():
            g = np.asarray(grads[nid], dtype=t.dtype).reshape(t.shape)
            t.grad = g.copy() if t.grad is None else t.grad + g


def backward(tape: Tape, loss: Tensor) -> None:
    tape.backward(loss)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(kind: str, inputs: tuple[Tensor, ...], out: np.ndarray, bwd) -> Tensor:
    if not np.isfinite(out).all() and all(np.isfinite(t.data).all() for t in inputs):
        raise NonFiniteError(f"{kind} produced non-finite values from finite inputs")
    tape = _tape_stack[-1] if _tape_stack else None
    track = tape is not None and any(t.requires_grad for t in inputs)
    res = Tensor(out, requires_grad=track)
    if track:
        res._is_leaf = False
        tape.ops.append(_Op(kind, inputs, res, bwd))
    return res


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{kind}: shape mismatch {a.shape} vs {b.shape} (use expand)")


# -- elementwise -----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def div(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _emit("div", (a, b), out, lambda g: (g / bd, -g * out / bd))


def neg(x: Tensor) -> Tensor:
    return _emit("neg", (x,), -x.data, lambda g: (-g,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", (x,), x.data * c, lambda g: (g * c,))


def add_scalar(x: Tensor, c: float) -> Tensor:
    return _emit("add_scalar", (x,), x.data + float(c), lambda g: (g,))


def abs(x: Tensor) -> Tensor:  # noqa: A001
    sign = np.sign(x.data)
    return _emit("abs", (x,), np.abs(x.data), lambda g: (g * sign,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _emit("sqrt", (x,), out, lambda g: (g * 0.5 / out,))


def floored_sqrt(x: Tensor, eps: float) -> Tensor:
    """sqrt(x) whose derivative uses sqrt(x + eps), so it stays finite at 0."""
    out = np.sqrt(x.data)
    dden = np.sqrt(x.data + eps)
    return _emit("floored_sqrt", (x,), out, lambda g: (g * 0.5 / dden,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit("square", (x,), xd * xd, lambda g: (2.0 * g * xd,))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype, copy=False)


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return _emit("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)), computed without overflow."""
    xd = x.data
    out = np.maximum(xd, 0) + np.log1p(np.exp(-np.abs(xd)))
    return _emit("softplus", (x,), out, lambda g: (g * _sigmoid(xd),))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    slope = float(slope)
    mask = x.data > 0
    out = np.where(mask, x.data, x.data * slope)
    return _emit("leaky_relu", (x,), out, lambda g: (np.where(mask, g, g * slope),))


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


# -- shape ----------------------------------------------------------------

def expand(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast of ``x`` to ``shape``; backward sums the copies."""
    shape = tuple(shape)
    out = np.broadcast_to(x.data, shape).copy()
    lead = len(shape) - x.ndim
    axes = tuple(range(lead)) + tuple(
        i + lead for i, n in enumerate(x.shape) if n == 1 and shape[i + lead] != 1
    )

    def bwd(g):
        r = g.sum(axis=axes, keepdims=True) if axes else g
        return (r.reshape(x.shape),)

    return _emit("expand", (x,), out, bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    src = x.shape
    return _emit("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(src),))


def detach(x: Tensor) -> Tensor:
    """Same values, cut from the tape."""
    return Tensor(x.data)


# -- reductions -------------------------------------------------------------

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axis(axis, x.ndim)
    out = np.asarray(x.data.sum(axis=axes, keepdims=keepdims), dtype=x.dtype)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _emit("sum", (x,), out, bwd)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes]))
    out = np.asarray(x.data.mean(axis=axes, keepdims=keepdims), dtype=x.dtype)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, x.shape).copy(),)

    return _emit("mean", (x,), out, bwd)


def variance(x: Tensor) -> Tensor:
    """Population variance over all elements (scalar)."""
    centred = x.data - x.data.mean()
    n = x.size
    out = np.asarray((centred * centred).mean(), dtype=x.dtype)
    return _emit("variance", (x,), out, lambda g: (g * 2.0 * centred / n,))


# -- linear algebra and image ops ------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g @ bd.T if a.requires_grad else None
        gb = ad.T @ g if b.requires_grad else None
        return ga, gb

    return _emit("matmul", (a, b), ad @ bd, bwd)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (im2col)."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d: expected 4-d input/weight, got {x.shape}, {weight.shape}")
    B, C, H, W = x.shape
    O, Ci, kh, kw = weight.shape
    if (kh, kw) != (3, 3):
        raise ValueError(f"conv2d: kernel must be 3x3, got {kh}x{kw}")
    if Ci != C:
        raise ValueError(f"conv2d: input has {C} channels, weight expects {Ci}")
    if bias.shape != (O,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({O},)")

    xp = np.pad(x.data, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = sliding_window_view(xp, (3, 3), axis=(2, 3))  # B,C,H,W,3,3
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(B * H * W, C * 9)
    wm = weight.data.reshape(O, C * 9)
    out = (cols @ wm.T + bias.data).reshape(B, H, W, O).transpose(0, 3, 1, 2)

    def bwd(g):
        gm = g.transpose(0, 2, 3, 1).reshape(B * H * W, O)
        gw = (gm.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = gm.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gm @ wm).reshape(B, H, W, C, 3, 3)
            gxp = np.zeros((B, C, H + 2, W + 2), dtype=g.dtype)
            for i in range(3):
                for j in range(3):
                    gxp[:, :, i:i + H, j:j + W] += dcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, 1:-1, 1:-1]
        return gx, gw, gb

    return _emit("conv2d", (x, weight, bias), np.ascontiguousarray(out), bwd)


def conv1x1(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-pixel channel mixing; weight is [out, in]."""
    B, C, H, W = x.shape
    O, Ci = weight.shape
    if Ci != C:
        raise ValueError(f"conv1x1: input has {C} channels, weight expects {Ci}")
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, C)
    wd = weight.data
    out = (xm @ wd.T + bias.data).reshape(B, H, W, O).transpose(0, 3, 1, 2)

    def bwd(g):
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gx = (gm @ wd).reshape(B, H, W, C).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = gm.T @ xm if weight.requires_grad else None
        gb = gm.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _emit("conv1x1", (x, weight, bias), np.ascontiguousarray(out), bwd)


def _pool_sum(a: np.ndarray) -> np.ndarray:
    # pairwise order keeps the mean of four equal values exact
    return (a[:, :, 0::2, 0::2] + a[:, :, 0::2, 1::2]) + (a[:, :, 1::2, 0::2] + a[:, :, 1::2, 1::2])


def _upsample(a: np.ndarray) -> np.ndarray:
    return a.repeat(2, axis=2).repeat(2, axis=3)


def upsample_nearest2x(x: Tensor) -> Tensor:
    return _emit("upsample_nearest2x", (x,), _upsample(x.data), lambda g: (_pool_sum(g),))


def avgpool2x(x: Tensor) -> Tensor:
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ValueError(f"avgpool2x: spatial dims must be even, got {x.shape[2:]}")
    return _emit("avgpool2x", (x,), _pool_sum(x.data) * 0.25, lambda g: (_upsample(g) * 0.25,))


def pixel_norm(x: Tensor, eps: float = PIXEL_NORM_EPS) -> Tensor:
    """Normalize each pixel's channel vector (axis 1) to unit RMS."""
    xd = x.data
    c = xd.shape[1]
    r = 1.0 / np.sqrt((xd * xd).mean(axis=1, keepdims=True) + eps)
    out = xd * r

    def bwd(g):
        dot = (g * xd).sum(axis=1, keepdims=True)
        return (g * r - xd * (r * r * r) * dot / c,)

    return _emit("pixel_norm", (x,), out, bwd)


# -- finite-difference oracle ----------------------------------------------

def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-3, coords=None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a tensor to a scalar tensor. Evaluation happens in float64.
    ``coords`` optionally restricts the check to a subset of flat indices.
    """
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    tape.backward(out)
    analytic = leaf.grad if leaf.grad is not None else np.zeros_like(x0)

    idx = range(x0.size) if coords is None else coords
    worst = 0.0
    for i in idx:
        xp = x0.copy()
        xp.flat[i] += eps
        xm = x0.copy()
        xm.flat[i] -= eps
        num = (f(Tensor(xp)).item() - f(Tensor(xm)).item()) / (2.0 * eps)
        a = float(analytic.flat[i])
        err = np.abs(a - num) / max(np.abs(a), np.abs(num), 1e-6)
        worst = max(worst, float(err))
    return worst
