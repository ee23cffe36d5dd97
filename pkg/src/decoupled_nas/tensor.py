"""A small numpy tensor engine with tape-based reverse-mode differentiation.

Operations record themselves on the innermost active :class:`Tape`. Outside a
tape they run forward only, which is what evaluation paths use.

    with Tape() as tape:
        loss = softmax_cross_entropy(dense(x, w, b), labels)
    grads = tape.backward(loss)
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

_DTYPE = np.float64
_ACTIVE: list["Tape"] = []


def set_default_dtype(dtype) -> None:
    """Switch between double (default) and single precision for new tensors."""
    global _DTYPE
    _DTYPE = np.dtype(dtype).type


def get_default_dtype():
    return _DTYPE


class TapeError(RuntimeError):
    pass


class ShapeError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, k):
        return mul_scalar(self, k)


class Tape:
    """Ordered record of primitive operations for one differentiation pass."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._outputs: set[int] = set()
        self._used = False

    def __enter__(self):
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE.remove(self)
        return False

    def _tracked(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._outputs

    def record(self, out: Tensor, parents: tuple[Tensor, ...], fn: Callable) -> None:
        if any(self._tracked(p) for p in parents):
            self.records.append((out, parents, fn))
            self._outputs.add(id(out))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Reverse sweep from a scalar ``loss``; accumulates into leaf ``.grad``.

        A tape can be swept once; a second call raises :class:`TapeError`.
        """
        if self._used:
            raise TapeError("backward already ran on this tape; record a new one")
        if id(loss) not in self._outputs:
            raise TapeError("loss was not produced on this tape")
        if loss.data.size != 1:
            raise TapeError("backward needs a scalar loss")
        self._used = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for out, parents, fn in reversed(self.records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for p, pg in zip(parents, fn(g)):
                if pg is None or not self._tracked(p):
                    continue
                k = id(p)
                grads[k] = grads[k] + pg if k in grads else pg
                if id(p) not in self._outputs:
                    leaves[k] = p
        result = {}
        for k, leaf in leaves.items():
            g = grads[k]
            leaf.grad = g if leaf.grad is None else leaf.grad + g
            result[leaf] = g
        return result


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def _make(data, parents: tuple[Tensor, ...], fn: Callable) -> Tensor:
    out = Tensor(data)
    if _ACTIVE:
        _ACTIVE[-1].record(out, parents, fn)
    return out


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")


# ---- elementwise -----------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g))


def mul_scalar(a: Tensor, k: float) -> Tensor:
    return _make(a.data * k, (a,), lambda g: (g * k,))


def total(a: Tensor) -> Tensor:
    return _make(a.data.sum(), (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _make(a.data.mean(), (a,), lambda g: (np.full(a.shape, g / n),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def identity(x: Tensor) -> Tensor:
    return x


_ACTIVATIONS = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu, "identity": identity}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        return _ACTIVATIONS[kind](x)
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None


def scale_shift(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-channel affine map; channels are axis 1."""
    c = x.shape[1]
    if scale.shape != (c,) or shift.shape != (c,):
        raise ShapeError(f"scale/shift must have shape ({c},)")
    view = (1, c) + (1,) * (x.data.ndim - 2)
    s = scale.data.reshape(view)
    axes = tuple(i for i in range(x.data.ndim) if i != 1)

    def fn(g):
        return g * s, (g * x.data).sum(axis=axes), g.sum(axis=axes)

    return _make(x.data * s + shift.data.reshape(view), (x, scale, shift), fn)


def concatenate(xs: Sequence[Tensor], axis: int) -> Tensor:
    xs = list(xs)
    ref = xs[0].shape
    for x in xs[1:]:
        if len(x.shape) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(x.shape, ref)) if i != axis
        ):
            raise ShapeError(f"concatenate: incompatible shapes {ref} and {x.shape}")
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]
    return _make(np.concatenate([x.data for x in xs], axis=axis), tuple(xs),
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


def combine(op: str, inputs: Sequence[Tensor]) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise ShapeError("combine needs at least one input")
    if op == "channel_concat":
        return concatenate(inputs, axis=1)
    for x in inputs[1:]:
        _check_same(inputs[0], x, op)
    n = len(inputs)
    data = sum(x.data for x in inputs)
    if op == "elementwise_add":
        return _make(data, tuple(inputs), lambda g: (g,) * n)
    if op == "elementwise_mean":
        return _make(data / n, tuple(inputs), lambda g: (g / n,) * n)
    raise ValueError(f"unknown combine op {op!r}")


# ---- dense / losses ---------------------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with ``weight`` shaped (in, out)."""
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} does not match weight {weight.shape}")

    def fn(g):
        return g @ weight.data.T, x.data.T @ g, g.sum(axis=0)

    return _make(x.data @ weight.data + bias.data, (x, weight, bias), fn)


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
        raise ValueError(f"labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def fn(g):
        p = np.exp(logp)
        p[rows, labels] -= 1.0
        return (p * (g / n),)

    return _make(loss, (logits,), fn)


def embedding(table: Tensor, idx) -> Tensor:
    idx = np.asarray(idx, dtype=np.int64)

    def fn(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx, g)
        return (out,)

    return _make(table.data[idx], (table,), fn)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when ``rate`` is 0 or no generator is given."""
    if rate <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _make(x.data * keep, (x,), lambda g: (g * keep,))


# ---- spatial ----------------------------------------------------------------


def _out_size(n: int, k: int, stride: int, pad: int, dilation: int) -> int:
    return (n + 2 * pad - dilation * (k - 1) - 1) // stride + 1


def _windows(h: int, w: int, k: int, stride: int, pad: int, dilation: int):
    """Slices into the padded input, one per kernel offset."""
    ho, wo = _out_size(h, k, stride, pad, dilation), _out_size(w, k, stride, pad, dilation)
    out = []
    for i in range(k):
        for j in range(k):
            r0, c0 = i * dilation, j * dilation
            out.append((i, j, (slice(None), slice(None),
                               slice(r0, r0 + stride * (ho - 1) + 1, stride),
                               slice(c0, c0 + stride * (wo - 1) + 1, stride))))
    return ho, wo, out


def _pad(x: np.ndarray, pad: int, value: float = 0.0) -> np.ndarray:
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=value)


def _unpad(x: np.ndarray, pad: int) -> np.ndarray:
    return x if pad == 0 else x[:, :, pad:-pad, pad:-pad]


def _check_stride(stride: int) -> None:
    if stride not in (1, 2):
        raise ValueError(f"stride must be 1 or 2, got {stride}")


def depthwise_conv2d(x: Tensor, w: Tensor, stride: int = 1, dilation: int = 1) -> Tensor:
    """Per-channel ``k x k`` convolution, ``w`` shaped (C, k, k), 'same' padding."""
    _check_stride(stride)
    b, c, h, wd = x.shape
    k = w.shape[-1]
    if w.shape != (c, k, k):
        raise ShapeError(f"depthwise weight {w.shape} does not match {c} channels")
    pad = dilation * (k - 1) // 2
    xp = _pad(x.data, pad)
    ho, wo, wins = _windows(h, wd, k, stride, pad, dilation)
    out = np.zeros((b, c, ho, wo), dtype=x.data.dtype)
    for i, j, sl in wins:
        out += xp[sl] * w.data[:, i, j][None, :, None, None]

    def fn(g):
        gx = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i, j, sl in wins:
            gx[sl] += g * w.data[:, i, j][None, :, None, None]
            gw[:, i, j] = (g * xp[sl]).sum(axis=(0, 2, 3))
        return _unpad(gx, pad), gw

    return _make(out, (x, w), fn)


def conv2d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Dense convolution, ``w`` shaped (C_out, C_in, k, k), 'same' padding."""
    _check_stride(stride)
    b, c, h, wd = x.shape
    co, ci, k, _ = w.shape
    if ci != c:
        raise ShapeError(f"conv2d weight {w.shape} does not match {c} input channels")
    pad = (k - 1) // 2
    xp = _pad(x.data, pad)
    ho, wo, wins = _windows(h, wd, k, stride, pad, 1)
    out = np.zeros((b, co, ho, wo), dtype=x.data.dtype)
    for i, j, sl in wins:
        out += np.einsum("bchw,oc->bohw", xp[sl], w.data[:, :, i, j])

    def fn(g):
        gx = np.zeros_like(xp)
        gw = np.zeros_like(w.data)
        for i, j, sl in wins:
            gx[sl] += np.einsum("bohw,oc->bchw", g, w.data[:, :, i, j])
            gw[:, :, i, j] = np.einsum("bohw,bchw->oc", g, xp[sl])
        return _unpad(gx, pad), gw

    return _make(out, (x, w), fn)


def pointwise_conv(x: Tensor, w: Tensor) -> Tensor:
    """1x1 convolution, ``w`` shaped (C_out, C_in)."""
    if w.data.ndim != 2 or w.shape[1] != x.shape[1]:
        raise ShapeError(f"pointwise weight {w.shape} does not match {x.shape[1]} channels")

    def fn(g):
        return np.einsum("bohw,oc->bchw", g, w.data), np.einsum("bohw,bchw->oc", g, x.data)

    return _make(np.einsum("bchw,oc->bohw", x.data, w.data), (x, w), fn)


def max_pool2d(x: Tensor, k: int = 3, stride: int = 1) -> Tensor:
    _check_stride(stride)
    _, _, h, wd = x.shape
    pad = (k - 1) // 2
    xp = _pad(x.data, pad, -np.inf)
    ho, wo, wins = _windows(h, wd, k, stride, pad, 1)
    stack = np.stack([xp[sl] for _, _, sl in wins])
    arg = stack.argmax(axis=0)
    out = np.take_along_axis(stack, arg[None], axis=0)[0]

    def fn(g):
        gx = np.zeros_like(xp)
        for n, (_, _, sl) in enumerate(wins):
            gx[sl] += g * (arg == n)
        return (_unpad(gx, pad),)

    return _make(out, (x,), fn)


def avg_pool2d(x: Tensor, k: int = 3, stride: int = 1) -> Tensor:
    """Average over the valid (unpadded) part of each window."""
    _check_stride(stride)
    _, _, h, wd = x.shape
    pad = (k - 1) // 2
    xp = _pad(x.data, pad)
    ones = _pad(np.ones((1, 1, h, wd), dtype=x.data.dtype), pad)
    ho, wo, wins = _windows(h, wd, k, stride, pad, 1)
    count = sum(ones[sl] for _, _, sl in wins)
    out = sum(xp[sl] for _, _, sl in wins) / count

    def fn(g):
        gx = np.zeros_like(xp)
        gc = g / count
        for _, _, sl in wins:
            gx[sl] += gc
        return (_unpad(gx, pad),)

    return _make(out, (x,), fn)


def subsample(x: Tensor, offset: int = 0) -> Tensor:
    """Every other pixel starting at ``offset``; zero-filled up to ceil(H/2) x ceil(W/2)."""
    _, _, h, w = x.shape
    ho, wo = (h + 1) // 2, (w + 1) // 2
    part = x.data[:, :, offset::2, offset::2]
    out = np.zeros(x.shape[:2] + (ho, wo), dtype=x.data.dtype)
    ph, pw = part.shape[2], part.shape[3]
    out[:, :, :ph, :pw] = part

    def fn(g):
        gx = np.zeros_like(x.data)
        gx[:, :, offset::2, offset::2] = g[:, :, :ph, :pw]
        return (gx,)

    return _make(out, (x,), fn)


def factorized_reduce(x: Tensor, w_even: Tensor, w_odd: Tensor) -> Tensor:
    """Halve spatial size with two offset 1x1 paths whose outputs are concatenated."""
    x = relu(x)
    return concatenate([pointwise_conv(subsample(x, 0), w_even), pointwise_conv(subsample(x, 1), w_odd)], axis=1)


def global_avg_pool(x: Tensor) -> Tensor:
    _, _, h, w = x.shape
    return _make(x.data.mean(axis=(2, 3)), (x,),
                 lambda g: (np.broadcast_to(g[:, :, None, None] / (h * w), x.shape).copy(),))


# ---- cell operations --------------------------------------------------------

_SEP = {
    "sep_conv_3x3": (3, 1),
    "sep_conv_5x5": (5, 1),
    "dil_sep_conv_3x3": (3, 2),
    "dil_sep_conv_5x5": (5, 2),
}


def cell_op_param_shapes(kind: str, channels: int, stride: int) -> dict[str, tuple[int, ...]]:
    """Parameter shapes of one cell operation at a given channel width."""
    shapes: dict[str, tuple[int, ...]] = {"scale": (channels,), "shift": (channels,)}
    if kind in _SEP:
        k, _ = _SEP[kind]
        shapes["depthwise"] = (channels, k, k)
        shapes["pointwise"] = (channels, channels)
    elif kind == "identity" and stride == 2:
        shapes["reduce_even"] = (channels // 2, channels)
        shapes["reduce_odd"] = (channels - channels // 2, channels)
    elif kind not in ("max_pool_3x3", "avg_pool_3x3", "identity"):
        raise ValueError(f"unknown cell operation {kind!r}")
    return shapes


def apply_cell_op(kind: str, x: Tensor, params: dict[str, Tensor], stride: int = 1) -> Tensor:
    """One candidate operation followed by its learnable per-channel scale and shift.

    Separable convolutions are ReLU, depthwise k x k, pointwise 1x1. Dilated
    variants use dilation 2. Identity at stride 2 is a factorized reduction.
    """
    _check_stride(stride)
    if x.data.ndim != 4:
        raise ShapeError(f"cell ops expect (B, C, H, W) input, got {x.shape}")
    if kind in _SEP:
        _, dil = _SEP[kind]
        y = depthwise_conv2d(relu(x), params["depthwise"], stride=stride, dilation=dil)
        y = pointwise_conv(y, params["pointwise"])
    elif kind == "max_pool_3x3":
        y = max_pool2d(x, 3, stride)
    elif kind == "avg_pool_3x3":
        y = avg_pool2d(x, 3, stride)
    elif kind == "identity":
        y = x if stride == 1 else factorized_reduce(x, params["reduce_even"], params["reduce_odd"])
    else:
        raise ValueError(f"unknown cell operation {kind!r}")
    return scale_shift(y, params["scale"], params["shift"])
