"""Dense tensors with reverse-mode differentiation.

Only the operators the segmentation network and its losses need are
provided. Every operation returns a new :class:`Tensor`; when any input
requires a gradient, the output carries a :class:`TapeEntry` describing how
to push gradients back to its inputs. :func:`backward` collects the entries
reachable from a scalar loss into a :class:`GradientTape` and replays them in
reverse order.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "ShapeError",
    "Tensor",
    "TapeEntry",
    "GradientTape",
    "RunningStats",
    "set_precision",
    "get_dtype",
    "precision",
    "no_grad",
    "conv2d",
    "maxpool2d",
    "nearest_upsample",
    "batchnorm2d",
    "relu",
    "sigmoid",
    "softmax",
    "global_avg_pool",
    "add",
    "sub",
    "mul",
    "div",
    "mul_broadcast",
    "concat_channels",
    "tsum",
    "log",
    "clamp",
    "backward",
    "check_gradients",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


_DTYPES = {"float32": np.float32, "float64": np.float64}
_state = threading.local()


def _current() -> str:
    return getattr(_state, "precision", "float32")


def set_precision(name: str) -> None:
    """Select the dtype for newly created tensors ('float32' or 'float64')."""
    if name not in _DTYPES:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_DTYPES)}")
    _state.precision = name


def get_dtype() -> type:
    return _DTYPES[_current()]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    previous = _current()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(previous)


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Run operations without recording gradient history."""
    previous = _grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = previous


@dataclass(eq=False)
class TapeEntry:
    """One executed operation: its kind, inputs, and gradient rule.

    ``rule`` maps the gradient of the output to a tuple with one entry per
    input (``None`` for inputs that need no gradient). The saved forward
    context lives in the rule's closure.
    """

    kind: str
    inputs: tuple
    rule: Callable[[np.ndarray], tuple]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_entry")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype or get_dtype())
        if any(extent < 1 for extent in arr.shape):
            raise ShapeError(f"tensor extents must be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._entry: Optional[TapeEntry] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def entry(self) -> Optional[TapeEntry]:
        return self._entry

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def backward(self) -> None:
        backward(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis=axis, keepdims=keepdims)

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

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _result(data: np.ndarray, kind: str, inputs: Sequence[Tensor], rule) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._entry = TapeEntry(kind, tuple(inputs), rule)
    return out


# ---------------------------------------------------------------------------
# tape replay
# ---------------------------------------------------------------------------


@dataclass
class GradientTape:
    """Operations reachable from a loss, in a valid execution order."""

    entries: list = field(default_factory=list)
    outputs: list = field(default_factory=list)

    @classmethod
    def record(cls, loss: Tensor) -> "GradientTape":
        tape = cls()
        visited: set[int] = set()
        # iterative post-order DFS; deep networks overflow the recursion limit
        stack = [(loss, False)]
        while stack:
            t, expanded = stack.pop()
            if t._entry is None:
                continue
            if expanded:
                tape.entries.append(t._entry)
                tape.outputs.append(t)
                continue
            if id(t) in visited:
                continue
            visited.add(id(t))
            stack.append((t, True))
            for parent in reversed(t._entry.inputs):
                if parent._entry is not None and id(parent) not in visited:
                    stack.append((parent, False))
        return tape

    def replay(self, loss: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for entry, out in zip(reversed(self.entries), reversed(self.outputs)):
            g_out = grads.get(id(out))
            if g_out is None:
                continue
            out.grad = g_out
            for inp, g in zip(entry.inputs, entry.rule(g_out)):
                if g is None or not inp.requires_grad:
                    continue
                if g.shape != inp.shape:
                    raise ShapeError(
                        f"{entry.kind}: gradient shape {g.shape} != input shape {inp.shape}"
                    )
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if inp._entry is None:
                    leaves[key] = inp
        if loss._entry is None and loss.requires_grad:
            leaves[id(loss)] = loss
        for key, leaf in leaves.items():
            g = grads[key].astype(leaf.dtype, copy=False)
            leaf.grad = g if leaf.grad is None else leaf.grad + g


def backward(loss: Tensor) -> GradientTape:
    """Populate ``.grad`` on every requires-grad tensor reachable from ``loss``.

    Gradients accumulate into leaf tensors that already hold one; call
    ``ParameterStore.zero_grad`` between steps.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = GradientTape.record(loss)
    tape.replay(loss)
    return tape


# ---------------------------------------------------------------------------
# elementwise and reductions
# ---------------------------------------------------------------------------


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(kind: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: incompatible shapes {a.shape} and {b.shape}") from None


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _result(a.data + b.data, "add", (a, b), rule)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)

    def rule(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _result(a.data - b.data, "sub", (a, b), rule)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)

    def rule(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(a.data * b.data, "mul", (a, b), rule)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def rule(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _result(out, "div", (a, b), rule)


def mul_broadcast(a: Tensor, b: Tensor) -> Tensor:
    """Gate an (N,C,H,W) map by an (N,C,1,1) or (N,1,H,W) tensor."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"mul_broadcast expects 4-d operands, got {a.shape} and {b.shape}")
    n, c, h, w = a.shape
    if b.shape not in {(n, c, 1, 1), (n, 1, h, w), (n, c, h, w)}:
        raise ShapeError(f"mul_broadcast: cannot gate {a.shape} with {b.shape}")
    return mul(a, b)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return _result(np.asarray(out), "sum", (x,), rule)


def log(x: Tensor) -> Tensor:
    def rule(g):
        return (g / x.data,)

    return _result(np.log(x.data), "log", (x,), rule)


def clamp(x: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; the gradient passes only where the value was not clipped."""
    out = np.clip(x.data, lo, hi)

    def rule(g):
        keep = np.ones(x.shape, dtype=bool)
        if lo is not None:
            keep &= x.data >= lo
        if hi is not None:
            keep &= x.data <= hi
        return (g * keep,)

    return _result(out, "clamp", (x,), rule)


def relu(x: Tensor) -> Tensor:
    # subgradient at exactly 0 is 0
    positive = x.data > 0
    out = x.data * positive

    def rule(g):
        return (g * positive,)

    return _result(out, "relu", (x,), rule)


def sigmoid(x: Tensor) -> Tensor:
    out = 0.5 * (1.0 + np.tanh(0.5 * x.data))

    def rule(g):
        return (g * out * (1.0 - out),)

    return _result(out.astype(x.dtype, copy=False), "sigmoid", (x,), rule)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, "softmax", (x,), rule)


def global_avg_pool(x: Tensor) -> Tensor:
    _require_4d("global_avg_pool", x)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True)

    def rule(g):
        return (np.broadcast_to(g / (h * w), x.shape).copy(),)

    return _result(out, "global_avg_pool", (x,), rule)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _require_4d("concat_channels", a)
    _require_4d("concat_channels", b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: {a.shape} and {b.shape} differ outside the channel axis")
    ca = a.shape[1]

    def rule(g):
        return g[:, :ca], g[:, ca:]

    return _result(np.concatenate([a.data, b.data], axis=1), "concat_channels", (a, b), rule)


def _require_4d(kind: str, x: Tensor) -> None:
    if x.data.ndim != 4:
        raise ShapeError(f"{kind} expects an (N, C, H, W) tensor, got shape {x.shape}")


# ---------------------------------------------------------------------------
# spatial operators
# ---------------------------------------------------------------------------


def _out_extent(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation (no kernel flip), computed as im2col + batched matmul."""
    _require_4d("conv2d", x)
    if weight.data.ndim != 4:
        raise ShapeError(f"conv2d weight must be (Cout, Cin, kh, kw), got {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d: input has {cin} channels but weight expects {wcin} (weight {weight.shape})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: stride {stride} / padding {padding} invalid")
    ho, wo = _out_extent(h, kh, stride, padding), _out_extent(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} with padding {padding}")

    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    hp, wp = xd.shape[2:]
    k = cin * kh * kw
    if kh == 1 and kw == 1:
        cols = xd[:, :, ::stride, ::stride][:, :, :ho, :wo].reshape(n, cin, ho * wo)
    else:
        win = sliding_window_view(xd, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, k, ho * wo)
    wmat = weight.data.reshape(cout, k)
    out = np.matmul(wmat, cols)
    if bias is not None:
        out += bias.data[None, :, None]
    out = out.reshape(n, cout, ho, wo)

    def rule(g):
        g2 = g.reshape(n, cout, ho * wo)
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=(0, 2))
        if x.requires_grad:
            gcols = np.matmul(wmat.T, g2).reshape(n, cin, kh, kw, ho, wo)
            gxp = np.zeros((n, cin, hp, wp), dtype=g.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gcols[:, :, i, j]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, "conv2d", inputs, rule)


def maxpool2d(x: Tensor, kernel: int = 3, stride: int = 2, padding: int = 0) -> Tensor:
    """Windowed maximum; gradient goes to the first maximal element in scan order."""
    _require_4d("maxpool2d", x)
    n, c, h, w = x.shape
    if h + padding < kernel or w + padding < kernel:
        raise ShapeError(f"maxpool2d: input {h}x{w} too small for kernel {kernel}, padding {padding}")
    ho, wo = _out_extent(h, kernel, stride, padding), _out_extent(w, kernel, stride, padding)
    xd = x.data
    if padding:
        xd = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xd, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def rule(g):
        gxp = np.zeros(xd.shape, dtype=g.dtype)
        for idx in range(kernel * kernel):
            i, j = divmod(idx, kernel)
            gxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += g * (arg == idx)
        return (gxp[:, :, padding : padding + h, padding : padding + w],)

    return _result(np.ascontiguousarray(out), "maxpool2d", (x,), rule)


def nearest_upsample(x: Tensor, scale: int = 2) -> Tensor:
    _require_4d("nearest_upsample", x)
    if scale < 1:
        raise ShapeError(f"nearest_upsample: scale must be >= 1, got {scale}")
    if scale == 1:
        return x
    n, c, h, w = x.shape
    out = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, scale, w, scale)).reshape(
        n, c, h * scale, w * scale
    )

    def rule(g):
        return (g.reshape(n, c, h, scale, w, scale).sum(axis=(3, 5)),)

    return _result(out, "nearest_upsample", (x,), rule)


class RunningStats:
    """Per-channel running mean/variance for batch normalisation (mutable buffer)."""

    def __init__(self, channels: int, dtype=None):
        dtype = dtype or get_dtype()
        self.mean = np.zeros(channels, dtype=dtype)
        self.var = np.ones(channels, dtype=dtype)
        self.count = 0

    def __repr__(self) -> str:
        return f"RunningStats(channels={self.mean.shape[0]}, count={self.count})"


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    stats: RunningStats,
    train: bool = True,
    eps: float = 1e-5,
    momentum: float = 0.1,
) -> Tensor:
    _require_4d("batchnorm2d", x)
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: gamma/beta shapes {gamma.shape}/{beta.shape} do not match {c} channels")
    m = n * h * w
    if train:
        if m < 2:
            raise ShapeError(f"batchnorm2d: training needs >= 2 values per channel, got {m} (input {x.shape})")
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        stats.mean[...] = (1 - momentum) * stats.mean + momentum * mean
        stats.var[...] = (1 - momentum) * stats.var + momentum * var * (m / (m - 1))
        stats.count += 1
    else:
        if stats.count == 0:
            raise RuntimeError("batchnorm2d: uninitialized statistics (eval mode before any training batch)")
        mean, var = stats.mean, stats.var
    inv_std = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def rule(g):
        gg = (g * xhat).sum(axis=(0, 2, 3)) if gamma.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if beta.requires_grad else None
        gx = None
        if x.requires_grad:
            dxhat = g * gamma.data[None, :, None, None]
            scale = inv_std[None, :, None, None]
            if train:
                s1 = dxhat.mean(axis=(0, 2, 3), keepdims=True)
                s2 = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
                gx = scale * (dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * scale
        return gx, gg, gb

    return _result(out, "batchnorm2d", (x, gamma, beta), rule)


# ---------------------------------------------------------------------------
# finite-difference checking
# ---------------------------------------------------------------------------


def check_gradients(
    fn: Callable[[], Tensor],
    tensors: Sequence[Tensor],
    samples: int = 10,
    step: float = 1e-5,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Largest |analytic - numeric| / max(1, |numeric|) over sampled coordinates.

    ``fn`` must rebuild the scalar output from ``tensors`` on every call; the
    coordinates are perturbed in place and restored.
    """
    rng = rng or np.random.default_rng(0)
    for t in tensors:
        t.grad = None
    out = fn()
    backward(out)
    analytic = [None if t.grad is None else t.grad.copy() for t in tensors]
    worst = 0.0
    for t, grad in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(samples, flat.size), replace=False)
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + step
            up = fn().item()
            flat[idx] = orig - step
            down = fn().item()
            flat[idx] = orig
            numeric = (up - down) / (2 * step)
            a = 0.0 if grad is None else float(grad.reshape(-1)[idx])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(numeric)))
    return worst
