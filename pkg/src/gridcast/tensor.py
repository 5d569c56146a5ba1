"""Dense tensors with tape-based reverse-mode differentiation.

The value type is a thin wrapper around a numpy array (float32 for training,
float64 for gradient checking). Operations record themselves onto the
currently active :class:`Tape`; replaying the tape in reverse order
accumulates gradients into every ``requires_grad`` leaf.

Design rules:

* binary operations demand exact shape equality — there is no broadcasting.
  The single sanctioned implicit expansion is :func:`bias_add`, which expands
  a per-channel vector across the remaining axes.
* convolution uses the cross-correlation convention (no kernel flip) with
  zero same-padding, so spatial extent is preserved.
* tensors are immutable once written, except for in-place parameter updates
  performed by an optimizer between tape recordings.
"""

from __future__ import annotations

import threading
from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, DimensionError, NonFiniteError

_FLOAT_TYPES = (np.float32, np.float64)


class Tensor:
    """A dense n-dimensional array that can participate in gradient taping."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_TYPES:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(())[()])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{tag})"

    # Convenience operators; these delegate to the module-level ops so the
    # tape sees every arithmetic step.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return hadamard(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


class _Record:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: Sequence[Tensor], output: Tensor,
                 backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]):
        self.op = op
        self.inputs = tuple(inputs)
        self.output = output
        self.backward = backward


_ACTIVE = threading.local()


def _tape_stack() -> list:
    stack = getattr(_ACTIVE, "stack", None)
    if stack is None:
        stack = []
        _ACTIVE.stack = stack
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered log of operations for one forward pass.

    Use as a context manager around the forward computation, then call
    :meth:`backward` with the scalar loss. Replaying the records in reverse
    recording order visits each node exactly once, so gradients are
    deterministic across repeated backward passes.
    """

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _tape_stack().pop()
        if popped is not self:
            raise ContractError("tape context exited out of order")

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward) -> None:
        self.records.append(_Record(op, inputs, output, backward))

    def backward(self, loss: Tensor) -> None:
        """Populate ``grad`` on every requires_grad leaf reachable from ``loss``.

        Leaves that participated in recorded ops but do not influence the
        loss receive an explicit zero gradient.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        produced = {id(r.output) for r in self.records}
        for rec in reversed(self.records):
            out_grad = grads.pop(id(rec.output), None)
            if out_grad is None:
                continue
            input_grads = rec.backward(out_grad)
            for tensor, g in zip(rec.inputs, input_grads):
                if g is None:
                    continue
                key = id(tensor)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
        # Deposit gradients on leaves (tensors never produced by this tape).
        leaves: dict[int, Tensor] = {}
        for rec in self.records:
            for tensor in rec.inputs:
                if tensor.requires_grad and id(tensor) not in produced:
                    leaves.setdefault(id(tensor), tensor)
        for key, tensor in leaves.items():
            g = grads.get(key)
            if g is None:
                g = np.zeros_like(tensor.data)
            if tensor.grad is None:
                tensor.grad = g.copy()
            else:
                tensor.grad = tensor.grad + g


def backward(loss: Tensor, tape: Tape) -> None:
    """Functional alias for :meth:`Tape.backward`."""
    tape.backward(loss)


def _register(op: str, inputs: Sequence[Tensor], out_data: np.ndarray, backward_fn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    tape = active_tape()
    if tape is not None and needs:
        tape.record(op, inputs, out, backward_fn)
    return out


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ (no broadcasting)")
    if a.dtype != b.dtype:
        raise ContractError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")


# ---------------------------------------------------------------------------
# element-wise operations


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)
    return _register("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)
    return _register("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("hadamard", a, b)
    ad, bd = a.data, b.data
    return _register("hadamard", (a, b), ad * bd, lambda g: (g * bd, g * ad))


def sigmoid(x: Tensor) -> Tensor:
    # Split by sign to avoid overflow in exp for large |x|, then clamp into
    # the representable open interval so saturated gates never hit 0 or 1.
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    e = np.exp(d[~pos])
    out[~pos] = e / (1.0 + e)
    one = d.dtype.type(1)
    np.clip(out, np.nextafter(d.dtype.type(0), one), np.nextafter(one, 0), out=out)
    return _register("sigmoid", (x,), out, lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    one = out.dtype.type(1)
    np.clip(out, np.nextafter(-one, 0), np.nextafter(one, 0), out=out)
    return _register("tanh", (x,), out, lambda g: (g * (1.0 - out * out),))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _register("relu", (x,), np.where(mask, x.data, 0.0), lambda g: (g * mask,))


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return _register("scale", (x,), x.data * np.asarray(c, dtype=x.dtype),
                     lambda g: (g * c,))


# ---------------------------------------------------------------------------
# matrix and convolution operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-d operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree for {a.shape} x {b.shape}")
    if a.dtype != b.dtype:
        raise ContractError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    ad, bd = a.data, b.data
    return _register("matmul", (a, b), ad @ bd,
                     lambda g: (g @ bd.T, ad.T @ g))


def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """(C,H,W) to (H*W, C*kh*kw) patch matrix under zero same-padding."""
    c, h, w = x.shape
    p = kh // 2
    xp = np.zeros((c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    xp[:, p:p + h, p:p + w] = x
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (C, H, W, kh, kw)
    return win.transpose(1, 2, 0, 3, 4).reshape(h * w, c * kh * kw)


def _corr2d_same(x: np.ndarray, k: np.ndarray, col: np.ndarray = None) -> np.ndarray:
    """Cross-correlate (C_in,H,W) with (C_out,C_in,kh,kw), zero same-padding."""
    c_out, c_in, kh, kw = k.shape
    h, w = x.shape[1:]
    if col is None:
        col = _im2col(x, kh, kw)
    out = col @ k.reshape(c_out, c_in * kh * kw).T  # (H*W, C_out)
    return np.ascontiguousarray(out.T.reshape(c_out, h, w))


def _corr2d_kernel_grad(g: np.ndarray, col: np.ndarray, k_shape: tuple) -> np.ndarray:
    c_out, c_in, kh, kw = k_shape
    flat = g.reshape(c_out, -1) @ col  # (C_out, C_in*kh*kw)
    return flat.reshape(k_shape)


def _flip_swap(k: np.ndarray) -> np.ndarray:
    """Swap in/out channel axes and flip both spatial axes."""
    return np.flip(k, axis=(-2, -1)).transpose(1, 0, 2, 3)


def _check_conv_args(op: str, x: Tensor, kernel: Tensor) -> None:
    if x.data.ndim != 3:
        raise DimensionError(f"{op}: input must be (channels, H, W), got {x.shape}")
    if kernel.data.ndim != 4:
        raise DimensionError(f"{op}: kernel must be 4-d, got {kernel.shape}")
    kh, kw = kernel.shape[-2], kernel.shape[-1]
    if kh != kw:
        raise ConfigError(f"{op}: kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise ConfigError(f"{op}: kernel size must be odd for same-padding, got {kh}")
    if x.dtype != kernel.dtype:
        raise ContractError(f"{op}: dtype mismatch {x.dtype} vs {kernel.dtype}")


def conv2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Same-padded cross-correlation: (C_in,H,W) * (C_out,C_in,k,k) -> (C_out,H,W)."""
    _check_conv_args("conv2d", x, kernel)
    if kernel.shape[1] != x.shape[0]:
        raise DimensionError(
            f"conv2d: kernel expects {kernel.shape[1]} input channels, input has {x.shape[0]}")
    xd, kd = x.data, kernel.data
    needs_grad = x.requires_grad or kernel.requires_grad
    col = _im2col(xd, kd.shape[-2], kd.shape[-1])
    out = _corr2d_same(xd, kd, col=col)
    if not needs_grad:
        return _register("conv2d", (x, kernel), out, None)
    col_kept = col if kernel.requires_grad else None

    def bwd(g):
        dx = _corr2d_same(g, _flip_swap(kd)) if x.requires_grad else None
        dk = _corr2d_kernel_grad(g, col_kept, kd.shape) if kernel.requires_grad else None
        return (dx, dk)

    return _register("conv2d", (x, kernel), out, bwd)


def conv1x1(x: Tensor, kernel: Tensor) -> Tensor:
    """Per-pixel weighted sum over channels ("feature pooling" across depth)."""
    if kernel.data.ndim != 4 or kernel.shape[-2:] != (1, 1):
        raise ConfigError(f"conv1x1: kernel must be (C_out, C_in, 1, 1), got {kernel.shape}")
    return conv2d(x, kernel)


def conv_transpose2d(x: Tensor, kernel: Tensor) -> Tensor:
    """Stride-1 same-padded transposed convolution.

    ``kernel`` has shape (C_in, C_out, k, k); the op is the adjoint of
    :func:`conv2d`, so spatial extent is preserved.
    """
    _check_conv_args("conv_transpose2d", x, kernel)
    if kernel.shape[0] != x.shape[0]:
        raise DimensionError(
            f"conv_transpose2d: kernel expects {kernel.shape[0]} input channels, "
            f"input has {x.shape[0]}")
    xd, kd = x.data, kernel.data
    eff = _flip_swap(kd)  # (C_out, C_in, k, k) cross-correlation kernel
    col = _im2col(xd, eff.shape[-2], eff.shape[-1])
    out = _corr2d_same(xd, eff, col=col)
    col_kept = col if kernel.requires_grad else None

    def bwd(g):
        dx = _corr2d_same(g, kd) if x.requires_grad else None
        dk = None
        if kernel.requires_grad:
            deff = _corr2d_kernel_grad(g, col_kept, eff.shape)
            dk = _flip_swap(deff)
        return (dx, dk)

    return _register("conv_transpose2d", (x, kernel), out, bwd)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel bias vector, expanded across the remaining axes.

    For (C,H,W) inputs the bias has length C and is expanded spatially; for
    (rows, C) matrices it has length C and is expanded across rows. This is
    the single implicit expansion the library allows.
    """
    if b.data.ndim != 1:
        raise DimensionError(f"bias_add: bias must be a vector, got {b.shape}")
    if x.dtype != b.dtype:
        raise ContractError(f"bias_add: dtype mismatch {x.dtype} vs {b.dtype}")
    if x.data.ndim == 3:
        if b.shape[0] != x.shape[0]:
            raise DimensionError(f"bias_add: bias length {b.shape[0]} != channels {x.shape[0]}")
        out = x.data + b.data[:, None, None]
        return _register("bias_add", (x, b), out, lambda g: (g, g.sum(axis=(1, 2))))
    if x.data.ndim == 2:
        if b.shape[0] != x.shape[1]:
            raise DimensionError(f"bias_add: bias length {b.shape[0]} != columns {x.shape[1]}")
        out = x.data + b.data[None, :]
        return _register("bias_add", (x, b), out, lambda g: (g, g.sum(axis=0)))
    raise DimensionError(f"bias_add: input must be 2-d or 3-d, got {x.shape}")


# ---------------------------------------------------------------------------
# structural operations


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ndim = tensors[0].data.ndim
    dtype = tensors[0].dtype
    for t in tensors:
        if t.data.ndim != ndim:
            raise DimensionError("concat: rank mismatch")
        if t.dtype != dtype:
            raise ContractError("concat: dtype mismatch")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _register("concat", tuple(tensors),
                     np.concatenate([t.data for t in tensors], axis=axis), bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _register("reshape", (x,), x.data.reshape(shape),
                     lambda g: (g.reshape(old),))


def transpose2d(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise DimensionError(f"transpose2d needs a matrix, got {x.shape}")
    return _register("transpose2d", (x,), x.data.T.copy(), lambda g: (g.T,))


def crop(x: Tensor, bounds: Sequence[tuple[int, int]]) -> Tensor:
    """Slice a contiguous block; the gradient scatters back zero-padded."""
    if len(bounds) != x.data.ndim:
        raise DimensionError(f"crop: need {x.data.ndim} bound pairs, got {len(bounds)}")
    slices = tuple(slice(lo, hi) for lo, hi in bounds)
    full_shape = x.shape

    def bwd(g):
        out = np.zeros(full_shape, dtype=g.dtype)
        out[slices] = g
        return (out,)

    return _register("crop", (x,), x.data[slices].copy(), bwd)


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _register("sum", (x,), np.asarray(x.data.sum(), dtype=x.dtype),
                     lambda g: (np.full(shape, g.reshape(())[()], dtype=g.dtype),))


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.size)


# ---------------------------------------------------------------------------
# constructors and checks


def tensor(data, requires_grad: bool = False, dtype=None, name: Optional[str] = None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype, name=name)


def zeros(shape, dtype=np.float32, requires_grad: bool = False, name=None) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad, name=name)


def ones(shape, dtype=np.float32, requires_grad: bool = False, name=None) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad, name=name)


def uniform(rng: np.random.Generator, low: float, high: float, shape,
            dtype=np.float32, requires_grad: bool = True, name=None) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape).astype(dtype),
                  requires_grad=requires_grad, name=name)


def assert_finite(t: Tensor, context: str = "") -> None:
    if not np.isfinite(t.data).all():
        where = f" in {context}" if context else ""
        raise NonFiniteError(f"non-finite values{where}"
                             f"{'' if t.name is None else f' (tensor {t.name!r})'}")
