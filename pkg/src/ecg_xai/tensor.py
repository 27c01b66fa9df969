"""Dense tensors with reverse-mode gradients.

Operations executed inside an active :class:`Tape` context record themselves
when any input requires a gradient; :func:`backward` then walks the tape in
reverse execution order (which is a topological order) and consumes it.
Outside a tape nothing is recorded, which is how inference runs.

Sequences use a channels-last layout: ``(batch, length, channels)``.
"""

from __future__ import annotations

import logging
import threading
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special

from .exceptions import EcgContractError

_LOGGER = logging.getLogger(__name__)

GradFn = Callable[[np.ndarray], Sequence[Any]]

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


class Tensor:
    """N-dimensional real array that can take part in gradient computation.

    Attributes:
        data: The values.
        requires_grad: Whether gradients flow into this tensor.
        grad: Gradient of the last backward pass, same shape as data.
        tape: Tape that produced this tensor, None for leaves.
        name: Optional parameter path.
    """

    __array_priority__ = 100

    def __init__(
        self,
        data: Any,
        requires_grad: bool = False,
        name: str | None = None,
        dtype: Any = None,
    ) -> None:
        """Wrap an array.

        Args:
            data: Array-like values.
            requires_grad: Track gradients for this tensor.
            name: Optional parameter path.
            dtype: Optional dtype; floating input keeps its own by default.
        """
        array = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(array.dtype, np.floating):
            array = array.astype(np.float64)
        self.data: np.ndarray = array
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        """Shape of the data."""
        return self.data.shape

    @property
    def ndim(self) -> int:
        """Number of dimensions."""
        return self.data.ndim

    @property
    def size(self) -> int:
        """Number of elements."""
        return self.data.size

    @property
    def dtype(self) -> np.dtype:
        """Element type."""
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        """The underlying array."""
        return self.data

    def item(self) -> float:
        """Value of a one-element tensor."""
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        """Forget the stored gradient."""
        self.grad = None

    def detach(self) -> Tensor:
        """Copy without gradient tracking."""
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"<Tensor{label} shape={self.shape} requires_grad={self.requires_grad}>"

    def __add__(self, other: Any) -> Tensor:
        return add(self, as_tensor(other, self.dtype))

    def __radd__(self, other: Any) -> Tensor:
        return add(as_tensor(other, self.dtype), self)

    def __sub__(self, other: Any) -> Tensor:
        return sub(self, as_tensor(other, self.dtype))

    def __rsub__(self, other: Any) -> Tensor:
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other: Any) -> Tensor:
        return mul(self, as_tensor(other, self.dtype))

    def __rmul__(self, other: Any) -> Tensor:
        return mul(as_tensor(other, self.dtype), self)

    def __truediv__(self, other: float) -> Tensor:
        return mul(self, as_tensor(1.0 / other, self.dtype))

    def __neg__(self) -> Tensor:
        return mul(self, as_tensor(-1.0, self.dtype))

    def __matmul__(self, other: Tensor) -> Tensor:
        return matmul(self, other)

    def __getitem__(self, index: Any) -> Tensor:
        return getitem(self, index)

    def reshape(self, *shape: int) -> Tensor:
        """Reshape (see :func:`reshape`)."""
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)

    def transpose(self, *axes: int) -> Tensor:
        """Permute axes (see :func:`transpose`)."""
        return transpose(self, axes)

    def sum(self, axis: int | tuple[int, ...] | None = None) -> Tensor:
        """Sum over axes."""
        return sum_(self, axis)

    def mean(self, axis: int | tuple[int, ...] | None = None) -> Tensor:
        """Mean over axes."""
        return mean(self, axis)


def as_tensor(value: Any, dtype: Any = None) -> Tensor:
    """Return value unchanged if it is a Tensor, else a constant Tensor."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


@dataclass(frozen=True)
class _IndexedGrad:
    """Gradient that is zero outside ``operand[index]``."""

    index: Any
    values: np.ndarray

    def add_into(self, buffer: np.ndarray) -> None:
        if _is_basic_index(self.index):
            buffer[self.index] += self.values
        else:
            np.add.at(buffer, self.index, self.values)


def _is_basic_index(index: Any) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return all(
        part is None or part is Ellipsis or isinstance(part, int | np.integer | slice)
        for part in parts
    )


@dataclass
class _Record:
    kind: str
    output: Tensor
    inputs: tuple[Tensor, ...]
    grad_fn: GradFn


_STATE = threading.local()


class Tape:
    """Ordered record of the operations of one forward pass.

    A tape belongs to the thread that entered it. One backward pass consumes
    it; run a new forward pass under a new tape for the next step.
    """

    def __init__(self) -> None:
        """Create an empty tape."""
        self.records: list[_Record] = []
        self.consumed = False

    def __enter__(self) -> Tape:
        stack = getattr(_STATE, "stack", None)
        if stack is None:
            stack = _STATE.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc_info: object) -> None:
        _STATE.stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(
        self, kind: str, output: Tensor, inputs: tuple[Tensor, ...], grad_fn: GradFn
    ) -> None:
        """Append one executed operation."""
        if self.consumed:
            raise EcgContractError(f"{kind}: tape already consumed by backward.")
        output.requires_grad = True
        output.tape = self
        self.records.append(_Record(kind, output, inputs, grad_fn))

    def backward(self, loss: Tensor) -> None:
        """Populate gradients of every tensor that led to loss.

        Leaf gradients accumulate across passes; intermediate tensors keep
        the gradient of this pass (used for activation taps).

        Raises:
            EcgContractError: loss is not a scalar of this tape, or the tape
                was already consumed.
        """
        if self.consumed:
            raise EcgContractError("backward: tape already consumed.")
        if loss.tape is not self:
            raise EcgContractError("backward: loss was not recorded on this tape.")
        if loss.size != 1:
            raise EcgContractError(
                f"backward: loss must be a scalar, got shape {loss.shape}."
            )

        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        # Buffers allocated here may be updated in place; all others are shared.
        owned: set[int] = set()
        for record in reversed(self.records):
            grad_out = pending.pop(id(record.output), None)
            if grad_out is None:
                continue
            record.output.grad = grad_out
            input_grads = record.grad_fn(grad_out)
            for tensor, grad in zip(record.inputs, input_grads, strict=True):
                if grad is None or not tensor.requires_grad:
                    continue
                key = id(tensor)
                current = pending.get(key) if tensor.tape is self else tensor.grad
                if isinstance(grad, _IndexedGrad):
                    if current is None:
                        current = np.zeros(tensor.shape, dtype=tensor.dtype)
                    elif key not in owned:
                        current = current.copy()
                    owned.add(key)
                    grad.add_into(current)
                else:
                    grad = np.asarray(grad, dtype=tensor.dtype).reshape(tensor.shape)
                    current = grad if current is None else current + grad
                    owned.discard(key)
                if tensor.tape is self:
                    pending[key] = current
                else:
                    tensor.grad = current

        self.records.clear()
        self.consumed = True


def active_tape() -> Tape | None:
    """Innermost tape entered by the current thread, if any."""
    stack = getattr(_STATE, "stack", None)
    return stack[-1] if stack else None


def backward(loss: Tensor) -> None:
    """Run the backward pass of the tape that produced loss.

    Raises:
        EcgContractError: loss was produced outside a tape.
    """
    if loss.tape is None:
        raise EcgContractError(
            "backward: tensor is not the output of a taped forward pass."
        )
    loss.tape.backward(loss)


def _emit(
    kind: str, data: np.ndarray, inputs: tuple[Tensor, ...], grad_fn: GradFn
) -> Tensor:
    output = Tensor(data)
    tape = active_tape()
    if tape is not None and any(tensor.requires_grad for tensor in inputs):
        tape.record(kind, output, inputs, grad_fn)
    return output


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back onto the operand's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(kind: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise EcgContractError(
            f"{kind}: shapes {a.shape} and {b.shape} do not broadcast."
        ) from None


# Elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting sum."""
    _check_broadcast("add", a, b)
    return _emit(
        "add",
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting difference."""
    _check_broadcast("sub", a, b)
    return _emit(
        "sub",
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Broadcasting elementwise product."""
    _check_broadcast("mul", a, b)
    return _emit(
        "mul",
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise EcgContractError(
            f"matmul: incompatible shapes {a.shape} and {b.shape}."
        )

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        grad_a = g @ np.swapaxes(b.data, -1, -2)
        grad_b = np.swapaxes(a.data, -1, -2) @ g
        return _unbroadcast(grad_a, a.shape), _unbroadcast(grad_b, b.shape)

    return _emit("matmul", a.data @ b.data, (a, b), grad_fn)


# Activations


def relu(x: Tensor) -> Tensor:
    """max(x, 0)."""
    return _emit("relu", np.maximum(x.data, 0), (x,), lambda g: (g * (x.data > 0),))


def gelu(x: Tensor) -> Tensor:
    """Exact Gaussian error linear unit, x * Phi(x)."""
    cdf = 0.5 * (1.0 + special.erf(x.data / _SQRT_2))

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data**2)
        return (g * (cdf + x.data * pdf),)

    return _emit("gelu", x.data * cdf, (x,), grad_fn)


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function."""
    out = special.expit(x.data)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),))


def tanh(x: Tensor) -> Tensor:
    """Hyperbolic tangent."""
    out = np.tanh(x.data)
    return _emit("tanh", out, (x,), lambda g: (g * (1.0 - out**2),))


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis.

    Args:
        x: Logits.
        mask: Optional boolean array broadcastable to x; False entries get
            exactly zero probability.

    Raises:
        EcgContractError: Some row has every entry masked.
    """
    logits = x.data
    if mask is not None:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), logits.shape)
        if not np.all(mask.any(axis=-1)):
            raise EcgContractError(
                f"softmax: a row of shape {logits.shape} has every position masked."
            )
        logits = np.where(mask, logits, -np.inf)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    exp = np.exp(shifted)
    if mask is not None:
        exp = np.where(mask, exp, 0.0)
    out = exp / exp.sum(axis=-1, keepdims=True)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", out.astype(x.dtype, copy=False), (x,), grad_fn)


# Normalization and regularization


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise EcgContractError(
            f"layer_norm: gamma {gamma.shape} / beta {beta.shape} do not match "
            f"input {x.shape}."
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(x.data.var(axis=-1, keepdims=True) + eps)
    x_hat = (x.data - mu) * inv_std
    width = x.shape[-1]

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d_hat = g * gamma.data
        grad_x = (
            inv_std
            / width
            * (
                width * d_hat
                - d_hat.sum(axis=-1, keepdims=True)
                - x_hat * (d_hat * x_hat).sum(axis=-1, keepdims=True)
            )
        )
        reduce_axes = tuple(range(g.ndim - 1))
        return grad_x, (g * x_hat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    return _emit(
        "layer_norm", x_hat * gamma.data + beta.data, (x, gamma, beta), grad_fn
    )


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Normalize each channel (last axis) over all other axes.

    In training mode the batch statistics are used and the running arrays are
    updated in place; in eval mode the frozen running statistics are used.
    """
    channels = x.shape[-1]
    if gamma.shape != (channels,) or running_mean.shape != (channels,):
        raise EcgContractError(
            f"batch_norm: parameters {gamma.shape} do not match input {x.shape}."
        )
    reduce_axes = tuple(range(x.ndim - 1))

    if not training:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        x_hat = (x.data - running_mean) * inv_std

        def eval_grad(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
            return (
                g * gamma.data * inv_std,
                (g * x_hat).sum(axis=reduce_axes),
                g.sum(axis=reduce_axes),
            )

        out = (x_hat * gamma.data + beta.data).astype(x.dtype, copy=False)
        return _emit("batch_norm", out, (x, gamma, beta), eval_grad)

    count = x.size // channels
    if count < 2:
        raise EcgContractError(
            f"batch_norm: training needs more than one value per channel, "
            f"got input {x.shape}."
        )
    mu = x.data.mean(axis=reduce_axes)
    var = x.data.var(axis=reduce_axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (x.data - mu) * inv_std
    running_mean *= 1.0 - momentum
    running_mean += momentum * mu
    running_var *= 1.0 - momentum
    running_var += momentum * var * count / (count - 1)

    def train_grad(g: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d_hat = g * gamma.data
        grad_x = (
            inv_std
            / count
            * (
                count * d_hat
                - d_hat.sum(axis=reduce_axes)
                - x_hat * (d_hat * x_hat).sum(axis=reduce_axes)
            )
        )
        return grad_x, (g * x_hat).sum(axis=reduce_axes), g.sum(axis=reduce_axes)

    out = (x_hat * gamma.data + beta.data).astype(x.dtype, copy=False)
    return _emit("batch_norm", out, (x, gamma, beta), train_grad)


def dropout(
    x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None
) -> Tensor:
    """Inverted dropout; the identity in eval mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise EcgContractError(f"dropout: rate must be in [0, 1), got {rate}.")
    if not training or rate == 0.0:
        return x
    rng = rng or np.random.default_rng()
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return _emit("dropout", x.data * keep, (x,), lambda g: (g * keep,))


# Convolution and pooling


def conv1d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """1-D cross-correlation.

    Args:
        x: Input (batch, length, in_channels).
        weight: Kernel (kernel_size, in_channels, out_channels).
        bias: Optional (out_channels,).
        stride: Step between windows.
        padding: Zeros added on both ends of the length axis.

    Returns:
        Output (batch, (length + 2 * padding - kernel_size) // stride + 1,
        out_channels).
    """
    if x.ndim != 3 or weight.ndim != 3 or x.shape[2] != weight.shape[1]:
        raise EcgContractError(
            f"conv1d: input {x.shape} does not match kernel {weight.shape}."
        )
    if stride < 1 or padding < 0:
        raise EcgContractError(
            f"conv1d: invalid stride {stride} or padding {padding}."
        )
    kernel = weight.shape[0]
    length = x.shape[1]
    padded_length = length + 2 * padding
    if padded_length < kernel:
        raise EcgContractError(
            f"conv1d: input length {length} (+{2 * padding} padding) shorter "
            f"than kernel {kernel}."
        )
    x_padded = np.pad(x.data, ((0, 0), (padding, padding), (0, 0)))
    # (batch, out_length, in_channels, kernel)
    windows = sliding_window_view(x_padded, kernel, axis=1)[:, ::stride]
    out_length = windows.shape[1]
    out = np.tensordot(windows, weight.data, axes=([3, 2], [0, 1]))
    if bias is not None:
        out = out + bias.data

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray | None, ...]:
        grad_w = np.tensordot(windows, g, axes=([0, 1], [0, 1])).transpose(1, 0, 2)
        grad_x = None
        if x.requires_grad:
            grad_cols = np.tensordot(g, weight.data, axes=([2], [2]))
            grad_padded = np.zeros_like(x_padded)
            span = stride * (out_length - 1) + 1
            for offset in range(kernel):
                grad_padded[:, offset : offset + span : stride] += grad_cols[
                    :, :, offset
                ]
            grad_x = grad_padded[:, padding : padding + length]
        if bias is None:
            return grad_x, grad_w
        return grad_x, grad_w, g.sum(axis=(0, 1))

    return _emit("conv1d", out.astype(x.dtype, copy=False), inputs, grad_fn)


def max_pool1d(
    x: Tensor, pool_size: int, stride: int | None = None, padding: int = 0
) -> Tensor:
    """Max over sliding windows of the length axis (padding never wins)."""
    stride = stride or pool_size
    if x.ndim != 3 or x.shape[1] + 2 * padding < pool_size:
        raise EcgContractError(
            f"max_pool1d: input {x.shape} too short for pool {pool_size}."
        )
    length = x.shape[1]
    x_padded = np.pad(
        x.data, ((0, 0), (padding, padding), (0, 0)), constant_values=-np.inf
    )
    windows = sliding_window_view(x_padded, pool_size, axis=1)[:, ::stride]
    winners = windows.argmax(axis=-1)
    out = windows.max(axis=-1)
    out_length = out.shape[1]

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        grad_padded = np.zeros(x_padded.shape, dtype=g.dtype)
        span = stride * (out_length - 1) + 1
        for offset in range(pool_size):
            grad_padded[:, offset : offset + span : stride] += g * (winners == offset)
        return (grad_padded[:, padding : padding + length],)

    return _emit("max_pool1d", out, (x,), grad_fn)


# Recurrent


def lstm_step(
    x: Tensor,
    state: Tensor,
    w_input: Tensor,
    w_recurrent: Tensor,
    bias: Tensor,
    recurrent_mask: np.ndarray | None = None,
) -> Tensor:
    """One step of a standard LSTM cell.

    Gate order in the weight columns is input, forget, cell, output.

    Args:
        x: Input at this step (batch, features).
        state: Concatenated [h, c] (batch, 2 * units).
        w_input: (features, 4 * units).
        w_recurrent: (units, 4 * units).
        bias: (4 * units,).
        recurrent_mask: Optional dropout mask (batch, units) applied to h
            before the recurrent product only.

    Returns:
        New concatenated state [h, c] (batch, 2 * units).
    """
    units = w_recurrent.shape[0]
    if (
        x.ndim != 2
        or state.shape != (x.shape[0], 2 * units)
        or w_input.shape != (x.shape[1], 4 * units)
        or w_recurrent.shape != (units, 4 * units)
        or bias.shape != (4 * units,)
    ):
        raise EcgContractError(
            f"lstm_step: x {x.shape}, state {state.shape}, w_input "
            f"{w_input.shape}, w_recurrent {w_recurrent.shape}, bias {bias.shape} "
            "are inconsistent."
        )
    h_prev = state.data[:, :units]
    c_prev = state.data[:, units:]
    mask = np.ones_like(h_prev) if recurrent_mask is None else recurrent_mask
    h_masked = h_prev * mask

    z = x.data @ w_input.data + h_masked @ w_recurrent.data + bias.data
    gate_i = special.expit(z[:, :units])
    gate_f = special.expit(z[:, units : 2 * units])
    gate_g = np.tanh(z[:, 2 * units : 3 * units])
    gate_o = special.expit(z[:, 3 * units :])
    c_new = gate_f * c_prev + gate_i * gate_g
    tanh_c = np.tanh(c_new)
    h_new = gate_o * tanh_c

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray, ...]:
        grad_h = g[:, :units]
        grad_c = g[:, units:] + grad_h * gate_o * (1.0 - tanh_c**2)
        grad_z = np.concatenate(
            [
                grad_c * gate_g * gate_i * (1.0 - gate_i),
                grad_c * c_prev * gate_f * (1.0 - gate_f),
                grad_c * gate_i * (1.0 - gate_g**2),
                grad_h * tanh_c * gate_o * (1.0 - gate_o),
            ],
            axis=1,
        )
        grad_state = np.concatenate(
            [(grad_z @ w_recurrent.data.T) * mask, grad_c * gate_f], axis=1
        )
        return (
            grad_z @ w_input.data.T,
            grad_state,
            x.data.T @ grad_z,
            h_masked.T @ grad_z,
            grad_z.sum(axis=0),
        )

    out = np.concatenate([h_new, c_new], axis=1).astype(x.dtype, copy=False)
    return _emit(
        "lstm_step", out, (x, state, w_input, w_recurrent, bias), grad_fn
    )


# Shape manipulation and reductions


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Reshape keeping element order."""
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError:
        raise EcgContractError(
            f"reshape: cannot reshape {x.shape} into {tuple(shape)}."
        ) from None
    return _emit("reshape", out, (x,), lambda g: (g.reshape(x.shape),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    """Permute axes."""
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise EcgContractError(f"transpose: axes {axes} invalid for {x.shape}.")
    inverse = tuple(np.argsort(axes))
    return _emit(
        "transpose", x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),)
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along an existing axis."""
    if not tensors:
        raise EcgContractError("concat: no tensors given.")
    try:
        out = np.concatenate([tensor.data for tensor in tensors], axis=axis)
    except ValueError:
        shapes = [tensor.shape for tensor in tensors]
        raise EcgContractError(
            f"concat: shapes {shapes} do not align on axis {axis}."
        ) from None
    boundaries = np.cumsum([tensor.shape[axis] for tensor in tensors])[:-1]

    def grad_fn(g: np.ndarray) -> list[np.ndarray]:
        return np.split(g, boundaries, axis=axis)

    return _emit("concat", out, tuple(tensors), grad_fn)


def getitem(x: Tensor, index: Any) -> Tensor:
    """Basic or advanced indexing (slice)."""
    try:
        out = x.data[index]
    except IndexError as err:
        raise EcgContractError(f"slice: {err} for shape {x.shape}.") from None

    def grad_fn(g: np.ndarray) -> tuple[_IndexedGrad]:
        return (_IndexedGrad(index, g),)

    return _emit("slice", np.array(out, dtype=x.dtype), (x,), grad_fn)


def sum_(
    x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    """Sum over axes."""
    out = x.data.sum(axis=axis, keepdims=keepdims)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _emit("sum", np.asarray(out, dtype=x.dtype), (x,), grad_fn)


def mean(
    x: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False
) -> Tensor:
    """Arithmetic mean over axes."""
    out = x.data.mean(axis=axis, keepdims=keepdims)
    count = x.size // max(1, np.asarray(out).size)

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, x.shape),)

    return _emit("mean", np.asarray(out, dtype=x.dtype), (x,), grad_fn)


def embedding(table: Tensor, indices: np.ndarray) -> Tensor:
    """Rows of table selected by integer indices (any shape)."""
    indices = np.asarray(indices)
    if not np.issubdtype(indices.dtype, np.integer):
        raise EcgContractError(
            f"embedding: indices must be integers, got {indices.dtype}."
        )
    if indices.size and (indices.min() < 0 or indices.max() >= table.shape[0]):
        raise EcgContractError(
            f"embedding: index out of range for table {table.shape}."
        )

    def grad_fn(g: np.ndarray) -> tuple[_IndexedGrad]:
        return (_IndexedGrad(indices, g),)

    return _emit("embedding", table.data[indices], (table,), grad_fn)


# Loss


def cross_entropy_loss(logits: Tensor, one_hot: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of the true class under softmax(logits).

    Raises:
        EcgContractError: Shapes differ or a label row is not one-hot.
    """
    one_hot = np.asarray(one_hot, dtype=logits.dtype)
    if logits.ndim != 2 or one_hot.shape != logits.shape:
        raise EcgContractError(
            f"cross_entropy_loss: logits {logits.shape} vs labels {one_hot.shape}."
        )
    if not (
        np.all((one_hot == 0) | (one_hot == 1)) and np.all(one_hot.sum(axis=1) == 1)
    ):
        raise EcgContractError("cross_entropy_loss: label rows must be one-hot.")

    log_probs = logits.data - special.logsumexp(logits.data, axis=1, keepdims=True)
    batch = logits.shape[0]
    loss = -(one_hot * log_probs).sum() / batch

    def grad_fn(g: np.ndarray) -> tuple[np.ndarray]:
        return (g * (np.exp(log_probs) - one_hot) / batch,)

    return _emit(
        "cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), grad_fn
    )


OPS: dict[str, Callable[..., Tensor]] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "matmul": matmul,
    "conv1d": conv1d,
    "max_pool1d": max_pool1d,
    "relu": relu,
    "gelu": gelu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "softmax": softmax,
    "layer_norm": layer_norm,
    "batch_norm": batch_norm,
    "dropout": dropout,
    "lstm_step": lstm_step,
    "concat": lambda *tensors, axis=0: concat(tensors, axis=axis),
    "slice": getitem,
    "reshape": reshape,
    "transpose": transpose,
    "sum": sum_,
    "mean": mean,
    "embedding": embedding,
}


def op_forward(kind: str, *inputs: Any, **params: Any) -> Tensor:
    """Run an operator by name.

    Raises:
        EcgContractError: Unknown operator.
    """
    try:
        operator = OPS[kind]
    except KeyError:
        raise EcgContractError(
            f"Unknown operator '{kind}'. Available: {sorted(OPS)}."
        ) from None
    return operator(*inputs, **params)


def gradient_check(
    fn: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-4,
    seed: int = 0,
) -> float:
    """Compare analytic gradients with central differences.

    The output of fn is reduced to a scalar through a fixed random projection
    so every output element contributes. fn must be deterministic (create any
    random generator inside fn with a fixed seed).

    Args:
        fn: Function of the input tensors.
        inputs: Tensors to differentiate; those with requires_grad are checked.
        h: Finite-difference step.
        seed: Seed of the projection weights.

    Returns:
        Largest relative error ||analytic - numeric|| / (||analytic|| +
        ||numeric||) over the checked inputs.
    """
    probe = fn(*inputs)
    projection = np.random.default_rng(seed).standard_normal(probe.shape)

    for tensor in inputs:
        tensor.grad = None
    with Tape() as tape:
        loss = sum_(mul(fn(*inputs), Tensor(projection, dtype=probe.dtype)))
        tape.backward(loss)

    worst = 0.0
    for tensor in inputs:
        if not tensor.requires_grad:
            continue
        analytic = np.zeros_like(tensor.data) if tensor.grad is None else tensor.grad
        numeric = np.zeros_like(tensor.data)
        flat = tensor.data.reshape(-1)
        for position in range(flat.size):
            original = flat[position]
            flat[position] = original + h
            upper = float((fn(*inputs).data * projection).sum())
            flat[position] = original - h
            lower = float((fn(*inputs).data * projection).sum())
            flat[position] = original
            numeric.reshape(-1)[position] = (upper - lower) / (2 * h)
        scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
        if scale == 0.0:
            continue
        worst = max(worst, float(np.linalg.norm(analytic - numeric) / scale))
    _LOGGER.debug("Gradient check relative error %.3e", worst)
    return worst
