"""Trainable building blocks assembled from tensor operators."""

from __future__ import annotations

import math
from collections.abc import Iterator
from typing import Any

import numpy as np
from scipy import stats

from .exceptions import EcgContractError
from .tensor import (
    Tensor,
    batch_norm,
    conv1d,
    dropout,
    layer_norm,
    lstm_step,
    matmul,
    reshape,
    softmax,
    transpose,
)

TRUNC_NORMAL_STD = 0.02


def trunc_normal(
    shape: tuple[int, ...], rng: np.random.Generator, std: float = TRUNC_NORMAL_STD
) -> np.ndarray:
    """Normal samples truncated at two standard deviations."""
    return stats.truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng)


def he_uniform(
    shape: tuple[int, ...], fan_in: int, rng: np.random.Generator
) -> np.ndarray:
    """Uniform samples in +-sqrt(6 / fan_in)."""
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def glorot_uniform(
    shape: tuple[int, int], rng: np.random.Generator
) -> np.ndarray:
    """Uniform samples in +-sqrt(6 / (fan_in + fan_out))."""
    limit = math.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-limit, limit, size=shape)


def orthogonal(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Matrix with orthonormal rows or columns."""
    rows, cols = shape
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q *= np.sign(np.diag(r))
    return q if rows >= cols else q.T


class Module:
    """Container of parameters, buffers and child modules.

    Parameters are Tensor attributes with ``requires_grad``; buffers are the
    numpy arrays named in ``buffer_names``. Children may be stored directly
    or in lists. Attribute insertion order fixes the parameter order.
    """

    buffer_names: tuple[str, ...] = ()

    def __init__(self) -> None:
        """Start in training mode."""
        self.training = True

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        """Yield (dotted path, parameter) pairs, depth first."""
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield f"{prefix}{name}", value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, list):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{index}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        """Yield (dotted path, buffer) pairs, depth first."""
        for name in self.buffer_names:
            yield f"{prefix}{name}", getattr(self, name)
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(f"{prefix}{name}.")
            elif isinstance(value, list):
                for index, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{prefix}{name}.{index}.")

    def parameters(self) -> list[Tensor]:
        """All parameters in a stable order."""
        return [param for _, param in self.named_parameters()]

    def children(self) -> Iterator[Module]:
        """Direct child modules."""
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, list):
                yield from (item for item in value if isinstance(item, Module))

    def train(self, mode: bool = True) -> Module:
        """Switch training mode for this module and all children."""
        self.training = mode
        for child in self.children():
            child.train(mode)
        return self

    def eval(self) -> Module:
        """Switch to inference mode."""
        return self.train(False)

    def zero_grad(self) -> None:
        """Clear all parameter gradients."""
        for param in self.parameters():
            param.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        """Copies of every parameter and buffer keyed by dotted path."""
        state = {name: param.data.copy() for name, param in self.named_parameters()}
        state.update(
            {name: buffer.copy() for name, buffer in self.named_buffers()}
        )
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into parameters and buffers in place.

        Raises:
            EcgContractError: A path is missing, unexpected or has the wrong
                shape.
        """
        targets: dict[str, np.ndarray] = {
            name: param.data for name, param in self.named_parameters()
        }
        targets.update(dict(self.named_buffers()))
        missing = sorted(set(targets) - set(state))
        unexpected = sorted(set(state) - set(targets))
        if missing or unexpected:
            raise EcgContractError(
                f"load_state_dict: missing {missing[:5]}, unexpected {unexpected[:5]}."
            )
        for name, target in targets.items():
            value = np.asarray(state[name])
            if value.shape != target.shape:
                raise EcgContractError(
                    f"load_state_dict: '{name}' expects shape {target.shape}, "
                    f"got {value.shape}."
                )
            target[...] = value

    def astype(self, dtype: Any) -> Module:
        """Cast parameters and buffers in place."""
        for _, param in self.named_parameters():
            param.data = param.data.astype(dtype)
        for module in self._modules():
            for name in module.buffer_names:
                setattr(module, name, getattr(module, name).astype(dtype))
        return self

    def _modules(self) -> Iterator[Module]:
        yield self
        for child in self.children():
            yield from child._modules()


def parameter(values: np.ndarray, dtype: Any = np.float32) -> Tensor:
    """Trainable leaf tensor."""
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True)


class Dense(Module):
    """Affine map over the last axis."""

    def __init__(
        self,
        in_features: int,
        out_features: int,
        rng: np.random.Generator,
        init: str = "trunc_normal",
    ) -> None:
        super().__init__()
        if init == "trunc_normal":
            weight = trunc_normal((in_features, out_features), rng)
        elif init == "he":
            weight = he_uniform((in_features, out_features), in_features, rng)
        else:
            weight = glorot_uniform((in_features, out_features), rng)
        self.weight = parameter(weight)
        self.bias = parameter(np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class Conv1D(Module):
    """1-D convolution over (batch, length, channels) inputs, He-uniform init."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
    ) -> None:
        super().__init__()
        self.stride = stride
        self.padding = padding
        shape = (kernel_size, in_channels, out_channels)
        self.weight = parameter(he_uniform(shape, kernel_size * in_channels, rng))
        self.bias = parameter(np.zeros(out_channels)) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return conv1d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm(Module):
    """Per-channel batch normalization with running statistics."""

    buffer_names = ("running_mean", "running_var")

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5) -> None:
        super().__init__()
        self.momentum = momentum
        self.eps = eps
        self.gamma = parameter(np.ones(channels))
        self.beta = parameter(np.zeros(channels))
        self.running_mean = np.zeros(channels, dtype=np.float32)
        self.running_var = np.ones(channels, dtype=np.float32)

    def __call__(self, x: Tensor) -> Tensor:
        return batch_norm(
            x,
            self.gamma,
            self.beta,
            self.running_mean,
            self.running_var,
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class LayerNorm(Module):
    """Normalization over the feature axis."""

    def __init__(self, dim: int, eps: float = 1e-5) -> None:
        super().__init__()
        self.eps = eps
        self.gamma = parameter(np.ones(dim))
        self.beta = parameter(np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    """Inverted dropout driven by the module's own generator."""

    def __init__(self, rate: float, rng: np.random.Generator) -> None:
        super().__init__()
        self.rate = rate
        self.rng = rng

    def __call__(self, x: Tensor) -> Tensor:
        return dropout(x, self.rate, self.training, self.rng)


class LSTM(Module):
    """Single-layer forward LSTM returning the final hidden state.

    Recurrent dropout draws one mask per sequence and applies it to the
    hidden state entering the recurrent product only.
    """

    def __init__(
        self,
        input_size: int,
        units: int,
        rng: np.random.Generator,
        recurrent_dropout: float = 0.0,
    ) -> None:
        super().__init__()
        if not 0.0 <= recurrent_dropout < 1.0:
            raise EcgContractError(
                f"LSTM: recurrent_dropout must be in [0, 1), got {recurrent_dropout}."
            )
        self.units = units
        self.recurrent_dropout = recurrent_dropout
        self.rng = rng
        self.w_input = parameter(glorot_uniform((input_size, 4 * units), rng))
        self.w_recurrent = parameter(
            np.concatenate([orthogonal((units, units), rng) for _ in range(4)], axis=1)
        )
        bias = np.zeros(4 * units)
        bias[units : 2 * units] = 1.0
        self.bias = parameter(bias)

    def __call__(self, x: Tensor) -> Tensor:
        """Run over (batch, steps, features) and return h of the last step."""
        if x.ndim != 3:
            raise EcgContractError(
                f"LSTM: expected (batch, steps, features), got {x.shape}."
            )
        batch, steps, _ = x.shape
        state = Tensor(np.zeros((batch, 2 * self.units), dtype=x.dtype))
        mask = None
        if self.training and self.recurrent_dropout > 0.0:
            keep = self.rng.random((batch, self.units)) >= self.recurrent_dropout
            mask = keep.astype(x.dtype) / (1.0 - self.recurrent_dropout)
        for step in range(steps):
            state = lstm_step(
                x[:, step, :],
                state,
                self.w_input,
                self.w_recurrent,
                self.bias,
                recurrent_mask=mask,
            )
        return state[:, : self.units]


def multi_head_attention(
    x: Tensor,
    n_heads: int,
    qkv: Dense,
    projection: Dense,
    mask: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """Scaled dot-product self-attention with several heads.

    Args:
        x: Sequence (batch, length, dim).
        n_heads: Number of heads; must divide dim.
        qkv: Dense layer dim -> 3 * dim producing queries, keys and values.
        projection: Dense layer dim -> dim merging the heads.
        mask: Optional boolean (batch, length); False marks keys nobody may
            attend to.

    Returns:
        The projected output (batch, length, dim) and the attention weights
        (batch, heads, length, length), rows indexed by query.

    Raises:
        EcgContractError: dim not divisible by n_heads, or some query would
            have every key masked.
    """
    batch, length, dim = x.shape
    if n_heads < 1 or dim % n_heads:
        raise EcgContractError(
            f"multi_head_attention: embedding dim {dim} not divisible by "
            f"{n_heads} heads."
        )
    head_dim = dim // n_heads
    packed = reshape(qkv(x), (batch, length, 3, n_heads, head_dim))
    packed = transpose(packed, (2, 0, 3, 1, 4))
    queries, keys, values = packed[0], packed[1], packed[2]

    scale = 1.0 / math.sqrt(head_dim)
    scores = matmul(queries, transpose(keys, (0, 1, 3, 2))) * scale
    key_mask = None if mask is None else np.asarray(mask, dtype=bool)[:, None, None, :]
    weights = softmax(scores, mask=key_mask)

    context = transpose(matmul(weights, values), (0, 2, 1, 3))
    output = projection(reshape(context, (batch, length, dim)))
    return output, weights


class MultiHeadAttention(Module):
    """Self-attention block parameters plus the attention call."""

    def __init__(self, dim: int, n_heads: int, rng: np.random.Generator) -> None:
        super().__init__()
        if n_heads < 1 or dim % n_heads:
            raise EcgContractError(
                f"MultiHeadAttention: embedding dim {dim} not divisible by "
                f"{n_heads} heads."
            )
        self.n_heads = n_heads
        self.qkv = Dense(dim, 3 * dim, rng)
        self.projection = Dense(dim, dim, rng)

    def __call__(
        self, x: Tensor, mask: np.ndarray | None = None
    ) -> tuple[Tensor, Tensor]:
        return multi_head_attention(x, self.n_heads, self.qkv, self.projection, mask)
