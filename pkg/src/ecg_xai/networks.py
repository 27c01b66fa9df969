"""Classifier architectures, trained-model wrapper and checkpoints.

Three networks classify padded RRR segments (batch, 1500) into the three
rhythm labels:

* ``vit``: vision transformer over 30-sample patches with a CLS token and
  optional key masking of fully padded patches.
* ``resnet``: ResNet50 transposed to 1-D, exposing its final convolutional
  activations for Grad-CAM.
* ``cnn_lstm``: one convolution, max pooling and an LSTM.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np

from .const import (
    CHECKPOINT_MANIFEST,
    CHECKPOINT_PARAMS,
    MAX_SEGMENT_LENGTH,
    N_CLASSES,
)
from .exceptions import EcgContractError, EcgDataError
from .layers import (
    LSTM,
    BatchNorm,
    Conv1D,
    Dense,
    Dropout,
    LayerNorm,
    Module,
    MultiHeadAttention,
    parameter,
    trunc_normal,
)
from .tensor import Tensor, concat, embedding, gelu, max_pool1d, mean, relu, reshape
from .utils import atomic_write, config_hash, version_string

_LOGGER = logging.getLogger(__name__)

Architecture = Literal["vit", "resnet", "cnn_lstm"]
ARCHITECTURES: tuple[str, ...] = ("vit", "resnet", "cnn_lstm")


@dataclass(frozen=True)
class ViTConfig:
    """Vision transformer hyperparameters.

    Attributes:
        patch_size: Samples per patch; must divide input_len.
        embed_dim: Token width; must be divisible by n_heads.
        n_layers: Transformer blocks.
        n_heads: Attention heads per block.
        mlp_units: Hidden width of the block MLP and the classification head.
        mlp_dropout: Dropout after the MLP activations.
        mask_padding: Hide fully padded patches from attention.
        n_classes: Output classes.
        input_len: Padded segment width.
    """

    patch_size: int = 30
    embed_dim: int = 16
    n_layers: int = 3
    n_heads: int = 2
    mlp_units: int = 128
    mlp_dropout: float = 0.1
    mask_padding: bool = False
    n_classes: int = N_CLASSES
    input_len: int = MAX_SEGMENT_LENGTH

    def __post_init__(self) -> None:
        """Check divisibility and ranges."""
        if min(self.patch_size, self.embed_dim, self.n_layers, self.n_heads) < 1:
            raise EcgContractError(f"ViTConfig: sizes must be positive: {self}.")
        if self.input_len % self.patch_size:
            raise EcgContractError(
                f"ViTConfig: input_len {self.input_len} not divisible by "
                f"patch_size {self.patch_size}."
            )
        if self.embed_dim % self.n_heads:
            raise EcgContractError(
                f"ViTConfig: embed_dim {self.embed_dim} not divisible by "
                f"n_heads {self.n_heads}."
            )
        if not 0.0 <= self.mlp_dropout < 1.0:
            raise EcgContractError(
                f"ViTConfig: mlp_dropout {self.mlp_dropout} outside [0, 1)."
            )

    @property
    def n_patches(self) -> int:
        """Patches per segment."""
        return self.input_len // self.patch_size

    @property
    def sequence_length(self) -> int:
        """Tokens per segment including CLS."""
        return self.n_patches + 1


@dataclass(frozen=True)
class ResNetConfig:
    """1-D ResNet hyperparameters (defaults give ResNet50).

    Attributes:
        blocks: Bottleneck blocks per stage.
        base_width: Bottleneck width of the first stage; doubles per stage.
        expansion: Output channels per bottleneck width.
        stem_kernel: Kernel of the stride-2 stem convolution.
        head_dense_units: Hidden units of the classification head.
        head_dropout: Dropout before the classifier.
        n_classes: Output classes.
        input_len: Padded segment width.
    """

    blocks: tuple[int, ...] = (3, 4, 6, 3)
    base_width: int = 64
    expansion: int = 4
    stem_kernel: int = 7
    head_dense_units: int = 64
    head_dropout: float = 0.2
    n_classes: int = N_CLASSES
    input_len: int = MAX_SEGMENT_LENGTH

    def __post_init__(self) -> None:
        """Normalize blocks to a tuple and check ranges."""
        object.__setattr__(self, "blocks", tuple(int(n) for n in self.blocks))
        if not self.blocks or min(self.blocks) < 1:
            raise EcgContractError(f"ResNetConfig: invalid blocks {self.blocks}.")
        if min(self.base_width, self.expansion, self.stem_kernel) < 1:
            raise EcgContractError(f"ResNetConfig: sizes must be positive: {self}.")

    @property
    def final_channels(self) -> int:
        """Channels of the final convolutional activations."""
        return self.base_width * 2 ** (len(self.blocks) - 1) * self.expansion

    @property
    def final_length(self) -> int:
        """Temporal length of the final convolutional activations."""
        padding = self.stem_kernel // 2
        length = (self.input_len + 2 * padding - self.stem_kernel) // 2 + 1
        length = (length + 2 - 3) // 2 + 1
        for _ in self.blocks[1:]:
            length = (length + 2 - 3) // 2 + 1
        return length


@dataclass(frozen=True)
class CnnLstmConfig:
    """CNN-LSTM hyperparameters."""

    conv_filters: int = 32
    kernel_size: int = 3
    pool_size: int = 2
    lstm_units: int = 96
    recurrent_dropout: float = 0.2
    n_classes: int = N_CLASSES
    input_len: int = MAX_SEGMENT_LENGTH

    def __post_init__(self) -> None:
        """Check ranges."""
        sizes = (self.conv_filters, self.kernel_size, self.pool_size, self.lstm_units)
        if min(sizes) < 1:
            raise EcgContractError(f"CnnLstmConfig: sizes must be positive: {self}.")
        if not 0.0 <= self.recurrent_dropout < 1.0:
            raise EcgContractError(
                f"CnnLstmConfig: recurrent_dropout {self.recurrent_dropout} "
                "outside [0, 1)."
            )

    @property
    def steps(self) -> int:
        """LSTM time steps after the valid convolution and pooling."""
        return (self.input_len - self.kernel_size + 1) // self.pool_size


NetworkConfig = ViTConfig | ResNetConfig | CnnLstmConfig

CONFIG_TYPES: dict[str, type] = {
    "vit": ViTConfig,
    "resnet": ResNetConfig,
    "cnn_lstm": CnnLstmConfig,
}


def _as_batch(batch: np.ndarray | Tensor, input_len: int, dtype: Any) -> np.ndarray:
    data = batch.data if isinstance(batch, Tensor) else np.asarray(batch)
    if data.ndim != 2 or data.shape[1] != input_len:
        raise EcgContractError(
            f"forward: batch must have shape (B, {input_len}), got {data.shape}."
        )
    return data.astype(dtype, copy=False)


def padding_mask(lengths: np.ndarray, config: ViTConfig) -> np.ndarray:
    """Key mask (batch, sequence_length); False for patches of pure padding.

    Patch j covers samples [j * p, (j + 1) * p) and is masked iff
    ``j * p >= original_length``. CLS is never masked.
    """
    lengths = np.asarray(lengths, dtype=np.int64).reshape(-1)
    starts = np.arange(config.n_patches) * config.patch_size
    keep = starts[None, :] < lengths[:, None]
    return np.concatenate([np.ones((len(lengths), 1), dtype=bool), keep], axis=1)


class TransformerBlock(Module):
    """Pre-norm attention and MLP with residual connections."""

    def __init__(self, config: ViTConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.attention_norm = LayerNorm(config.embed_dim)
        self.attention = MultiHeadAttention(config.embed_dim, config.n_heads, rng)
        self.mlp_norm = LayerNorm(config.embed_dim)
        self.mlp_hidden = Dense(config.embed_dim, config.mlp_units, rng)
        self.mlp_out = Dense(config.mlp_units, config.embed_dim, rng)
        self.mlp_dropout = Dropout(config.mlp_dropout, rng)

    def __call__(
        self, x: Tensor, mask: np.ndarray | None
    ) -> tuple[Tensor, Tensor]:
        attended, weights = self.attention(self.attention_norm(x), mask)
        x = x + attended
        hidden = self.mlp_dropout(gelu(self.mlp_hidden(self.mlp_norm(x))))
        x = x + self.mlp_dropout(self.mlp_out(hidden))
        return x, weights


class VisionTransformer(Module):
    """Patch-token transformer with a learnable CLS token."""

    architecture = "vit"

    def __init__(self, config: ViTConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.config = config
        self.patch_embedding = Dense(config.patch_size, config.embed_dim, rng)
        self.cls_token = parameter(trunc_normal((1, config.embed_dim), rng))
        self.position_embedding = parameter(
            trunc_normal((config.sequence_length, config.embed_dim), rng)
        )
        self.blocks = [TransformerBlock(config, rng) for _ in range(config.n_layers)]
        self.head_norm = LayerNorm(config.embed_dim)
        self.head_dense = Dense(config.embed_dim, config.mlp_units, rng)
        self.head_dropout = Dropout(config.mlp_dropout, rng)
        self.classifier = Dense(config.mlp_units, config.n_classes, rng)

    def forward(
        self,
        batch: np.ndarray | Tensor,
        lengths: np.ndarray | None = None,
        collect_attention: bool = False,
    ) -> tuple[Tensor, list[np.ndarray]]:
        config = self.config
        data = _as_batch(batch, config.input_len, self.cls_token.dtype)
        size = data.shape[0]

        mask = None
        if config.mask_padding:
            if lengths is None:
                raise EcgContractError(
                    "vit_forward: mask_padding needs the original segment lengths."
                )
            mask = padding_mask(lengths, config)

        patches = Tensor(data.reshape(size, config.n_patches, config.patch_size))
        tokens = self.patch_embedding(patches)
        cls = reshape(
            embedding(self.cls_token, np.zeros(size, dtype=np.int64)),
            (size, 1, config.embed_dim),
        )
        sequence = concat([cls, tokens], axis=1) + self.position_embedding

        attention: list[np.ndarray] = []
        for block in self.blocks:
            sequence, weights = block(sequence, mask)
            if collect_attention:
                attention.append(weights.data)

        pooled = self.head_norm(sequence[:, 0, :])
        hidden = self.head_dropout(gelu(self.head_dense(pooled)))
        return self.classifier(hidden), attention

    def logits(self, batch: np.ndarray, lengths: np.ndarray | None = None) -> Tensor:
        return self.forward(batch, lengths)[0]


class Bottleneck(Module):
    """1x1 reduce, k3 (strided), 1x1 expand, with a projected shortcut."""

    def __init__(
        self,
        in_channels: int,
        width: int,
        expansion: int,
        stride: int,
        rng: np.random.Generator,
    ) -> None:
        super().__init__()
        out_channels = width * expansion
        self.reduce = Conv1D(in_channels, width, 1, rng, bias=False)
        self.reduce_norm = BatchNorm(width)
        self.conv = Conv1D(width, width, 3, rng, stride=stride, padding=1, bias=False)
        self.conv_norm = BatchNorm(width)
        self.expand = Conv1D(width, out_channels, 1, rng, bias=False)
        self.expand_norm = BatchNorm(out_channels)
        self.shortcut = None
        self.shortcut_norm = None
        if stride != 1 or in_channels != out_channels:
            self.shortcut = Conv1D(
                in_channels, out_channels, 1, rng, stride=stride, bias=False
            )
            self.shortcut_norm = BatchNorm(out_channels)

    def __call__(self, x: Tensor) -> Tensor:
        out = relu(self.reduce_norm(self.reduce(x)))
        out = relu(self.conv_norm(self.conv(out)))
        out = self.expand_norm(self.expand(out))
        identity = x
        if self.shortcut is not None:
            identity = self.shortcut_norm(self.shortcut(x))
        return relu(out + identity)


class ResNet1D(Module):
    """Bottleneck ResNet over single-channel sequences."""

    architecture = "resnet"

    def __init__(self, config: ResNetConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.config = config
        self.stem = Conv1D(
            1,
            config.base_width,
            config.stem_kernel,
            rng,
            stride=2,
            padding=config.stem_kernel // 2,
            bias=False,
        )
        self.stem_norm = BatchNorm(config.base_width)
        self.layers: list[Bottleneck] = []
        in_channels = config.base_width
        for stage, count in enumerate(config.blocks):
            width = config.base_width * 2**stage
            for index in range(count):
                stride = 2 if stage > 0 and index == 0 else 1
                self.layers.append(
                    Bottleneck(in_channels, width, config.expansion, stride, rng)
                )
                in_channels = width * config.expansion
        self.head_dense = Dense(in_channels, config.head_dense_units, rng, init="he")
        self.head_dropout = Dropout(config.head_dropout, rng)
        self.classifier = Dense(config.head_dense_units, config.n_classes, rng)

    def forward(
        self, batch: np.ndarray | Tensor, collect_activations: bool = False
    ) -> tuple[Tensor, Tensor | None]:
        data = _as_batch(batch, self.config.input_len, self.stem.weight.dtype)
        x = Tensor(data[:, :, None])
        x = relu(self.stem_norm(self.stem(x)))
        x = max_pool1d(x, 3, stride=2, padding=1)
        for layer in self.layers:
            x = layer(x)
        activations = x
        hidden = relu(self.head_dense(mean(activations, axis=1)))
        logits = self.classifier(self.head_dropout(hidden))
        return logits, activations if collect_activations else None

    def logits(self, batch: np.ndarray, lengths: np.ndarray | None = None) -> Tensor:
        return self.forward(batch)[0]


class CnnLstm(Module):
    """Convolution, max pooling, LSTM and a dense classifier."""

    architecture = "cnn_lstm"

    def __init__(self, config: CnnLstmConfig, rng: np.random.Generator) -> None:
        super().__init__()
        self.config = config
        self.conv = Conv1D(1, config.conv_filters, config.kernel_size, rng)
        self.lstm = LSTM(
            config.conv_filters,
            config.lstm_units,
            rng,
            recurrent_dropout=config.recurrent_dropout,
        )
        self.classifier = Dense(config.lstm_units, config.n_classes, rng, init="glorot")

    def forward(self, batch: np.ndarray | Tensor) -> Tensor:
        data = _as_batch(batch, self.config.input_len, self.conv.weight.dtype)
        x = relu(self.conv(Tensor(data[:, :, None])))
        x = max_pool1d(x, self.config.pool_size)
        return self.classifier(self.lstm(x))

    def logits(self, batch: np.ndarray, lengths: np.ndarray | None = None) -> Tensor:
        return self.forward(batch)


Network = VisionTransformer | ResNet1D | CnnLstm


def build_network(
    architecture: str, config: NetworkConfig, rng: np.random.Generator
) -> Network:
    """Instantiate a freshly initialized network.

    Raises:
        EcgContractError: Unknown architecture or mismatched config type.
    """
    classes: dict[str, type] = {
        "vit": VisionTransformer,
        "resnet": ResNet1D,
        "cnn_lstm": CnnLstm,
    }
    if architecture not in classes:
        raise EcgContractError(
            f"Unknown architecture '{architecture}'. Expected one of {ARCHITECTURES}."
        )
    if not isinstance(config, CONFIG_TYPES[architecture]):
        raise EcgContractError(
            f"Architecture '{architecture}' needs "
            f"{CONFIG_TYPES[architecture].__name__}, "
            f"got {type(config).__name__}."
        )
    return classes[architecture](config, rng)


def vit_forward(
    model: VisionTransformer,
    batch: np.ndarray,
    lengths: np.ndarray | None = None,
    collect_attention: bool = False,
) -> tuple[Tensor, list[np.ndarray]]:
    """ViT logits and, when collected, attention per layer.

    Returns:
        Logits (B, n_classes) and a list with one (B, heads, S, S) array per
        layer, S = input_len / patch_size + 1; ``attention[l][:, h]`` is the
        (B, S, S) weight matrix of head h in layer l. Empty unless collected.
    """
    return model.forward(batch, lengths, collect_attention)


def resnet_forward(
    model: ResNet1D, batch: np.ndarray, collect_activations: bool = False
) -> tuple[Tensor, Tensor | None]:
    """ResNet logits and, when collected, the final conv activations (B, L', C')."""
    return model.forward(batch, collect_activations)


def cnn_lstm_forward(model: CnnLstm, batch: np.ndarray) -> Tensor:
    """CNN-LSTM logits."""
    return model.forward(batch)


@dataclass(frozen=True, eq=False)
class TrainedModel:
    """A network with everything needed to reuse it.

    Attributes:
        architecture: 'vit', 'resnet' or 'cnn_lstm'.
        config: Architecture config.
        network: Trained network, left in eval mode.
        normalization: Per-recording normalization the network was trained on.
        split: Patient ids per split part, when known.
        segment_cache: Segment cache the network was trained from, when known.
        best_epoch: Epoch whose parameters were kept.
    """

    architecture: str
    config: NetworkConfig
    network: Network
    normalization: str = "none"
    split: dict[str, Any] = field(default_factory=dict)
    segment_cache: str | None = None
    best_epoch: int = -1

    @property
    def config_hash(self) -> str:
        """Hash of architecture and config."""
        return config_hash({"architecture": self.architecture, **asdict(self.config)})

    def parameter_checksum(self) -> float:
        """Sum of absolute parameter values, for read-only checks."""
        return float(
            sum(
                np.abs(param.data).sum(dtype=np.float64)
                for param in self.network.parameters()
            )
        )


def save_checkpoint(model: TrainedModel, directory: Path) -> Path:
    """Write parameters and manifest into directory.

    Parameters and buffers go to ``params.npz`` as little-endian float32
    arrays keyed by dotted path; ``manifest.json`` carries the config, its
    hash, the split and the segment cache reference.

    Returns:
        The checkpoint directory.
    """
    directory = Path(directory)
    arrays = {
        name: np.asarray(value, dtype="<f4")
        for name, value in model.network.state_dict().items()
    }
    with atomic_write(directory / CHECKPOINT_PARAMS, "wb") as file:
        np.savez(file, **arrays)
    manifest = {
        "architecture": model.architecture,
        "config": asdict(model.config),
        "config_hash": model.config_hash,
        "normalization": model.normalization,
        "split": model.split,
        "segment_cache": model.segment_cache,
        "best_epoch": model.best_epoch,
        "version": version_string(),
        "parameters": {name: list(array.shape) for name, array in arrays.items()},
    }
    with atomic_write(directory / CHECKPOINT_MANIFEST) as file:
        json.dump(manifest, file, indent=2, sort_keys=True)
        file.write("\n")
    _LOGGER.info("Saved %s checkpoint to %s", model.architecture, directory)
    return directory


def load_checkpoint(directory: Path) -> TrainedModel:
    """Rebuild a TrainedModel saved by :func:`save_checkpoint`.

    Raises:
        EcgDataError: Files missing or inconsistent with the manifest.
    """
    directory = Path(directory)
    manifest_path = directory / CHECKPOINT_MANIFEST
    params_path = directory / CHECKPOINT_PARAMS
    if not manifest_path.is_file() or not params_path.is_file():
        raise EcgDataError(f"No checkpoint in {directory}.", error_id="checkpoint")

    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        architecture = manifest["architecture"]
        config = CONFIG_TYPES[architecture](**manifest["config"])
    except (json.JSONDecodeError, KeyError, TypeError) as err:
        raise EcgDataError(
            f"Invalid checkpoint manifest {manifest_path}: {err}", error_id="checkpoint"
        ) from err

    network = build_network(architecture, config, np.random.default_rng(0))
    model = TrainedModel(
        architecture=architecture,
        config=config,
        network=network,
        normalization=manifest.get("normalization", "none"),
        split=manifest.get("split") or {},
        segment_cache=manifest.get("segment_cache"),
        best_epoch=int(manifest.get("best_epoch", -1)),
    )
    if manifest.get("config_hash") != model.config_hash:
        raise EcgDataError(
            f"Checkpoint {directory} config hash does not match its config.",
            error_id="checkpoint",
        )
    with np.load(params_path) as archive:
        state = {name: archive[name].astype(np.float32) for name in archive.files}
    try:
        network.load_state_dict(state)
    except EcgContractError as err:
        raise EcgDataError(str(err), error_id="checkpoint") from err
    network.eval()
    _LOGGER.debug("Loaded %s checkpoint from %s", architecture, directory)
    return model
