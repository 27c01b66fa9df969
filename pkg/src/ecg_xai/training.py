"""Training loop, batched inference and training history."""

from __future__ import annotations

import logging
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import special

from .const import N_CLASSES
from .exceptions import EcgContractError, EcgDivergenceError
from .models import RrrSegment
from .networks import Network, NetworkConfig, TrainedModel, build_network
from .optim import AdamState, adam_step, cosine_learning_rate
from .tensor import Tape, cross_entropy_loss

_LOGGER = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainingConfig:
    """Optimization budget and hyperparameters.

    Attributes:
        batch_size: Segments per optimizer step.
        epochs: Maximum number of epochs.
        patience: Epochs without validation improvement before stopping.
        learning_rate: Adam step size.
        beta1: Adam first-moment decay.
        beta2: Adam second-moment decay.
        eps: Adam denominator floor.
        cosine_schedule: Decay the learning rate along a cosine.
        min_learning_rate: Final rate of the cosine schedule.
    """

    batch_size: int = 64
    epochs: int = 50
    patience: int = 10
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    cosine_schedule: bool = False
    min_learning_rate: float = 0.0

    def __post_init__(self) -> None:
        """Check ranges."""
        if min(self.batch_size, self.epochs, self.patience) < 1:
            raise EcgContractError(
                f"TrainingConfig: batch_size, epochs and patience must be "
                f"positive, got {self.batch_size}, {self.epochs}, {self.patience}."
            )
        if self.learning_rate <= 0:
            raise EcgContractError(
                f"TrainingConfig: learning_rate must be positive, "
                f"got {self.learning_rate}."
            )


@dataclass(frozen=True)
class EpochRecord:
    """Losses and accuracies of one epoch."""

    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    learning_rate: float
    skipped_steps: int


@dataclass
class TrainingHistory:
    """Per-epoch records of one training run."""

    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1

    def __len__(self) -> int:
        return len(self.records)

    def to_frame(self) -> pd.DataFrame:
        """One row per epoch."""
        columns = list(EpochRecord.__dataclass_fields__)
        return pd.DataFrame([vars(record) for record in self.records], columns=columns)


def stack_segments(
    segments: Sequence[RrrSegment],
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Padded samples (N, 1500), original lengths (N,) and label indices (N,)."""
    if not segments:
        return (
            np.zeros((0, 0), dtype=np.float32),
            np.zeros(0, dtype=np.int64),
            np.zeros(0, dtype=np.int64),
        )
    padded = np.stack([segment.padded for segment in segments]).astype(np.float32)
    lengths = np.array([segment.original_length for segment in segments])
    labels = np.array([segment.label_index for segment in segments])
    return padded, lengths, labels


def predict_logits(
    network: Network,
    padded: np.ndarray,
    lengths: np.ndarray,
    batch_size: int = 256,
) -> np.ndarray:
    """Logits of a network in eval mode, without recording gradients."""
    was_training = network.training
    network.eval()
    try:
        chunks = []
        for start in range(0, len(padded), batch_size):
            rows = slice(start, start + batch_size)
            chunks.append(network.logits(padded[rows], lengths[rows]).data)
    finally:
        network.train(was_training)
    if not chunks:
        return np.zeros((0, N_CLASSES))
    return np.concatenate(chunks).astype(np.float64)


def predict_proba(
    model: TrainedModel | Network,
    segments: Sequence[RrrSegment],
    batch_size: int = 256,
) -> np.ndarray:
    """Softmax class probabilities (N, 3) for segments."""
    network = model.network if isinstance(model, TrainedModel) else model
    padded, lengths, _ = stack_segments(segments)
    logits = predict_logits(network, padded, lengths, batch_size)
    return special.softmax(logits, axis=1)


def _loss_and_accuracy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    log_probs = logits - special.logsumexp(logits, axis=1, keepdims=True)
    loss = float(-log_probs[np.arange(len(labels)), labels].mean())
    accuracy = float((logits.argmax(axis=1) == labels).mean())
    return loss, accuracy


def train_model(
    architecture: str,
    network_config: NetworkConfig,
    train: Sequence[RrrSegment],
    val: Sequence[RrrSegment],
    config: TrainingConfig | None = None,
    seed: int = 0,
    normalization: str = "none",
) -> tuple[TrainedModel, TrainingHistory]:
    """Train a freshly initialized network with Adam and early stopping.

    The parameters of the epoch with the best validation accuracy are kept
    (the earliest one on ties).

    Args:
        architecture: 'vit', 'resnet' or 'cnn_lstm'.
        network_config: Architecture hyperparameters.
        train: Training segments.
        val: Validation segments (patients disjoint from train).
        config: Training budget; defaults to TrainingConfig().
        seed: Seed for initialization, shuffling and dropout.
        normalization: Recorded on the returned model.

    Returns:
        The trained model (eval mode) and the per-epoch history.

    Raises:
        EcgContractError: train or val is empty.
        EcgDivergenceError: The training loss became NaN or infinite.
    """
    config = config or TrainingConfig()
    if not train or not val:
        raise EcgContractError(
            f"train_model: empty split (train={len(train)}, val={len(val)})."
        )

    rng = np.random.default_rng(seed)
    network = build_network(architecture, network_config, rng)
    params = network.parameters()
    state = AdamState.for_params(
        params,
        learning_rate=config.learning_rate,
        beta1=config.beta1,
        beta2=config.beta2,
        eps=config.eps,
    )

    x_train, len_train, y_train = stack_segments(train)
    x_val, len_val, y_val = stack_segments(val)
    one_hot = np.eye(N_CLASSES, dtype=np.float32)[y_train]
    history = TrainingHistory()
    best_accuracy = -np.inf
    best_state = network.state_dict()
    stale_epochs = 0

    _LOGGER.info(
        "Training %s on %d segments (%d validation), up to %d epochs",
        architecture,
        len(train),
        len(val),
        config.epochs,
    )
    for epoch in range(config.epochs):
        rate = config.learning_rate
        if config.cosine_schedule:
            rate = cosine_learning_rate(
                config.learning_rate, epoch, config.epochs, config.min_learning_rate
            )
        network.train()
        order = rng.permutation(len(train))
        loss_sum = 0.0
        correct = 0
        for batch_index, start in enumerate(range(0, len(order), config.batch_size)):
            rows = order[start : start + config.batch_size]
            network.zero_grad()
            with Tape() as tape:
                logits = network.logits(x_train[rows], len_train[rows])
                loss = cross_entropy_loss(logits, one_hot[rows])
                loss_value = loss.item()
                if not np.isfinite(loss_value):
                    raise EcgDivergenceError(
                        f"{architecture} training loss is {loss_value}",
                        epoch=epoch,
                        batch=batch_index,
                    )
                tape.backward(loss)
            adam_step(params, [param.grad for param in params], state, rate)
            loss_sum += loss_value * len(rows)
            correct += int((logits.data.argmax(axis=1) == y_train[rows]).sum())
            _LOGGER.debug("Epoch %d batch %d loss %.4f", epoch, batch_index, loss_value)

        val_loss, val_accuracy = _loss_and_accuracy(
            predict_logits(network, x_val, len_val, config.batch_size), y_val
        )
        record = EpochRecord(
            epoch=epoch,
            train_loss=loss_sum / len(train),
            train_accuracy=correct / len(train),
            val_loss=val_loss,
            val_accuracy=val_accuracy,
            learning_rate=rate,
            skipped_steps=state.skipped_steps,
        )
        history.records.append(record)
        _LOGGER.info(
            "Epoch %d: loss %.4f acc %.3f | val loss %.4f acc %.3f",
            epoch,
            record.train_loss,
            record.train_accuracy,
            val_loss,
            val_accuracy,
        )

        if val_accuracy > best_accuracy:
            best_accuracy = val_accuracy
            best_state = network.state_dict()
            history.best_epoch = epoch
            stale_epochs = 0
        else:
            stale_epochs += 1
            if stale_epochs >= config.patience:
                _LOGGER.info("Early stop after epoch %d (no improvement)", epoch)
                break

    network.load_state_dict(best_state)
    network.eval()
    model = TrainedModel(
        architecture=architecture,
        config=network_config,
        network=network,
        normalization=normalization,
        best_epoch=history.best_epoch,
    )
    return model, history
