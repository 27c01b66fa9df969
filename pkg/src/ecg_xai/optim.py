"""Adam optimizer and learning-rate schedules."""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from .exceptions import EcgContractError
from .tensor import Tensor

_LOGGER = logging.getLogger(__name__)


@dataclass
class AdamState:
    """Moments and hyperparameters of an Adam optimizer.

    Attributes:
        learning_rate: Step size (before any schedule is applied).
        beta1: Decay of the first moment.
        beta2: Decay of the second moment.
        eps: Denominator floor.
        step: Number of applied (non-skipped) updates.
        skipped_steps: Updates skipped because a gradient was not finite.
        first_moments: One array per parameter.
        second_moments: One array per parameter.
    """

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    skipped_steps: int = 0
    first_moments: list[np.ndarray] = field(default_factory=list)
    second_moments: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[Tensor], **hyper: float) -> AdamState:
        """Create a state with zero moments matching params."""
        return cls(
            first_moments=[np.zeros_like(param.data) for param in params],
            second_moments=[np.zeros_like(param.data) for param in params],
            **hyper,
        )


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray | None],
    state: AdamState,
    learning_rate: float | None = None,
) -> bool:
    """Apply one bias-corrected Adam update in place.

    A step whose gradients contain NaN or infinity is skipped entirely and
    counted in ``state.skipped_steps``. A missing gradient counts as zero.

    Args:
        params: Parameters to update.
        grads: Gradient per parameter, aligned with params.
        state: Optimizer state, updated in place.
        learning_rate: Overrides ``state.learning_rate`` for this step.

    Returns:
        True if the update was applied.

    Raises:
        EcgContractError: Parameters, gradients and moments are not aligned.
    """
    if not (len(params) == len(grads) == len(state.first_moments)):
        raise EcgContractError(
            f"adam_step: {len(params)} params, {len(grads)} grads, "
            f"{len(state.first_moments)} moment arrays."
        )
    for param, grad, moment in zip(params, grads, state.first_moments, strict=True):
        grad_shape = param.shape if grad is None else grad.shape
        if moment.shape != param.shape or grad_shape != param.shape:
            raise EcgContractError(
                f"adam_step: parameter {param.name or '?'} has shape {param.shape}, "
                f"moment {moment.shape}, grad {grad_shape}."
            )

    if any(grad is not None and not np.all(np.isfinite(grad)) for grad in grads):
        state.skipped_steps += 1
        _LOGGER.warning(
            "Skipping optimizer step with non-finite gradient (%d skipped so far)",
            state.skipped_steps,
        )
        return False

    state.step += 1
    rate = state.learning_rate if learning_rate is None else learning_rate
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for index, (param, grad) in enumerate(zip(params, grads, strict=True)):
        if grad is None:
            grad = np.zeros_like(param.data)
        m = state.first_moments[index]
        v = state.second_moments[index]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        update = rate * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.data -= update.astype(param.dtype, copy=False)
    return True


def cosine_learning_rate(
    base_rate: float, epoch: int, total_epochs: int, min_rate: float = 0.0
) -> float:
    """Cosine decay from base_rate at epoch 0 to min_rate at the last epoch."""
    if total_epochs <= 1:
        return base_rate
    progress = min(max(epoch, 0), total_epochs - 1) / (total_epochs - 1)
    cosine = 1.0 + math.cos(math.pi * progress)
    return min_rate + 0.5 * (base_rate - min_rate) * cosine
