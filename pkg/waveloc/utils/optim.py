"""Adam optimiser and the plateau learning-rate / early-stopping schedule."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Sequence

import numpy as np

from waveloc.errors import ConfigurationError, InputError

logger = logging.getLogger(__name__)

BETA1 = 0.9
BETA2 = 0.999
EPSILON = 1e-8
LR_FLOOR = 1e-6


@dataclass
class OptimizerState:
    learning_rate: float = 1e-3
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigurationError("learning rate must be positive")


def adam_step(
    state: OptimizerState,
    params: Dict[str, np.ndarray],
    grads: Dict[str, np.ndarray],
) -> OptimizerState:
    """Apply one bias-corrected Adam update to ``params`` in place.

    Only names present in ``grads`` are touched, so frozen tensors never move.
    """
    state.step += 1
    t = state.step
    correction1 = 1.0 - BETA1**t
    correction2 = 1.0 - BETA2**t
    for name, grad in grads.items():
        param = params[name]
        if grad.shape != param.shape:
            raise InputError(
                f"gradient {name} has shape {grad.shape}, parameter {param.shape}"
            )
        m = state.first_moment.setdefault(name, np.zeros_like(param))
        v = state.second_moment.setdefault(name, np.zeros_like(param))
        m *= BETA1
        m += (1.0 - BETA1) * grad
        v *= BETA2
        v += (1.0 - BETA2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        param -= (state.learning_rate * m_hat / (np.sqrt(v_hat) + EPSILON)).astype(
            param.dtype
        )
    return state


@dataclass(frozen=True)
class TrainingSchedule:
    base_lr: float = 1e-3
    lr_decay_factor: float = 0.2
    lr_patience: int = 2
    early_stop_patience: int = 5
    max_epochs: int = 50
    batch_size: int = 128

    def __post_init__(self) -> None:
        for name in (
            "base_lr",
            "lr_decay_factor",
            "lr_patience",
            "early_stop_patience",
            "max_epochs",
            "batch_size",
        ):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")


@dataclass(frozen=True)
class ScheduleDecision:
    stop: bool
    learning_rate: float
    restore_best: bool
    best_epoch: int
    epochs_since_best: int


def schedule_step(
    schedule: TrainingSchedule, history: Sequence[float], learning_rate: float
) -> ScheduleDecision:
    """Decide what happens after the latest epoch in ``history``.

    An epoch improves only if its validation loss is strictly below every
    earlier one.  The learning rate is multiplied by ``lr_decay_factor`` each
    time the run reaches another ``lr_patience`` epochs without improvement;
    training stops after more than ``early_stop_patience`` such epochs or at
    ``max_epochs``.
    """
    if not history:
        raise InputError("schedule_step needs at least one completed epoch")
    best_epoch = int(np.argmin(history))  # first index of the minimum
    since_best = len(history) - 1 - best_epoch
    lr = learning_rate
    if since_best > 0 and since_best % schedule.lr_patience == 0:
        lr = max(learning_rate * schedule.lr_decay_factor, LR_FLOOR)
        logger.info(
            "no improvement for %d epochs, learning rate %.2e -> %.2e",
            since_best,
            learning_rate,
            lr,
        )
    stop = since_best > schedule.early_stop_patience or len(history) >= (
        schedule.max_epochs
    )
    return ScheduleDecision(
        stop=stop,
        learning_rate=lr,
        restore_best=stop,
        best_epoch=best_epoch,
        epochs_since_best=since_best,
    )
