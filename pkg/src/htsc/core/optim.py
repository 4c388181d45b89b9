"""
Adam-family optimizers: decoupled weight decay (AdamW, stage 1) and
coupled L2 decay (Adam, stage 2).
"""

import logging

from enum import Enum
from typing import Dict, Final, List, Optional, Sequence

import numpy as np

from ..utils.errors import ShapeError
from .tensor import Parameter


__all__: Final[List[str]] = [
    "Adam",
    "AdamW",
    "DecayMode",
    "OptimState",
    "Optimizer",
    "adam_step",
    "adamw_step",
]

logger: Final[logging.Logger] = logging.getLogger(__name__)


class DecayMode(Enum):
    """
    Weight decay mode enum.

    :cvar DECOUPLED: Decay applied to the parameter directly (AdamW).
    :cvar COUPLED: Decay added to the gradient before the moments (Adam + L2).
    """

    DECOUPLED = "decoupled"
    COUPLED = "coupled"

    def __str__(self) -> str:
        return self.value


class OptimState:
    """
    OptimState class.

    First/second moment buffers per parameter name, the step counter and the
    hyperparameters of an Adam-family optimizer.
    """

    def __init__(
        self,
        lr: float,
        weight_decay: float = 0.0,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ) -> None:
        """
        Initialize the OptimState object.

        :param lr: The learning rate.
        :type lr: float
        :param weight_decay: The weight decay coefficient.
        :type weight_decay: float
        :param beta1: First moment decay.
        :type beta1: float
        :param beta2: Second moment decay.
        :type beta2: float
        :param eps: Denominator epsilon.
        :type eps: float

        :return: None
        :rtype: None
        """

        self.lr: float = lr
        self.weight_decay: float = weight_decay
        self.beta1: float = beta1
        self.beta2: float = beta2
        self.eps: float = eps

        # Store the step counter and the moment buffers
        self.step: int = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def __repr__(self) -> str:
        return (
            f"OptimState(lr={self.lr}, weight_decay={self.weight_decay}, step={self.step}, "
            f"buffers={len(self.m)})"
        )

    def moments(
        self,
        key: str,
        like: np.ndarray,
    ) -> tuple:
        """
        Return (m, v) for key, allocating zero buffers on first use.

        :raises ShapeError: If existing buffers do not match the parameter.
        """

        if key not in self.m:
            self.m[key] = np.zeros_like(like)
            self.v[key] = np.zeros_like(like)
        elif self.m[key].shape != like.shape:
            raise ShapeError(f"moment buffer for {key} has shape {self.m[key].shape}, parameter {like.shape}")
        return self.m[key], self.v[key]


def _key(param: Parameter, index: int) -> str:
    return param.name if param.name is not None else f"#{index}"


def _adam_family_step(
    params: Sequence[Parameter],
    grads: Sequence[Optional[np.ndarray]],
    state: OptimState,
    mode: DecayMode,
    lr: Optional[float] = None,
) -> None:
    if len(params) != len(grads):
        raise ShapeError(f"{len(params)} parameters but {len(grads)} gradients")

    # The counter increments before use so bias correction sees step >= 1
    state.step += 1
    rate: float = state.lr if lr is None else lr
    correction1: float = 1.0 - state.beta1**state.step
    correction2: float = 1.0 - state.beta2**state.step

    for index, (param, grad) in enumerate(zip(params, grads)):
        theta: np.ndarray = param.data
        g: np.ndarray = np.zeros_like(theta) if grad is None else np.asarray(grad, dtype=theta.dtype)
        if g.shape != theta.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {theta.shape}")

        if mode is DecayMode.COUPLED:
            g = g + state.weight_decay * theta
        else:
            theta -= rate * state.weight_decay * theta

        m, v = state.moments(_key(param, index), theta)
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        theta -= rate * (m / correction1) / (np.sqrt(v / correction2) + state.eps)


def adamw_step(
    params: Sequence[Parameter],
    grads: Sequence[Optional[np.ndarray]],
    state: OptimState,
    lr: Optional[float] = None,
) -> None:
    """
    One AdamW update in place: decoupled decay then bias-corrected moments.

    :param params: The parameters to update.
    :type params: Sequence[Parameter]
    :param grads: One gradient per parameter (None counts as zero).
    :type grads: Sequence[Optional[np.ndarray]]
    :param state: The optimizer state, mutated.
    :type state: OptimState
    :param lr: Optional learning-rate override for this step (warmup).
    :type lr: Optional[float]

    :return: None
    :rtype: None

    :raises ShapeError: If a gradient shape does not match its parameter.
    """

    _adam_family_step(params, grads, state, DecayMode.DECOUPLED, lr)


def adam_step(
    params: Sequence[Parameter],
    grads: Sequence[Optional[np.ndarray]],
    state: OptimState,
    lr: Optional[float] = None,
) -> None:
    """
    One Adam update in place with L2 decay folded into the gradient.
    """

    _adam_family_step(params, grads, state, DecayMode.COUPLED, lr)


class Optimizer:
    """
    Optimizer class.

    Binds a parameter list to an OptimState and an update rule, with an
    optional linear warmup of the learning rate.
    """

    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float,
        weight_decay: float,
        mode: DecayMode,
        warmup_steps: int = 0,
    ) -> None:
        self._params: Final[List[Parameter]] = list(params)
        self._state: Final[OptimState] = OptimState(lr=lr, weight_decay=weight_decay)
        self._mode: Final[DecayMode] = mode
        self._warmup_steps: Final[int] = int(warmup_steps)

    def __repr__(self) -> str:
        return f"{type(self).__name__}(params={len(self._params)}, state={self._state})"

    @property
    def params(self) -> List[Parameter]:
        return self._params

    @property
    def state(self) -> OptimState:
        return self._state

    def current_lr(self) -> float:
        """
        Return the learning rate the next step will use.
        """

        if self._warmup_steps <= 0:
            return self._state.lr
        return self._state.lr * min(1.0, (self._state.step + 1) / self._warmup_steps)

    def zero_grad(self) -> None:
        for param in self._params:
            param.zero_grad()

    def step(self) -> None:
        _adam_family_step(
            self._params,
            [param.grad for param in self._params],
            self._state,
            self._mode,
            self.current_lr(),
        )


class AdamW(Optimizer):
    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 5e-4,
        weight_decay: float = 1e-2,
        warmup_steps: int = 0,
    ) -> None:
        super().__init__(params, lr, weight_decay, DecayMode.DECOUPLED, warmup_steps)


class Adam(Optimizer):
    def __init__(
        self,
        params: Sequence[Parameter],
        lr: float = 1e-5,
        weight_decay: float = 5e-5,
        warmup_steps: int = 0,
    ) -> None:
        super().__init__(params, lr, weight_decay, DecayMode.COUPLED, warmup_steps)
