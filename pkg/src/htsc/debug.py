"""
Numerical diagnostics: central finite-difference gradient checks and
finiteness assertions.
"""

import logging

from typing import Callable, Dict, Final, List, Sequence

import numpy as np

from .core.tensor import Tensor
from .utils.errors import NumericError


__all__: Final[List[str]] = [
    "GradcheckResult",
    "assert_finite",
    "gradcheck",
    "numerical_gradient",
    "relative_error",
]

logger: Final[logging.Logger] = logging.getLogger(__name__)


class GradcheckResult:
    """
    GradcheckResult class.

    Holds the analytic and numeric gradients of each checked input and the
    worst relative error.
    """

    def __init__(
        self,
        analytic: List[np.ndarray],
        numeric: List[np.ndarray],
        tolerance: float,
    ) -> None:
        self._analytic: Final[List[np.ndarray]] = analytic
        self._numeric: Final[List[np.ndarray]] = numeric
        self._errors: Final[List[float]] = [relative_error(a, n) for a, n in zip(analytic, numeric)]
        self._tolerance: Final[float] = tolerance

    def __repr__(self) -> str:
        return f"GradcheckResult(max_error={self.max_error:.3e}, passed={self.passed})"

    def __bool__(self) -> bool:
        return self.passed

    @property
    def analytic(self) -> List[np.ndarray]:
        return self._analytic

    @property
    def numeric(self) -> List[np.ndarray]:
        return self._numeric

    @property
    def errors(self) -> List[float]:
        return self._errors

    @property
    def max_error(self) -> float:
        return max(self._errors) if self._errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error <= self._tolerance


def relative_error(
    analytic: np.ndarray,
    numeric: np.ndarray,
) -> float:
    """
    Relative error ||a - n|| / max(||a|| + ||n||, 1e-12).
    """

    denominator: float = max(float(np.linalg.norm(analytic) + np.linalg.norm(numeric)), 1e-12)
    return float(np.linalg.norm(analytic - numeric)) / denominator


def numerical_gradient(
    fn: Callable[[], Tensor],
    target: Tensor,
    h: float = 1e-5,
) -> np.ndarray:
    """
    Central finite differences of the scalar fn() with respect to target.

    :param fn: Closure recomputing the scalar output from current buffers.
    :type fn: Callable[[], Tensor]
    :param target: The tensor whose buffer is perturbed in place.
    :type target: Tensor
    :param h: Step size.
    :type h: float

    :return: The numeric gradient with target's shape.
    :rtype: np.ndarray
    """

    data: np.ndarray = target.data
    grad: np.ndarray = np.zeros_like(data)
    flat: np.ndarray = data.reshape(-1)
    out: np.ndarray = grad.reshape(-1)
    for index in range(flat.size):
        original = flat[index]
        flat[index] = original + h
        plus: float = fn().item()
        flat[index] = original - h
        minus: float = fn().item()
        flat[index] = original
        out[index] = (plus - minus) / (2.0 * h)
    return grad


def gradcheck(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    tolerance: float = 1e-4,
) -> GradcheckResult:
    """
    Compare reverse-mode gradients with central finite differences.

    Inputs should be float64 tensors with requires_grad set.

    :param fn: Closure building a scalar from the inputs.
    :type fn: Callable[[], Tensor]
    :param inputs: Tensors to differentiate against.
    :type inputs: Sequence[Tensor]
    :param h: Finite-difference step.
    :type h: float
    :param tolerance: Maximum accepted relative error.
    :type tolerance: float

    :return: The comparison result.
    :rtype: GradcheckResult
    """

    for item in inputs:
        item.zero_grad()
    fn().backward()
    analytic: List[np.ndarray] = [item.grad.copy() for item in inputs]
    numeric: List[np.ndarray] = [numerical_gradient(fn, item, h) for item in inputs]
    result = GradcheckResult(analytic, numeric, tolerance)
    logger.debug("gradcheck %s", result)
    return result


def assert_finite(
    arrays: Dict[str, np.ndarray],
    context: str,
) -> None:
    """
    Raise NumericError naming the first non-finite array.
    """

    for name, array in arrays.items():
        if not np.all(np.isfinite(array)):
            raise NumericError(f"non-finite values in {name} ({context})", {"array": name, "context": context})
