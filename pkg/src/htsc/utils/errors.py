"""
Exception hierarchy shared by every htsc subpackage.

The CLI maps ConfigError to exit code 2 and NumericError to exit code 3.
"""

from typing import Any, Dict, Final, List, Optional


__all__: Final[List[str]] = [
    "CheckpointError",
    "ConfigError",
    "CorpusError",
    "FrontDoorCriterionError",
    "HTSCError",
    "NonIdentifiableError",
    "NumericError",
    "ShapeError",
    "TokenIndexError",
    "TransferError",
    "UndefinedConditionalError",
]


class HTSCError(Exception):
    """
    Base class of every error raised by htsc.
    """

    exit_code: int = 1


class ConfigError(HTSCError):
    """
    Raised when a configuration value is missing, mistyped or out of range.
    """

    exit_code: int = 2


class NumericError(HTSCError):
    """
    Raised when a computation produces NaN or Inf.

    :ivar diagnostic: Context describing where the failure happened.
    """

    exit_code: int = 3

    def __init__(
        self,
        message: str,
        diagnostic: Optional[Dict[str, Any]] = None,
    ) -> None:
        """
        Initialize the NumericError object.

        :param message: The human readable error message.
        :type message: str
        :param diagnostic: Optional context (op name, batch ids, ...).
        :type diagnostic: Optional[Dict[str, Any]]

        :return: None
        :rtype: None
        """

        super().__init__(message)

        # Store the diagnostic context of the failure
        self.diagnostic: Final[Dict[str, Any]] = diagnostic or {}


class ShapeError(HTSCError, ValueError):
    """
    Raised when tensor shapes are incompatible with an operation.
    """


class TokenIndexError(HTSCError, IndexError):
    """
    Raised when an index (token id, class target) is out of range.
    """


class UndefinedConditionalError(HTSCError):
    """
    Raised when conditioning on an event of probability zero.
    """


class NonIdentifiableError(HTSCError):
    """
    Raised when an adjustment formula needs a stratum with zero support.
    """


class FrontDoorCriterionError(HTSCError):
    """
    Raised when the front-door criterion does not hold.

    :ivar violations: The violation report entries.
    """

    def __init__(
        self,
        message: str,
        violations: List[str],
    ) -> None:
        super().__init__(message)

        # Store the list of violated conditions
        self.violations: Final[List[str]] = violations


class CheckpointError(HTSCError):
    """
    Raised when a checkpoint file is malformed or does not match a model.
    """


class TransferError(CheckpointError):
    """
    Raised when shared parameters are missing from a stage-1 checkpoint.

    :ivar missing: Names of the missing parameters.
    """

    def __init__(
        self,
        missing: List[str],
    ) -> None:
        super().__init__(f"checkpoint is missing shared parameters: {', '.join(missing)}")

        # Store the names that could not be transferred
        self.missing: Final[List[str]] = missing


class CorpusError(HTSCError):
    """
    Raised when a corpus directory is missing files or is inconsistent.
    """
