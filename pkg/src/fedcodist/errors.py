"""Exception hierarchy.

Every error raised by the package derives from :class:`FedCodistError`, and the
class name doubles as the category printed by the CLI on failure.
"""

from __future__ import annotations


class FedCodistError(Exception):
    """Base class for all package errors."""


# numerics / optim
class IncompatibleParams(FedCodistError, ValueError):
    pass


class NumericalError(FedCodistError, ValueError):
    pass


class InvalidTemperature(FedCodistError, ValueError):
    pass


class MissingSupervision(FedCodistError, ValueError):
    pass


class IncompatibleBatches(FedCodistError, ValueError):
    pass


class ScheduleExhausted(FedCodistError, ValueError):
    pass


# fedcore
class PoolExhausted(FedCodistError, ValueError):
    pass


class EmptyClient(FedCodistError, ValueError):
    pass


class NothingToAggregate(FedCodistError, ValueError):
    pass


# codist
class NoDistillationData(FedCodistError, ValueError):
    pass


class InvalidAlpha(FedCodistError, ValueError):
    pass


# data
class NotEnoughExamples(FedCodistError, ValueError):
    pass


class DegeneratePool(FedCodistError, ValueError):
    pass


# harness
class ConfigSyntaxError(FedCodistError, ValueError):
    pass


class ConfigValidationError(FedCodistError, ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class EmptyEvaluation(FedCodistError, ValueError):
    pass


class WriteError(FedCodistError, OSError):
    pass
