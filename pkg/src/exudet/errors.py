"""Exception hierarchy shared across the package."""


class ExudetError(Exception):
    """Base class for all package errors."""


class ShapeError(ExudetError, ValueError):
    """Tensor or layer received arguments with incompatible dimensions."""


class DataError(ExudetError, ValueError):
    """Labels, predictions or dataset items violate their contract."""


class DegenerateBatchError(DataError):
    """Batch statistics cannot be computed (fewer than two values per channel)."""


class ConfigError(ExudetError, ValueError):
    """Invalid configuration value (rates, fractions, recipe parameters)."""


class FormatError(ExudetError, ValueError):
    """Malformed file: bad header, truncated stream, or CSV that does not parse."""


class StateError(ExudetError, RuntimeError):
    """Operation called in the wrong order, e.g. backward without a forward."""


class TrainingError(ExudetError, RuntimeError):
    """Training aborted; carries the epoch, batch and loss that triggered it."""

    def __init__(self, epoch: int, batch: int, loss: float):
        self.epoch = epoch
        self.batch = batch
        self.loss = loss
        super().__init__(
            f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}"
        )
