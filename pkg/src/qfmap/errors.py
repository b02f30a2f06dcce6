"""Exception hierarchy shared by every module in the package."""


class QFMapError(Exception):
    """Base class for all package errors."""


class CapacityError(QFMapError, ValueError):
    """A size limit (qubits, enumeration count, image width) was exceeded."""


class DimensionError(QFMapError, ValueError):
    """Array shapes or qubit counts do not agree."""


class BindingError(QFMapError, ValueError):
    """A circuit slot has no value to bind to."""


class StrategyError(QFMapError, ValueError):
    """Feature-encoding strategy incompatible with the feature/qubit counts."""


class ParseError(QFMapError, ValueError):
    """Malformed input file."""


class NumericError(QFMapError, ArithmeticError):
    """A numerical routine failed (singular system, NaN, zero norm)."""


class TrainingDivergenceError(NumericError):
    def __init__(self, epoch: int, message: str = "loss became NaN"):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch
