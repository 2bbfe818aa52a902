"""Exception types raised across the package."""


class MsannError(Exception):
    """Base class for all package errors."""


class DimensionError(MsannError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MsannError, ValueError):
    """A call violated an operation's precondition."""


class UninitializedStatisticsError(MsannError, RuntimeError):
    """Batch-norm evaluated before any running-statistic update."""


class FusionShapeError(DimensionError):
    """A fusion block produced a map that cannot be summed with its scale."""

    def __init__(self, scale, expected, got):
        self.scale = scale
        super().__init__(
            f"fusion at scale {scale}: F_l output {tuple(got)} does not match M_l {tuple(expected)}"
        )


class ConfigError(MsannError, ValueError):
    """Invalid configuration."""


class VocabularyError(MsannError, ValueError):
    """Tag vector does not match the vocabulary."""


class DomainError(MsannError, ValueError):
    """Argument outside the mathematical domain of the operation."""


class LineageError(MsannError, RuntimeError):
    """A training stage was requested before its prerequisites finished."""


class NumericalError(MsannError, ArithmeticError):
    """Non-finite values encountered during optimization."""


class DataError(MsannError, IOError):
    """Dataset or checkpoint files are missing, corrupt or inconsistent."""
