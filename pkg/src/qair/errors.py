"""Exception hierarchy shared across the package."""


class QairError(Exception):
    """Base class for all package errors."""


class ParameterError(QairError, ValueError):
    """A generator or operation received an out-of-range parameter."""


class ConfigError(QairError, ValueError):
    """Invalid configuration (unknown key, bad enum value, empty list...)."""


class ContractError(QairError, ValueError):
    """Input violates a shape or precondition contract."""


class NumericDomainError(QairError, ArithmeticError):
    """Value outside the mathematical domain of the operation (e.g. zero vector)."""


class DependencyError(QairError, RuntimeError):
    """An external dependency (pretrained weights, optional package) is missing."""


class TrainingError(QairError, RuntimeError):
    """Training diverged or produced non-finite values."""


class PipelineOrderError(QairError, RuntimeError):
    """A pipeline stage was invoked before its prerequisites were produced."""


class FrozenError(QairError, RuntimeError):
    """Attempt to mutate a frozen prompt set."""
