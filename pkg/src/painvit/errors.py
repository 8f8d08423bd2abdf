"""Exception hierarchy shared across the package.

Every category maps to a CLI exit code (see ``painvit.cli``), so raising the
right class is part of the public contract, not just style.
"""


class PainVitError(Exception):
    """Base class for all package-specific failures."""


class DimensionError(PainVitError):
    """Tensor shapes are incompatible for the requested operation."""


class ConfigurationError(PainVitError):
    """A hyperparameter or structural setting is invalid."""


class DataError(PainVitError):
    """Input data violates a documented precondition."""


class StateError(PainVitError):
    """An operation was called before required state was populated."""


class ContractError(PainVitError):
    """An API was called in a way its contract forbids."""
