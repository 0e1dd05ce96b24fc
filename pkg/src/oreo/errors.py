"""Exception hierarchy shared by every module.

Each class carries a short ``code`` used by the CLI to print a
machine-parsable error line.
"""


class OreoError(Exception):
    code = "error"


class DomainError(OreoError, ValueError):
    """An action or token that is not legal in the given state."""

    code = "domain_error"


class ContractError(OreoError, ValueError):
    """A caller violated a precondition (terminal source, missing entry, ...)."""

    code = "contract_error"


class UnsupportedSupportError(OreoError, ValueError):
    """The reference policy assigns zero probability to a needed action."""

    code = "unsupported_support"


class ResourceError(OreoError, RuntimeError):
    """Enumeration exceeded its configured cap."""

    code = "resource_error"


class ConfigError(OreoError, ValueError):
    code = "config_error"


class TrainingError(OreoError, RuntimeError):
    code = "training_error"


class NumericalError(OreoError, FloatingPointError):
    code = "numerical_error"
