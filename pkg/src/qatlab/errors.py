"""Exception taxonomy shared across the package.

The CLI maps these onto process exit codes: config problems exit 1, data
problems exit 2, divergence exits 3. Everything else is a bug and escapes
as a traceback.
"""


class QatlabError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(QatlabError):
    """Invalid configuration: bad hyperparameter, unknown key, bad model spec."""


class InputError(QatlabError):
    """A caller violated an operation precondition (bad shape, range, empty input)."""


class DataError(QatlabError):
    """A dataset file is malformed or internally inconsistent."""


class StateError(QatlabError):
    """An operation was invoked in a state-machine phase that forbids it."""


class DivergenceError(QatlabError):
    """Training produced a non-finite loss; the run is aborted."""


class InternalError(QatlabError):
    """An internal consistency check failed; indicates a bug, not user error."""
