"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: NumericsError and GradCheckError exit
with 2, every other ModaError with 1.
"""


class ModaError(Exception):
    pass


class ShapeError(ModaError):
    """Tensor dimensions violate an operation's contract."""


class ConfigError(ModaError):
    """Invalid or inconsistent configuration."""


class InputError(ModaError):
    """Malformed runtime input (bad token ids, oversized sequences, ...)."""


class TapeError(ModaError):
    """Autodiff misuse: non-scalar loss, backward through a consumed tape."""


class NumericsError(ModaError):
    """An operation produced NaN/Inf; raised at the op, never propagated."""


class CheckpointError(ModaError):
    """Corrupt checkpoint bytes or a config-hash mismatch."""


class GradCheckError(ModaError):
    """Finite-difference verification failed."""
