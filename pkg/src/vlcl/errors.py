"""Shared exception types.

The CLI maps these onto process exit codes: configuration problems exit 2,
data problems exit 3, numerical divergence exits 4.
"""


class ShapeMismatch(ValueError):
    """An op received arrays whose shapes do not conform."""


class ContractViolation(RuntimeError):
    """An API precondition was broken (e.g. backward from a non-scalar)."""


class StateError(RuntimeError):
    """An object was driven through an illegal state transition."""


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


class DataFormatError(ValueError):
    """A data file is malformed or violates the benchmark contract."""


class IntegrityError(RuntimeError):
    """A checkpoint failed its checksum or container framing check."""


class VersionMismatch(RuntimeError):
    """A checkpoint was written by an incompatible format version."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
