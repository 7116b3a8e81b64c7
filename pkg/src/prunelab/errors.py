"""Exception hierarchy shared by every prunelab module."""


class PrunelabError(Exception):
    """Base class for all library errors."""


class ShapeError(PrunelabError, ValueError):
    """Operand shapes are incompatible for an operation."""


class ContractError(PrunelabError, ValueError):
    """A documented precondition was violated by the caller."""


class ConfigError(PrunelabError, ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(PrunelabError, ValueError):
    """A serialized artifact (log, checkpoint, table) is malformed."""


class DivergenceError(PrunelabError, RuntimeError):
    """Training produced a non-finite loss."""


class BenchError(PrunelabError, RuntimeError):
    """A benchmark could not produce a trustworthy timing."""
