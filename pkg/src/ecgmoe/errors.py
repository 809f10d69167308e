"""Exception hierarchy shared by every ecgmoe module."""


class EcgMoeError(Exception):
    """Base class for all library errors."""


class ZeroVarianceLead(EcgMoeError, ValueError):
    pass


class FormatError(EcgMoeError, ValueError):
    """Malformed binary file. ``offset`` is the byte position of the fault."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class VersionMismatch(FormatError):
    pass


class ConfigDigestMismatch(EcgMoeError, ValueError):
    pass


class TooShortSignal(EcgMoeError, ValueError):
    pass


class NoPeaksFound(EcgMoeError, RuntimeError):
    pass


class InsufficientPeaks(EcgMoeError, ValueError):
    pass


class ShapeMismatch(EcgMoeError, ValueError):
    pass


class InvalidHyper(EcgMoeError, ValueError):
    pass


class InvalidHeads(EcgMoeError, ValueError):
    pass


class UnknownTask(EcgMoeError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "unknown task"


class EmptyBatch(EcgMoeError, ValueError):
    pass


class DivergedLoss(EcgMoeError, FloatingPointError):
    pass


class ConfigError(EcgMoeError, ValueError):
    """Invalid run configuration; ``field`` and ``line`` locate the fault."""

    def __init__(self, message, field=None, line=None):
        where = []
        if field:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{' at '.join(where)}: {message}"
        super().__init__(message)
        self.field = field
        self.line = line
