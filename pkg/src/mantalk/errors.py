"""Exception types shared across the package.

Everything derives from :class:`MantalkError` so callers (the CLI in
particular) can map domain failures to exit codes in one place.
"""


class MantalkError(Exception):
    """Base class for all domain errors."""


class MissingInput(MantalkError):
    """A required file or directory does not exist (CLI exit code 2)."""


class NonDivisibleRate(MantalkError, ValueError):
    pass


class EmptyWindow(MantalkError, ValueError):
    pass


class InvalidRange(MantalkError, ValueError):
    pass


class BadAudio(MantalkError, ValueError):
    pass


class ShapeMismatch(MantalkError, ValueError):
    pass


class MissingSource(MantalkError, KeyError):
    pass


class EvenKernel(MantalkError, ValueError):
    pass


class UnknownScene(MantalkError, ValueError):
    pass


class OddHeight(MantalkError, ValueError):
    pass


class StructureMismatch(MantalkError, ValueError):
    pass


class ExtractorMissing(MantalkError, ValueError):
    pass


class EmbedderMissing(MantalkError, ValueError):
    pass


class LengthMismatch(MantalkError, ValueError):
    pass


class DegenerateEye(MantalkError, ValueError):
    pass


class DurationMismatch(MantalkError, ValueError):
    pass


class IndexOutOfRange(MantalkError, IndexError):
    pass


class VersionMismatch(MantalkError):
    pass


class CorruptFile(MantalkError):
    pass


class CheckpointMissing(MissingInput):
    pass


class MissingReport(MissingInput):
    pass


class ConfigError(MantalkError, ValueError):
    pass
