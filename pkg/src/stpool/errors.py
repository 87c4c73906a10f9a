"""Error hierarchy and the process exit codes the CLI maps it onto."""

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_IO = 2
EXIT_INTERNAL = 3


class StpoolError(Exception):
    """Base class for library errors. Anything else escaping is a bug."""

    exit_code = EXIT_INTERNAL


class ValidationError(StpoolError):
    """Input violates a documented contract (shape, range, finiteness)."""

    exit_code = EXIT_VALIDATION


class ShapeMismatchError(ValidationError):
    pass


class NonFiniteValueError(ValidationError):
    pass


class RegionIndexError(ValidationError):
    pass


class FrameRangeError(ValidationError):
    pass


class MissingFlowError(ValidationError):
    pass


class MissingRegionValueError(ValidationError):
    pass


class NoPresentFrameError(ValidationError):
    pass


class AllPixelsIgnoredError(ValidationError):
    pass


class SceneSpecError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class DataFormatError(StpoolError):
    """Unreadable or malformed on-disk data."""

    exit_code = EXIT_IO
