"""Exception types raised across the package."""


class WatermarkSimError(Exception):
    """Base class for all errors raised by wmobserve."""


class InvalidSpec(WatermarkSimError, ValueError):
    pass


class InvalidLength(WatermarkSimError, ValueError):
    pass


class WrongScheme(WatermarkSimError, ValueError):
    pass


class TooShort(WatermarkSimError, ValueError):
    pass


class DegenerateDist(WatermarkSimError, ValueError):
    pass


class EmptyMessage(WatermarkSimError, ValueError):
    pass


class InvalidCount(WatermarkSimError, ValueError):
    pass


class NoKeys(WatermarkSimError, ValueError):
    pass


class InsufficientNulls(WatermarkSimError, ValueError):
    pass


class SizeMismatch(WatermarkSimError, ValueError):
    pass


class EmptyTestSet(WatermarkSimError, ValueError):
    pass


class EmptyOutput(WatermarkSimError, ValueError):
    pass


class MissingClass(WatermarkSimError, ValueError):
    pass


class NonFiniteLoss(WatermarkSimError, ArithmeticError):
    pass


class BadK(WatermarkSimError, ValueError):
    pass


class InsufficientPool(WatermarkSimError, ValueError):
    pass


class PoolTooSmall(WatermarkSimError, ValueError):
    pass


class BadAxis(WatermarkSimError, ValueError):
    pass


class EmptyReport(WatermarkSimError, ValueError):
    pass


class MetricMissing(WatermarkSimError, KeyError):
    pass


class SchemaError(WatermarkSimError, ValueError):
    """Config validation failure; ``key`` names the offending field."""

    def __init__(self, key: str, message: str = ""):
        self.key = key
        super().__init__(f"{key}: {message}" if message else key)


class StageError(WatermarkSimError):
    """A harness stage failed; wraps the original exception."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"[{stage}] {type(cause).__name__}: {cause}")


class IoError(WatermarkSimError, OSError):
    pass
