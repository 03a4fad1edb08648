"""Exception hierarchy.

Every error carries a ``module`` tag (``raster``, ``geometry``, ...) that the
command line front end uses as a prefix in its machine-readable error line.
"""

from __future__ import annotations


class PlumepipeError(Exception):
    module = "plumepipe"

    def __init__(self, message: str = "", *, module: str | None = None) -> None:
        super().__init__(message)
        if module is not None:
            self.module = module

    @property
    def code(self) -> str:
        return f"{self.module}.{type(self).__name__}"


class ShapeMismatch(PlumepipeError, ValueError):
    pass


class FormatError(PlumepipeError, ValueError):
    module = "io"


# raster-core
class EmptySelection(PlumepipeError, ValueError):
    module = "raster"


class CountMismatch(PlumepipeError, ValueError):
    module = "raster"

    def __init__(self, expected: int, actual: int) -> None:
        super().__init__(f"expected {expected} bands, selection yields {actual}")
        self.expected = expected
        self.actual = actual


class NoValidPixels(PlumepipeError, ValueError):
    module = "raster"


class WavelengthMismatch(PlumepipeError, ValueError):
    module = "raster"


class BandCountMismatch(PlumepipeError, ValueError):
    module = "raster"


# geometry
class OutOfRangeEntry(PlumepipeError, ValueError):
    module = "geometry"


class NoSeedPixels(PlumepipeError, ValueError):
    module = "geometry"


# dataset
class BadStride(PlumepipeError, ValueError):
    module = "dataset"


class OffsetTooLarge(PlumepipeError, ValueError):
    module = "dataset"


class TooFewImages(PlumepipeError, ValueError):
    module = "dataset"


# matched filter
class SingularCovariance(PlumepipeError, ArithmeticError):
    module = "mf"


class TooFewPixels(PlumepipeError, ValueError):
    module = "mf"


# eval
class LengthMismatch(PlumepipeError, ValueError):
    module = "eval"


class DivisionByZero(PlumepipeError, ZeroDivisionError):
    module = "eval"


# synth
class DistortionOutOfRange(PlumepipeError, ValueError):
    module = "synth"


class InvalidCovariance(PlumepipeError, ValueError):
    module = "synth"


# cli
class ConfigError(PlumepipeError, ValueError):
    module = "cli"


class IoError(PlumepipeError, OSError):
    module = "cli"
