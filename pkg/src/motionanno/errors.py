"""Exception hierarchy shared by every stage."""

from __future__ import annotations


class MotionAnnoError(Exception):
    """Base class for all errors raised by this package."""


class StructuralError(MotionAnnoError, ValueError):
    """Array shapes or counts do not match the skeleton/keypoint layout."""


class ValidationError(MotionAnnoError, ValueError):
    """A value is outside its allowed range (non-finite, out of bounds, ill-posed)."""


class DegenerateGeometryError(MotionAnnoError, ValueError):
    """Geometry is too close to singular to produce a stable answer."""


class UnderdeterminedError(MotionAnnoError, ValueError):
    """Not enough usable observations."""


class ProjectionError(MotionAnnoError, ValueError):
    """Point lies behind (or on) the image plane of a camera."""


class FitDivergenceError(MotionAnnoError, FloatingPointError):
    """A loss term or its gradient became non-finite during optimization."""

    def __init__(self, term: str, frame: int | None, message: str = ""):
        self.term = term
        self.frame = frame
        where = f"frame {frame}" if frame is not None else "unknown frame"
        super().__init__(message or f"non-finite value in loss term '{term}' at {where}")


class ConfigError(MotionAnnoError, ValueError):
    """Pipeline configuration is invalid; raised before any work is done."""


class InputSchemaError(MotionAnnoError, ValueError):
    """Base for interchange-file parse failures. Carries the file location."""

    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        loc = ""
        if path is not None:
            loc = str(path)
        if line is not None:
            loc = f"{loc}:{line}" if loc else f"line {line}"
        super().__init__(f"{loc}: {message}" if loc else message)


class MalformedLineError(InputSchemaError):
    """Line is not a JSON object."""


class MissingFieldError(InputSchemaError):
    pass


class UnknownFieldError(InputSchemaError):
    pass


class KeypointCountError(InputSchemaError):
    """Wrong number of keypoints (the layout expects 133)."""


class CoordinateError(InputSchemaError):
    """Point coordinates have the wrong arity or are not finite numbers."""


class ScoreRangeError(InputSchemaError):
    """Confidence score outside [0, 1]."""


class FieldTypeError(InputSchemaError):
    """A field has the wrong JSON type."""
