"""Exception hierarchy shared by every camds module."""

from typing import Optional


class CamdsError(Exception):
    """Base class for all errors raised by camds."""


class ConfigurationError(CamdsError, ValueError):
    """Invalid configuration value or inconsistent configuration."""


class UsageError(CamdsError):
    """Command-line usage problem detected after argument parsing."""


class ShapeError(CamdsError, ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class GradientError(CamdsError, RuntimeError):
    """Reverse-mode differentiation was requested on an invalid graph."""


class NormalizationStateError(CamdsError, RuntimeError):
    """Batch normalization used in eval mode before running stats exist."""


class ParseError(CamdsError, ValueError):
    """Malformed input file. Carries the line (text) or byte offset (binary)."""

    def __init__(
        self, message: str, *, line: Optional[int] = None, offset: Optional[int] = None
    ) -> None:
        location = ""
        if line is not None:
            location = f" (line {line})"
        elif offset is not None:
            location = f" (offset {offset})"
        super().__init__(f"{message}{location}")
        self.line = line
        self.offset = offset


class ManifestError(ParseError):
    """Frame manifest, fold file or prediction CSV could not be parsed."""


class ImageFormatError(ParseError):
    """PPM/PGM header or raster is malformed."""


class CheckpointFormatError(ParseError):
    """Checkpoint file is corrupt or truncated."""


class CheckpointVersionError(CamdsError):
    """Checkpoint was written by an incompatible format version."""


class DatasetError(CamdsError, ValueError):
    """Dataset content violates an invariant (empty split, label conflict...)."""


class EmptyClipError(DatasetError):
    """A patient clip has no frames left to aggregate."""


class UndefinedMetricError(CamdsError, ValueError):
    """A metric cannot be computed for the given input (e.g. single-class AUC)."""


class AgreementError(CamdsError, ValueError):
    """Rating matrix cannot yield an agreement coefficient."""


class TrainingDivergedError(CamdsError, RuntimeError):
    """Training produced a non-finite loss."""


class LabelError(CamdsError, ValueError):
    """Class label outside the model's label range."""
