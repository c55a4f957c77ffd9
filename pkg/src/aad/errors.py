"""
Exception hierarchy for aad.
Each family maps onto one CLI exit code (see main.py).
"""

from typing import Optional


class AadError(Exception):
    """Base class for all aad errors."""
    exit_code = 1


class ConfigError(AadError):
    """Invalid configuration file or value."""
    exit_code = 1


class DataError(AadError):
    """Input data that cannot be processed."""
    exit_code = 2


class TrainingError(AadError):
    """A training procedure failed to produce a usable model."""
    exit_code = 3


# ingest
class MissingInput(DataError):
    pass


class MissingChannel(DataError):
    pass


class MalformedHeader(DataError):
    pass


class NonMonotonicData(DataError):
    pass


class InvalidSpan(DataError):
    pass


class OverlapConflict(DataError):
    pass


# preprocess
class CutoffAboveNyquist(DataError):
    pass


class NoBeatsDetected(DataError):
    pass


class InsufficientOverlap(DataError):
    pass


# features
class NoCompleteWindow(DataError):
    pass


class AllColumnsInvalid(DataError):
    pass


class SessionMismatch(DataError):
    pass


# vae / ensemble
class ShapeMismatch(DataError):
    pass


class ColumnMismatch(DataError):
    pass


class EmptyNode(DataError):
    pass


class VersionMismatch(DataError):
    pass


class CorruptModel(DataError):
    pass


class NonFiniteLoss(TrainingError):
    """Training diverged."""

    def __init__(self, epoch: int, message: Optional[str] = None):
        self.epoch = epoch
        super().__init__(message or f"Non-finite VAE loss at epoch {epoch}")


# selftrain / evaluation
class MissingClass(DataError):
    pass


class ClassTooSmall(DataError):
    pass


class UndefinedClassRate(DataError):
    pass


class SingleClassScores(DataError):
    pass


# synth
class OverlappingEpisodes(DataError):
    pass


class InfeasibleTargets(DataError):
    pass
