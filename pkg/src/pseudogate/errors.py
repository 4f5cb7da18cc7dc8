"""Exception hierarchy shared by every stage."""

from __future__ import annotations


class PseudoError(Exception):
    """Base class for all errors raised by this package."""

    stage: str | None = None


class ConfigError(PseudoError):
    pass


class ParseError(PseudoError):
    """Raised when tagged model output cannot be parsed (unbalanced tags)."""

    stage = "detection"


class AlignError(PseudoError):
    """Raised when tag-replace output cannot be aligned to the source text."""

    stage = "detection"


class UpstreamError(PseudoError):
    """A chat or completion endpoint failed.

    ``status`` is the last HTTP status seen, or ``None`` for transport failures.
    """

    def __init__(self, message: str, status: int | None = None, attempts: int = 1) -> None:
        super().__init__(message)
        self.status = status
        self.attempts = attempts


class UpstreamTimeout(UpstreamError):
    pass


class DetectionError(PseudoError):
    stage = "detection"


class DetectionUpstreamError(DetectionError):
    pass


class MalformedDetectionError(DetectionError):
    pass


class GenerationError(PseudoError):
    stage = "generation"


class PoolExhaustedError(GenerationError):
    pass


class InvalidCandidateError(GenerationError):
    pass


class GenerationUpstreamError(GenerationError):
    pass


class ReplacementError(PseudoError):
    stage = "replacement"


class ReplacementUpstreamError(ReplacementError):
    pass


class EchoDivergedError(ReplacementError):
    pass


class BudgetExceededError(ReplacementError):
    pass


class MetricError(PseudoError):
    stage = "metrics"


class EmptyGoldError(MetricError):
    pass


class EmptyInputError(MetricError):
    pass


class TooShortError(MetricError):
    pass


class LengthMismatchError(MetricError):
    pass


class SessionNotFound(PseudoError, KeyError):
    pass


class SessionConflict(PseudoError):
    pass


class MockExhausted(AssertionError):
    """A scripted test double ran out of steps or saw an unexpected request.

    Subclasses ``AssertionError`` so that pytest reports it as a test failure
    rather than letting production code swallow it as an upstream error.
    """
