"""Exceptions and warnings raised by the attitude solvers."""


class CwlsError(Exception):
    """Base class for all package errors."""


class DegenerateGeometry(CwlsError):
    """Satellite geometry cannot support a 3-D solution."""


class CollinearAxes(CwlsError):
    """Two circle axes are (anti)parallel; the pair carries no intersection."""


class EmptyCandidatePool(CwlsError):
    """No circle intersections or near-misses were found for a baseline."""


class EmptyAfterFilter(CwlsError):
    """No candidate tuple satisfies the inter-baseline angle constraint."""


class SingularGram(CwlsError):
    """The body-frame baseline Gram matrix X_b X_b^T is singular."""


class BoxTooLarge(CwlsError):
    """Integer enumeration box exceeds the brute-force budget."""


class EpochFormatError(CwlsError):
    """Malformed epoch file; ``lineno`` points at the offending line."""

    def __init__(self, message, lineno=None):
        self.lineno = lineno
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)


class RankDeficientWarning(UserWarning):
    """Nearest-rotation problem has no unique solution."""
