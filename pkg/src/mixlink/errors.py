"""Exception types shared across the package."""

from __future__ import annotations


class MixlinkError(Exception):
    """Base class for errors raised by this package."""


class ParseError(MixlinkError):
    """A data file could not be parsed; carries the offending line number."""

    def __init__(self, path: str, line: int, reason: str):
        super().__init__(f"{path}:{line}: {reason}")
        self.path = path
        self.line = line
        self.reason = reason


class SchemaError(MixlinkError):
    """A file parsed but its columns or dimensions do not match expectations."""


class IntegrityError(MixlinkError):
    """A reference (e.g. a pair endpoint) does not resolve within its dataset."""


class CapacityError(MixlinkError):
    """A sampling request exceeds what the data can supply."""


class RankError(MixlinkError):
    """Numerical rank of the data is below the requested projection width."""

    def __init__(self, requested: int, achieved: int):
        super().__init__(
            f"requested {requested} principal directions but data rank is {achieved}"
        )
        self.requested = requested
        self.achieved = achieved


class ClassCoverageError(MixlinkError):
    """A training set is missing one of the two classes."""


class DivergenceError(MixlinkError):
    """Training produced a non-finite loss; carries the last finite epoch."""

    def __init__(self, message: str, last_finite_epoch: int):
        super().__init__(f"{message} (last finite epoch: {last_finite_epoch})")
        self.last_finite_epoch = last_finite_epoch


class BandwidthError(MixlinkError):
    """Kernel bandwidth is degenerate (zero or negative)."""
