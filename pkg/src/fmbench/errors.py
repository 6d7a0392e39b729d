"""Exception hierarchy for the harness.

Every failure mode surfaced to callers maps to one of these classes so that
CLI commands and tests can match on behaviour rather than message text.
"""


class HarnessError(Exception):
    """Base class for all fmbench errors."""


class FormatError(HarnessError):
    """A file does not conform to its declared format (bad magic, field, length)."""


class DataError(HarnessError):
    """Payload values violate a data invariant (non-finite samples, bad dtype)."""


class ShapeError(HarnessError):
    """Array dimensions do not match what the operation requires."""


class EmptyMaskError(HarnessError):
    """A label is absent from a mask where at least one pixel is required."""


class EmptyRegionError(HarnessError):
    """A pooling region is empty."""


class LabelError(HarnessError):
    """Degenerate label configuration (e.g. single-class training set)."""


class NoEventError(HarnessError):
    """A survival computation needs at least one observed event."""


class NoComparablePairsError(HarnessError):
    """Concordance is undefined: no comparable pairs exist."""


class DegenerateError(HarnessError):
    """Degenerate statistical configuration (zero variance, empty group, constant risks)."""


class InsufficientOverlapError(HarnessError):
    """Rigid alignment left fewer overlapping slices than required."""


class DivergenceError(HarnessError):
    """An optimization produced a non-finite loss."""

    def __init__(self, message: str, iteration: int):
        super().__init__(message)
        self.iteration = iteration


class CoverageError(HarnessError):
    """A feature dump does not cover every manifest sample."""

    def __init__(self, message: str, missing_ids: list):
        super().__init__(message)
        self.missing_ids = missing_ids


class SupportError(HarnessError):
    """A class has fewer training items than a few-shot protocol requires."""


class RestrictionError(HarnessError):
    """A cross-modality manifest contains labels outside the shared class set."""


class LeakageError(HarnessError):
    """A group_id spans more than one split."""


class AlignmentError(HarnessError):
    """Two run sets do not share an identical sample_id set."""


class ClassError(HarnessError):
    """A binary metric received labels from a single class."""


class ProtocolError(HarnessError):
    """A plugin (segmenter/encoder subprocess) violated its wire contract."""
