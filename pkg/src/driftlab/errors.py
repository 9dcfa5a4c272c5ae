"""Exception types shared across the package."""


class DriftlabError(Exception):
    """Base class for all package-specific errors."""


class TimeRangeError(DriftlabError):
    """Requested time lies outside the stored snapshot range."""


class FormatError(DriftlabError):
    """A binary or CSV file does not match its expected layout."""


class NumericalBlowupError(DriftlabError):
    """An integration or training run produced non-finite values."""


class DegenerateDensityError(DriftlabError):
    """A density field has vanishing or non-finite total mass."""


class UndefinedIndexError(DriftlabError):
    """A normalized skill metric is undefined for the given reference."""
