"""Exception types shared across the package."""


class ParameterError(ValueError):
    """An argument is outside its documented domain."""


class BoundsError(IndexError):
    """A region or point falls outside its host grid."""


class FormatError(ValueError):
    """A file does not follow the expected binary/text layout."""


class IntegrityError(RuntimeError):
    """A persisted bank or dataset is inconsistent with its manifest."""


class StateError(RuntimeError):
    """An operation was called out of order."""


class NumericError(FloatingPointError):
    """A non-finite value reached a place that requires finite numbers."""
