"""Exception types shared across the package."""


class TightboxError(Exception):
    """Base class for all package-specific errors."""


class DegenerateBoxError(TightboxError, ValueError):
    """A box lost its strictly-positive width or height."""


class InsufficientDataError(TightboxError, ValueError):
    """Not enough samples to fit the requested statistics."""


class LabelParseError(TightboxError, ValueError):
    """A label file line could not be parsed; message names the line."""


class UnsupportedBackboneError(TightboxError, ValueError):
    """Requested feature extractor kind is not known."""


class ShapeMismatchError(TightboxError, ValueError):
    """Tensor shapes do not match the operation's contract."""


class EmptyDatasetError(TightboxError, ValueError):
    """An operation that needs at least one instance got none."""


class MissingPrelabelsError(TightboxError, ValueError):
    """Pre-label scenario requested but instances carry no pre-label boxes."""


class MissingFrameError(TightboxError, KeyError):
    """A track frame has no image available."""


class SizeMismatchError(TightboxError, ValueError):
    """Model input size does not match the configured patch size."""
