"""Exception hierarchy shared by all splat4d modules."""


class Splat4DError(Exception):
    """Base class for every error raised by this package."""


class InvalidRotorError(Splat4DError, ValueError):
    pass


class InvalidRotationError(Splat4DError, ValueError):
    pass


class DegenerateTimeError(Splat4DError, ValueError):
    """Temporal variance too small to condition on."""


class ParameterError(Splat4DError, ValueError):
    pass


class ShapeError(Splat4DError, ValueError):
    pass


class AlignmentError(Splat4DError, ValueError):
    pass


class IncompatibleMaskError(Splat4DError, ValueError):
    """Mask set was built for a scene with a different Gaussian count."""


class FormatError(Splat4DError, ValueError):
    """Malformed binary or text input.

    Parameters
    ----------
    message : str
        Human readable description.
    offset : int, optional
        Byte offset (binary formats) or line number (text formats) where
        parsing failed.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset
