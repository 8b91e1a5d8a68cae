"""Exception hierarchy shared by every binsight module."""


class BinsightError(Exception):
    """Base class for all errors raised by binsight."""


class EmptyFileError(BinsightError, ValueError):
    pass


class GeometryMismatch(BinsightError, ValueError):
    pass


class ShapeMismatch(BinsightError, ValueError):
    pass


class HeadCountMismatch(BinsightError, ValueError):
    pass


class DimensionMismatch(BinsightError, ValueError):
    pass


class SingleClassInput(BinsightError, ValueError):
    pass


class NoConvLayer(BinsightError, ValueError):
    pass


class TooFewSamples(BinsightError, ValueError):
    pass


class DivergenceDetected(BinsightError, RuntimeError):
    """Training loss became NaN or infinite."""

    def __init__(self, epoch, losses):
        super().__init__(f"loss diverged at epoch {epoch}: {losses[-1] if losses else 'n/a'}")
        self.epoch = epoch
        self.losses = list(losses)


class ManifestError(BinsightError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class FormatVersionError(BinsightError, ValueError):
    """A serialized document carries an unknown ``format_version``."""
