class CSRNetError(Exception):
    pass


class CorruptFileError(CSRNetError, ValueError):
    """A binary file has the wrong magic/version or is truncated."""


class WeightShapeError(CSRNetError, ValueError):
    """Stored weights do not fit the requested network config."""


class ParseError(CSRNetError, ValueError):
    """A text input (annotations, manifest) is malformed."""


class DivergenceError(CSRNetError, FloatingPointError):
    """Training produced a non-finite loss or gradient."""
