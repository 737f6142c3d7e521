"""Exception types shared across the toolkit."""


class ParacapError(Exception):
    """Base class for all toolkit errors."""


class SchemaError(ParacapError):
    """Input file violates a declared schema or invariant.

    Raised for malformed dataset/caption/embedding/model files and for
    records failing validation. The CLI maps this to exit code 1.
    """


class PixelFormatError(ParacapError):
    """Malformed or unsupported image file (only binary P6, maxval 255)."""
