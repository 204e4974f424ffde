"""Exception hierarchy shared by every module."""


class IspForgeError(Exception):
    """Base class for all errors raised by ispforge."""


class ShapeError(IspForgeError, ValueError):
    """Tensor or graph shapes are inconsistent."""


class SchemaError(IspForgeError, ValueError):
    """A node, manifest, or config does not match its schema."""


class FormatError(IspForgeError, ValueError):
    """A file is not in the expected format or version."""


class ChecksumError(FormatError):
    """Stored weight data does not match its recorded checksum."""


class NotDifferentiableError(IspForgeError, TypeError):
    """backward() met a node kind without a gradient rule."""
