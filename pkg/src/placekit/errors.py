"""Exception types shared across the package."""


class PlacekitError(Exception):
    """Base class for all package errors."""


class ValidationError(PlacekitError):
    """Input violates a documented invariant or precondition."""


class ParseError(PlacekitError):
    """Malformed file or prompt text.

    ``offset`` is a byte offset into the source when one is known, else None.
    """

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


class AnchorNotFoundError(PlacekitError, KeyError):
    """A constraint references an anchor class absent from the scene."""


class GenerationError(PlacekitError):
    """Procedural generation could not satisfy its spec (e.g. furniture overflow)."""


class SamplingError(PlacekitError):
    """Constraint sampling cannot satisfy the requested configuration."""


class NoSolutionError(PlacekitError):
    """The baseline solver found no placement surviving exact verification."""
