"""Exception hierarchy for the bridge.

Everything raised on purpose derives from :class:`BridgeError`, so callers
can distinguish bridge failures from engine failures (which surface as
:class:`EngineCallError` with the engine's exit code attached).
"""


class BridgeError(Exception):
    """Base class for all bridge errors."""


class AnnotationError(BridgeError):
    """Region annotation file is malformed or geometrically invalid."""


class TensorFileError(BridgeError):
    """A tensor container file is truncated or not in the expected format."""


class EngineCallError(BridgeError):
    """The engine CLI exited with a nonzero status."""

    def __init__(self, message: str, returncode: int):
        super().__init__(message)
        self.returncode = returncode


class StitchError(BridgeError):
    """Cross-tile polygon merging produced an inconsistent boundary."""
