"""Exception hierarchy shared across the package."""


class SlicecastError(Exception):
    """Base class for all slicecast errors."""


class FormatError(SlicecastError):
    """File has an unsupported magic, dtype, or dimensionality."""


class IntegrityError(SlicecastError):
    """File payload is truncated or inconsistent with its header."""


class GridError(SlicecastError):
    """Two grids that must share dims do not."""


class LabelDictionaryError(SlicecastError):
    """An observed nonzero label is missing from the label-name map."""


class AnchorMissError(SlicecastError):
    """A video scheme was requested but an object is empty at the anchor slice."""

    def __init__(self, object_id, anchor_slice):
        self.object_id = object_id
        self.anchor_slice = anchor_slice
        super().__init__(
            f"object {object_id!r} has no foreground at anchor slice {anchor_slice}"
        )


class CodecError(SlicecastError):
    """RLE payload violates the codec invariants."""


class ProtocolError(SlicecastError):
    """Backend wire-protocol violation or backend-reported error."""

    def __init__(self, text, code=None):
        self.code = code
        super().__init__(text if code is None else f"[{code}] {text}")


class TransportError(SlicecastError):
    """Connection-level failure: disconnect, EOF, timeout."""


class PartialResultError(SlicecastError):
    """A streaming run died mid-way; carries what was completed."""

    def __init__(self, message, completed=None):
        self.completed = completed if completed is not None else []
        super().__init__(message)


class EvaluationError(SlicecastError):
    """Prediction references an object unknown to the ground truth."""


class AggregationError(SlicecastError):
    """Aggregation over an empty record set."""
