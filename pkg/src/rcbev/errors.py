"""Error taxonomy shared by every module.

The split mirrors how problems surface: bad static configuration, arrays
that do not line up, corrupted or non-finite payloads, malformed files,
violated caller contracts, and degenerate empty inputs.
"""


class RcbevError(Exception):
    """Base class for all package errors."""


class ConfigError(RcbevError, ValueError):
    """Invalid static configuration (non-positive dims, bad bounds, ...)."""


class ShapeError(RcbevError, ValueError):
    """Array dimensions do not agree."""


class DataError(RcbevError, ValueError):
    """Payload values violate data invariants (non-finite, out of range)."""


class FormatError(RcbevError, ValueError):
    """A file does not conform to its declared format."""


class ContractError(RcbevError, ValueError):
    """Caller violated an operation precondition (e.g. point outside ROI)."""


class EmptyInputError(RcbevError, ValueError):
    """Operation requires at least one element."""


class WeightLookupError(RcbevError, KeyError):
    """Requested tensor name is absent from the weight set."""


class PipelineError(RcbevError, RuntimeError):
    """Wraps a failure with the pipeline stage it occurred in."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause
