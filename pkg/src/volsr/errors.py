"""Exception types shared across the package.

The CLI maps these onto exit codes: validation problems (bad inputs, bad
files, mismatched shapes) exit with 2, numeric failures during training
exit with 3.
"""


class VolsrError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(VolsrError):
    """Invalid user input: bad shapes, out-of-range values, bad config keys."""


class ParseError(ValidationError):
    """A file could not be decoded: bad magic, bad version, truncation."""


class GenerationError(ValidationError):
    """Phantom geometry produced an unusable volume (e.g. an empty class)."""


class CheckpointMismatchError(ValidationError):
    """Checkpoint refused because its spec or config hash does not match."""


class NumericError(VolsrError):
    """Training diverged (NaN/Inf loss); carries the last good checkpoint path."""

    def __init__(self, message, last_checkpoint=None):
        super().__init__(message)
        self.last_checkpoint = last_checkpoint
