"""Typed errors shared across the package."""


class ShapeError(ValueError):
    """An array argument violates a documented shape/size contract."""


class FormatError(ValueError):
    """A file does not match its declared on-disk format (bad magic, wrong bit depth, ...)."""


class TruncatedFileError(OSError):
    """A file ended before its declared payload was read."""


class ConfigError(ValueError):
    """Invalid or unknown configuration key/value."""


class CheckpointError(RuntimeError):
    """Checkpoint cannot be loaded into the requested architecture."""


class StabilityError(RuntimeError):
    """Training produced a non-finite value or runaway activations.

    Carries the name of the offending term so crashes are attributable.
    """

    def __init__(self, term: str, step: int | None = None, detail: str = ""):
        self.term = term
        self.step = step
        msg = f"training stability fault in '{term}'"
        if step is not None:
            msg += f" at step {step}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)
