"""
Exception hierarchy for the anytime search package.
Every error derives from a builtin exception so callers can catch either.
"""


class ShapeError(ValueError):
    """Tensor dimensions do not agree."""


class ArgumentError(ValueError):
    """A scalar argument is outside its valid range."""


class TapeStateError(RuntimeError):
    """The gradient tape was used in an invalid state."""


class GenotypeError(ValueError):
    """A genotype violates its structural invariants."""


class SchemaVersionError(GenotypeError):
    """A persisted artifact carries an unsupported schema version."""

    def __init__(self, kind: str, found, supported):
        self.kind = kind
        self.found = found
        self.supported = supported
        super().__init__(
            f"{kind} schema version {found!r} is not supported (expected {supported}); "
            f"re-export the {kind} with this version of anytime_search"
        )


class DataFormatError(ValueError):
    """A dataset archive is malformed."""


class ConfigError(ValueError):
    """A configuration key or value is invalid."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


class NonFiniteLossError(FloatingPointError):
    """The training loss became NaN or infinite."""

    def __init__(self, exit_index: int, value: float, phase: str = "train"):
        self.exit_index = exit_index
        self.value = value
        self.phase = phase
        super().__init__(f"non-finite {phase} loss {value} at exit {exit_index}")


class CheckpointError(RuntimeError):
    """A checkpoint is corrupt or incompatible with the requested run."""


class ManifestError(RuntimeError):
    """An output directory already holds a completed run."""
