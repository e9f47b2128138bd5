"""Shared error types. CLI exit codes map onto these (see cli.main)."""


class ConfigError(ValueError):
    """A run configuration is invalid (unknown key, bad value, missing input)."""


class CheckpointError(RuntimeError):
    """A checkpoint file is corrupt or incompatible with the requested config."""


class FrozenModelError(RuntimeError):
    """A freeze contract was violated (unfrozen model in a loss path, or
    a frozen model whose checksum drifted during training)."""


class TrainingDivergedError(RuntimeError):
    """A training loss became non-finite.  Carries the failing step and, when
    available, the path of the last good checkpoint."""

    def __init__(self, message: str, step: int, last_checkpoint: str | None = None):
        super().__init__(message)
        self.step = step
        self.last_checkpoint = last_checkpoint
