"""Exception types shared across the toolkit."""


class ConfigError(ValueError):
    """Invalid configuration or input that cannot be processed."""


class InjectionError(ValueError):
    """Thinking tokens found in a stream that is about to be injected."""


class NonFiniteError(FloatingPointError):
    """A NaN or Inf showed up in parameters or gradients."""


class NoScorablePositions(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(IOError):
    pass


class MagicMismatch(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class TruncatedCheckpoint(CheckpointError):
    pass
