"""Exception types shared across the package.

Every error raised on a user-facing path derives from AdvrError so the
service layer can map them to HTTP 400 responses uniformly.
"""


class AdvrError(Exception):
    """Base class for all package errors."""


class GraphError(AdvrError):
    """Graph construction or evaluation failed (bad wiring, shapes, non-finite values)."""


class AudioFormatError(AdvrError):
    """WAV payload could not be read as 16-bit PCM mono."""


class SpectrogramFormatError(AdvrError):
    """Spectrogram file is malformed (magic, version, or size)."""


class CheckpointError(AdvrError):
    """Checkpoint file is malformed or does not match the expected model spec."""


class ProtocolError(AdvrError):
    """Dataset protocol or manifest line could not be parsed."""


class ConfigError(AdvrError):
    """Run configuration is malformed or contains unknown keys."""


class AttackError(AdvrError):
    """Attack preconditions violated (non-finite input or loss)."""


class TrainingError(AdvrError):
    """Training preconditions violated or optimization diverged."""


class HarnessError(AdvrError):
    """Experiment stage failed; the message names the stage and cause."""
