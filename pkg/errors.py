"""
Exception hierarchy for promptpan.
Each error class carries the process exit code the CLI reports for it.
"""


class PromptPanError(Exception):
    """Base class for every error raised on purpose by this package."""

    exit_code = 1


class ConfigError(PromptPanError):
    """Invalid configuration file, value or environment setting."""

    exit_code = 2


class ProtocolError(PromptPanError):
    """Incremental protocol violated (bad tiling, unknown step, class overlap)."""


class FormatError(PromptPanError):
    """Malformed annotation, image or cache file."""


class InputError(PromptPanError):
    """Tensor or array argument with the wrong shape or content."""


class StateError(PromptPanError):
    """Model state does not hold the requested step or head."""


class NumericalError(PromptPanError):
    """Non-finite values where finite ones are required."""


class CheckpointMismatchError(PromptPanError):
    """Checkpoint on disk does not belong to the requested configuration."""

    exit_code = 3
