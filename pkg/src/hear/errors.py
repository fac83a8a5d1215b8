"""Exception hierarchy; each class carries the CLI exit code it maps to."""


class HearError(Exception):
    exit_code = 1


class ConfigError(HearError, ValueError):
    """Invalid configuration or command usage."""

    exit_code = 1


class DataError(HearError):
    """Unreadable audio, bad manifest, or missing corpus."""

    exit_code = 2


class NumericError(HearError, FloatingPointError):
    """Non-finite losses, gradients or activations."""

    exit_code = 3


class FrozenContractError(NumericError):
    """A parameter that must stay frozen received a gradient."""
