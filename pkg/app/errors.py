"""
Exception hierarchy shared by the library and the CLI.
"""


class ScdError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(ScdError, ValueError):
    """Tensor dimensions or layer geometry do not fit together."""


class GraphError(ScdError):
    """Misuse of the recorded operation graph or of gradient buffers."""


class ConfigError(ScdError, ValueError):
    """Configuration that parses but cannot be used."""
