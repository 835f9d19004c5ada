"""Exception types shared across the package.

The CLI maps each category to a distinct exit code; library callers can
catch :class:`ArascriptError` to handle everything at once.
"""


class ArascriptError(Exception):
    """Base class for all package errors."""


class ConfigError(ArascriptError):
    """Invalid or inconsistent configuration (bad value, unknown key)."""


class DataFormatError(ArascriptError):
    """Malformed corpus, table, or model file."""


class UnknownScriptError(ArascriptError):
    """Input contains no Arabic-script codepoints, so no language applies."""


class RoutingError(ArascriptError):
    """A language has no configured classifier head."""


class ShapeError(ArascriptError):
    """Tensor operands have incompatible shapes."""

    def __init__(self, op: str, *shapes: tuple) -> None:
        super().__init__(f"{op}: incompatible shapes {' vs '.join(str(s) for s in shapes)}")
        self.op = op
        self.shapes = shapes


class NumericError(ArascriptError):
    """A non-finite value appeared where finite math was required."""


class CheckpointError(ArascriptError):
    """Missing or inconsistent checkpoint directory."""


class TokenizerError(ArascriptError):
    """Invalid tokenizer operation (id out of range, empty corpus, ...)."""
