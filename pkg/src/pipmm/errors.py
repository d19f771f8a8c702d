"""
pipmm error hierarchy.

Every failure raised by the library derives from PipmmError, which carries a
message, a details dictionary and the process exit code the CLI should use.
"""

from typing import Any, Dict, Optional


class PipmmError(Exception):
    """Base pipmm error."""

    exit_code = 1

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        self.message = message
        self.details = details or {}
        super().__init__(message)

    @property
    def key_path(self) -> Optional[str]:
        return self.details.get('key')

    def to_line(self) -> str:
        """One-line machine-parsable rendering used by the CLI."""
        parts = [f"error code={self.exit_code}", f"type={type(self).__name__}"]
        for name in ('key', 'stage', 'step', 'parameter', 'offset'):
            if self.details.get(name) is not None:
                parts.append(f"{name}={self.details[name]}")
        message = ' '.join(self.message.split())
        parts.append(f"message={message}")
        return ' '.join(parts)


class ConfigError(PipmmError, ValueError):
    """Invalid configuration document or model configuration."""

    exit_code = 2

    def __init__(self, message: str, key: str = None, details: Dict = None):
        details = dict(details or {})
        if key is not None:
            details['key'] = key
        super().__init__(message, details)


class ShapeError(PipmmError, ValueError):
    """Operands with incompatible shapes."""

    def __init__(self, message: str, *shapes, details: Dict = None):
        details = dict(details or {})
        if shapes:
            details['shapes'] = [tuple(s) for s in shapes]
        super().__init__(message, details)


class ContractError(PipmmError, ValueError):
    """A precondition of an operation was violated."""
    pass


class NumericError(PipmmError, ArithmeticError):
    """NaN/Inf values or degenerate numerics."""

    def __init__(self, message: str, parameter: str = None, step: int = None,
                 details: Dict = None):
        details = dict(details or {})
        if parameter is not None:
            details['parameter'] = parameter
        if step is not None:
            details['step'] = step
        super().__init__(message, details)


class FormatError(PipmmError, ValueError):
    """Malformed checkpoint or dataset file."""

    def __init__(self, message: str, offset: int = None, details: Dict = None):
        details = dict(details or {})
        if offset is not None:
            details['offset'] = offset
        super().__init__(message, details)


class TokenizationError(PipmmError, ValueError):
    """Text contains a character outside the vocabulary alphabet."""

    def __init__(self, character: str, position: int = None):
        self.character = character
        super().__init__(
            f"character {character!r} is not in the vocabulary alphabet",
            {'character': character, 'position': position},
        )


class SequenceLengthError(PipmmError, ValueError):
    """Sequence longer than the model's max_seq_len."""
    pass


class PatchSizeError(PipmmError, ValueError):
    """Image dimensions are not divisible by the patch size."""
    pass


class GridError(PipmmError, ValueError):
    """Patch count is not a perfect square."""
    pass
