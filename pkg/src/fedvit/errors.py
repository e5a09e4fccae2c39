"""
fedvit.errors

Base exception types shared across the package. Module specific errors live
next to the code that raises them and derive from FedVitError.
"""
from typing import Sequence, Tuple


class FedVitError(Exception):
    """Base class for every error raised by fedvit."""

    def __init__(self, message: str):
        """
        :param message: str Error message
        """
        super().__init__(message)
        self.message = message


class ShapeError(FedVitError, ValueError):
    """Operands do not have conformable shapes."""

    def __init__(self, message: str, *, shapes: Sequence[Tuple[int, ...]]):
        """
        :param message: str Error message
        :param shapes: The offending shapes, in argument order
        """
        super().__init__(f"{message}: {' vs '.join(map(str, shapes))}")
        self.shapes = tuple(shapes)


class ConfigError(FedVitError, ValueError):
    """A configuration value is missing or invalid."""

    def __init__(self, message: str, *, key: str):
        """
        :param message: str Error message
        :param key: str Dotted setting name e.g. model.patch_size
        """
        super().__init__(f"{key}: {message}")
        self.key = key


class DomainMixingError(FedVitError):
    """
    Plaintext and ciphertext values were combined. Raised instead of silently
    updating an encrypted model with plaintext gradients (or vice versa).
    """
