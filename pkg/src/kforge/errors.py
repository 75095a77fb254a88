"""
Exception types raised across the kforge pipeline.
"""

from typing import Optional


class KforgeError(Exception):
    """Base class for every error kforge raises on purpose."""


class ParseError(KforgeError, ValueError):
    """Malformed input table or artifact line."""

    def __init__(self, message: str, source: Optional[str] = None, row: Optional[int] = None):
        self.source = source
        self.row = row
        where = ""
        if source is not None:
            where = f"{source}"
            if row is not None:
                where += f" row {row}"
            where += ": "
        super().__init__(f"{where}{message}")


class LoadError(KforgeError):
    """An input file (image, table, checkpoint) is missing or unreadable."""


class FormatVersionError(KforgeError):
    """Artifact header names another format or version."""

    def __init__(self, path: str, expected: str, found: str):
        self.expected = expected
        self.found = found
        super().__init__(f"{path}: expected header '{expected}', found '{found}'")


class CorruptArtifactError(KforgeError):
    """Artifact content fails a length or checksum guard."""


class ShapeError(KforgeError, ValueError):
    """Tensor shape disagrees with the configured architecture."""


class LayoutError(KforgeError, ValueError):
    """A page cannot hold the requested layout, or has too few lines."""


class UnknownTokenError(KforgeError, KeyError):
    """Token or codepoint outside the known alphabet."""

    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


class ImageTooLargeError(KforgeError, ValueError):
    """Image exceeds the encoder's configured maximum side."""


class DivergenceError(KforgeError, ArithmeticError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int, max_abs_grad: float):
        self.epoch = epoch
        self.batch = batch
        self.max_abs_grad = max_abs_grad
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch} "
            f"(max |grad| = {max_abs_grad:.6g})"
        )


class AugmentationError(KforgeError):
    """A generated page's labels no longer match its image."""
