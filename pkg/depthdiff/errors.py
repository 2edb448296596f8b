from typing import Any, Dict, Optional


class DepthDiffError(Exception):
    """Base class for errors raised by this package."""


class ShapeError(DepthDiffError, ValueError):
    pass


class ParameterError(DepthDiffError, ValueError):
    pass


class ContractError(DepthDiffError, ValueError):
    pass


class EmptyInputError(DepthDiffError, ValueError):
    pass


class DegenerateDepthError(DepthDiffError, ValueError):
    pass


class AlignmentError(DepthDiffError, ValueError):
    pass


class ParseError(DepthDiffError, ValueError):
    """Malformed PFM/PGM/manifest input. `offset` is the byte position where
    parsing failed."""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)


class NonFiniteLossError(DepthDiffError, RuntimeError):
    def __init__(self, message: str, diagnostics: Dict[str, Any]):
        self.diagnostics = diagnostics
        super().__init__(f"{message}: {diagnostics}")


class UsageError(DepthDiffError):
    """Bad command-line usage, e.g. a missing input path."""
