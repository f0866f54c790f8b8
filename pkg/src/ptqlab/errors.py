"""Exception hierarchy.

Every error raised on purpose by the library derives from :class:`PTQError`.
The CLI maps the three families onto exit codes: validation (2), numeric (3)
and I/O (4).
"""

from __future__ import annotations


class PTQError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class ValidationError(PTQError, ValueError):
    """Bad shapes, out-of-range arguments or malformed recipes."""

    exit_code = 2


class NumericalError(PTQError, ArithmeticError):
    """A numerical routine could not complete (singular or indefinite input)."""

    exit_code = 3


class NotPositiveDefiniteError(NumericalError):
    """A factorization hit a non-positive pivot."""

    def __init__(self, index: int, pivot: float, hint: str | None = None) -> None:
        self.index = index
        self.pivot = pivot
        msg = f"matrix is not positive definite: pivot {index} is {pivot:.6g}"
        if hint is None:
            hint = "increase the Hessian damping (lambda) and retry"
        super().__init__(f"{msg}; {hint}")


class TensorFileError(PTQError, OSError):
    """A tensor file is unreadable, truncated or has a bad header."""

    exit_code = 4


class StageError(PTQError):
    """Wraps a failure with the layer and pipeline stage it came from.

    The exit code is inherited from the wrapped error so the CLI can report
    the original failure category.
    """

    def __init__(self, layer: str, stage: str, cause: BaseException) -> None:
        self.layer = layer
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 3)
        super().__init__(f"layer {layer!r}, stage {stage!r}: {cause}")
