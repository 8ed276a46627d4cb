"""
errors.py — Exception hierarchy for lutnet.

Library code raises these; only cli.main() catches them and turns them into
an exit status.  Each subclass also derives from ValueError where the failure
is a bad argument, so callers that only know the builtin still catch it.
"""

from __future__ import annotations


class LutNetError(Exception):
    """Base class for every error lutnet raises on purpose."""


class ModelFormatError(LutNetError, ValueError):
    """A checkpoint or container file is missing, truncated or inconsistent."""

    def __init__(self, message: str, *, path: str | None = None,
                 offset: int | None = None) -> None:
        where = ''
        if path is not None:
            where = f' [{path}'
            if offset is not None:
                where += f' @ byte {offset}'
            where += ']'
        super().__init__(message + where)
        self.path = path
        self.offset = offset


class ShapeError(LutNetError, ValueError):
    """Tensor or layer shapes do not line up."""


class FoldError(LutNetError, ValueError):
    """Normalization parameters cannot be folded into a weight layer."""


class CodebookError(LutNetError, ValueError):
    """A quantization codebook cannot be built from the given parameters."""


class TableError(LutNetError, ValueError):
    """An inference table would be malformed (entry too wide, index out of range)."""


class LogDomainError(LutNetError, ValueError):
    """Log-domain arithmetic preconditions are violated."""


class TrainingDivergedError(LutNetError):
    """Training produced a non-finite loss."""

    def __init__(self, step: int, loss: float) -> None:
        super().__init__(f'training diverged at step {step} (loss={loss})')
        self.step = step
        self.loss = loss
