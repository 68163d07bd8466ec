# Exception hierarchy shared by every promptcompvl module.
#
# Each class derives from CzslError and from the closest builtin so callers
# may catch either. Tests are in tests/test_errors.py.
from __future__ import annotations

import os


__all__ = [
    "AllMaskedError",
    "CheckpointIntegrityError",
    "CheckpointVersionError",
    "ConfigurationError",
    "ContractError",
    "CzslError",
    "DataValidationError",
    "DegenerateInputError",
    "DimensionError",
    "FeatureLookupError",
    "GenerationError",
    "TapeStateError",
]


class CzslError(Exception):
    """Base class for every error raised by promptcompvl."""


class DimensionError(CzslError, ValueError):
    """Raised when operand shapes do not agree."""
    def __init__(self, op: str, *shapes: tuple[int, ...]) -> None:
        self.op = op
        self.shapes = shapes
        rendered = ' and '.join('x'.join(map(str, s)) or 'scalar' for s in shapes)
        super().__init__(f'{op}: incompatible shapes {rendered}')


class DegenerateInputError(CzslError, ValueError):
    """Raised by l2_normalize_rows() when a row has (near) zero norm."""
    def __init__(self, row: int, norm: float) -> None:
        self.row = row
        self.norm = norm
        super().__init__(f'row {row} has norm {norm:.3e}, cannot normalize')


class AllMaskedError(CzslError, ValueError):
    """Raised when every entry of a softmax row (or target set) is masked."""
    def __init__(self, row: int) -> None:
        self.row = row
        super().__init__(f'row {row}: every entry is masked (-inf)')


class ContractError(CzslError, ValueError):
    """Raised when a caller violates an operation's precondition."""


class TapeStateError(CzslError, RuntimeError):
    """Raised on backward() or recording against a consumed tape."""


class ConfigurationError(CzslError, ValueError):
    """Raised for invalid or inconsistent configuration values."""


class DataValidationError(CzslError, ValueError):
    """Raised when split or sample metadata fails validation.

    Attributes:
        path: File that failed validation, when known.
        lineno: 1-based line number inside ``path``, when known.
    """
    def __init__(self, message: str, path: str | os.PathLike[str] | None = None,
                 lineno: int | None = None) -> None:
        self.path = None if path is None else os.fspath(path)
        self.lineno = lineno
        location = ''
        if self.path is not None:
            location = self.path if lineno is None else f'{self.path}:{lineno}'
            location += ': '
        super().__init__(f'{location}{message}')


class GenerationError(CzslError, ValueError):
    """Raised when the synthetic generator cannot honour its contract."""


class FeatureLookupError(CzslError, KeyError):
    """Raised for an unknown image id, concept name or pair."""
    def __init__(self, kind: str, key: object) -> None:
        self.kind = kind
        self.key = key
        super().__init__(f'unknown {kind}: {key!r}')

    def __str__(self) -> str:
        # KeyError quotes its argument; keep the message readable.
        return str(self.args[0])


class CheckpointIntegrityError(CzslError, ValueError):
    """Raised when a checkpoint or feature file is corrupt or truncated.

    Attributes:
        record: Name of the record that failed to parse.
    """
    def __init__(self, record: str, detail: str) -> None:
        self.record = record
        super().__init__(f'record {record!r}: {detail}')


class CheckpointVersionError(CheckpointIntegrityError):
    """Raised when a file carries an unsupported format version."""
    def __init__(self, found: int, expected: int) -> None:
        self.found = found
        self.expected = expected
        super().__init__('header', f'format version {found} is not supported (expected {expected})')
