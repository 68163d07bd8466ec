# NOTE: tests are provided in tests/test_io.py
# Any updates to this file should have corresponding updates to tests

from contextlib import contextmanager
import os
from tempfile import TemporaryDirectory
import typing


__all__ = ["atomic_replace", "atomic_write"]


def atomic_replace(
    *,
    target_file: str | os.PathLike[str],
    data: bytes,
    perms: int = 0o644
) -> None:
    """Atomically replace a file's contents.

    Args:
        target_file: Path to the file to replace.
        data: Binary data to write to the file.
        perms: File permissions as octal integer (default: 0o644).

    Raises:
        OSError: If the write or rename fails.
    """
    with atomic_write(target_file, "wb", perms=perms) as f:
        f.write(data)


@typing.overload
@contextmanager
def atomic_write(target: str | os.PathLike[str], mode: typing.Literal["w"] = "w", *,
                 perms: int = 0o644) -> typing.Generator[typing.TextIO, None, None]: ...


@typing.overload
@contextmanager
def atomic_write(target: str | os.PathLike[str], mode: typing.Literal["wb"], *,
                 perms: int = 0o644) -> typing.Generator[typing.BinaryIO, None, None]: ...


@contextmanager
def atomic_write(target: str | os.PathLike[str], mode: typing.Literal["w", "wb"] = "w", *,
                 perms: int = 0o644) -> typing.Generator[typing.IO[typing.Any], None, None]:
    """Context manager for atomic file writes.

    Yields a file-like object for writing. On successful context manager exit
    the data is flushed and fsynced, then renamed over the target so readers
    never observe a partially written checkpoint, report or split file.

    Args:
        target: Path to the file to write/replace.
        mode: File open mode, either "w" (text, UTF-8) or "wb" (binary).
            Defaults to "w".
        perms: File permissions as octal integer (default: 0o644).

    Yields:
        File-like object for writing

    Raises:
        OSError: If the temporary write or rename fails.

    Note:
        - The target is only replaced if the context manager exits
          successfully; an exception inside the block leaves it untouched.
        - Text mode always writes UTF-8 with "\\n" line endings so outputs are
          byte-identical across platforms.

    Example:
        with atomic_write('/tmp/run/report.txt') as f:
            f.write("setting=generalized\\n")
        # File is atomically replaced here
    """
    if mode not in ("w", "wb"):
        raise ValueError(f'{mode}: invalid mode. Only "w" and "wb" are supported.')

    target = os.fspath(target)
    dst_dirpath = os.path.dirname(os.path.abspath(target))

    with TemporaryDirectory(dir=dst_dirpath) as tmpdir:
        tmpfile = os.path.join(tmpdir, os.path.basename(target))
        if mode == "w":
            f = open(tmpfile, "w", encoding="utf-8", newline="\n")
        else:
            f = open(tmpfile, "wb")
        with f:
            os.fchmod(f.fileno(), perms)
            yield f
            f.flush()
            os.fsync(f.fileno())

        os.replace(tmpfile, target)
