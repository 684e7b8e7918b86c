"""Output-directory guards and atomic file writes."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Union

from waveloc.errors import InputError

PathLike = Union[str, os.PathLike]


def is_within_directory(directory: PathLike, target: PathLike) -> bool:
    """Return True if ``target`` resolves to a location inside ``directory``."""
    abs_directory = os.path.abspath(directory)
    abs_target = os.path.abspath(target)
    return os.path.commonpath([abs_directory, abs_target]) == abs_directory


def resolve_output(out_dir: PathLike, relative: PathLike) -> Path:
    """Join ``relative`` onto ``out_dir`` refusing anything that escapes it."""
    dest = Path(out_dir) / relative
    if not is_within_directory(out_dir, dest):
        raise InputError(f"refusing to write outside {out_dir}: {relative}")
    return dest


def atomic_write_bytes(path: PathLike, data: bytes) -> Path:
    """Write ``data`` to ``path`` via a temporary sibling and ``os.replace``.

    Readers never observe a partially written file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def atomic_write_text(path: PathLike, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))
