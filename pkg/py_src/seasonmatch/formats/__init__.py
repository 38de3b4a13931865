"""
On-disk formats shared by the pipeline stages.

Copyright (c) 2024 seasonmatch developers
SPDX-License-Identifier: MIT
"""
import hashlib
import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Iterator, List, Union

from .smd_h import *
from .smw_h import *

MANIFEST_NAME = "MANIFEST.sha256"


@contextmanager
def atomic_path(path: Union[str, Path]) -> Iterator[Path]:
    """
    @brief Hand out a temporary sibling of path and move it into place once
           the caller is done writing.

    @param path: Final destination.

    Readers never observe a half-written artifact: the rename only happens
    when the block exits without an exception, otherwise the temporary file is
    removed.

    Usage:
        with atomic_path("out/fc_matrix.csv") as tmp:
            df.to_csv(tmp, index=False)
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", suffix=path.suffix, dir=path.parent)
    os.close(fd)
    tmp = Path(tmp_name)
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def atomic_write_bytes(path: Union[str, Path], data: bytes) -> None:
    # pylint: disable=missing-function-docstring
    with atomic_path(path) as tmp:
        tmp.write_bytes(data)


def sha256_file(path: Union[str, Path]) -> str:
    # pylint: disable=missing-function-docstring
    digest = hashlib.sha256()
    with open(path, "rb") as fd:
        for chunk in iter(lambda: fd.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(directory: Union[str, Path]) -> Path:
    """
    @brief Record a sha256 checksum for every artifact below directory.

    @param directory: Stage output directory.

    @return Path of the written MANIFEST.sha256, one "<sha256>  <relative path>"
            line per file, sorted by path.
    """
    directory = Path(directory)
    files: List[Path] = sorted(
        p for p in directory.rglob("*") if p.is_file() and p.name != MANIFEST_NAME
    )
    lines = [f"{sha256_file(p)}  {p.relative_to(directory).as_posix()}\n" for p in files]
    target = directory / MANIFEST_NAME
    atomic_write_bytes(target, "".join(lines).encode("utf-8"))
    return target
