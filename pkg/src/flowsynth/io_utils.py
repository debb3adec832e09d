"""Atomic file writes, provenance sidecars and digests."""
from __future__ import annotations

import contextlib
import hashlib
import json
import os
import tempfile
from pathlib import Path

from . import __version__


@contextlib.contextmanager
def atomic_path(path: str | os.PathLike):
    """Yield a temporary sibling path; rename it onto ``path`` on success.

    The temporary name keeps the final suffixes so that writers which
    dispatch on extension (``.nii.gz``) behave the same.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".tmp-", suffix="-" + path.name, dir=path.parent)
    os.close(fd)
    tmp = Path(tmp)
    try:
        yield tmp
        os.replace(tmp, path)
    except BaseException:
        tmp.unlink(missing_ok=True)
        raise


def write_text_atomic(path: str | os.PathLike, text: str) -> Path:
    with atomic_path(path) as tmp:
        tmp.write_text(text)
    return Path(path)


def write_bytes_atomic(path: str | os.PathLike, data: bytes) -> Path:
    with atomic_path(path) as tmp:
        tmp.write_bytes(data)
    return Path(path)


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sidecar_path(path: str | os.PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def write_sidecar(path: str | os.PathLike, *, seed=None, config_digest=None,
                  checkpoint_digest=None, **extra) -> Path:
    """Write the provenance record for the output file at ``path``."""
    record = {
        "output": Path(path).name,
        "tool": "flowsynth",
        "tool_version": __version__,
        "seed": seed,
        "config_digest": config_digest,
        "checkpoint_digest": checkpoint_digest,
    }
    record.update(extra)
    return write_text_atomic(sidecar_path(path), json.dumps(record, indent=2, sort_keys=True) + "\n")


def read_sidecar(path: str | os.PathLike) -> dict:
    return json.loads(sidecar_path(path).read_text())
