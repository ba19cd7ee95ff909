"""Versioned JSON persistence helpers.

Float payloads are stored as hex-encoded little-endian float32 so that
save/load round-trips are bit-exact across platforms.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import MalformedFileError, VersionMismatchError

FORMAT_VERSION = "1"


def floats_to_hex(values: np.ndarray, dtype: str = "<f4") -> str:
    return np.asarray(values, dtype=dtype).tobytes().hex()


def hex_to_floats(
    payload: str, expected_len: int | None = None, dtype: str = "<f4"
) -> np.ndarray:
    try:
        raw = bytes.fromhex(payload)
    except ValueError as exc:
        raise MalformedFileError(f"invalid float payload: {exc}") from exc
    width = np.dtype(dtype).itemsize
    if len(raw) % width != 0:
        raise MalformedFileError("truncated float payload")
    values = np.frombuffer(raw, dtype=dtype).copy()
    if expected_len is not None and values.size != expected_len:
        raise MalformedFileError(
            f"float payload holds {values.size} values, expected {expected_len}"
        )
    return values


def write_versioned(path: str | Path, kind: str, body: dict) -> None:
    doc = {"format_version": FORMAT_VERSION, "kind": kind}
    doc.update(body)
    Path(path).write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def read_versioned(path: str | Path, kind: str) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise MalformedFileError(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise MalformedFileError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise MalformedFileError(f"{path} does not hold a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"{path} has format version {version!r}, this build reads version "
            f"{FORMAT_VERSION!r}"
        )
    if doc.get("kind") != kind:
        raise MalformedFileError(
            f"{path} holds a {doc.get('kind')!r} artifact, expected {kind!r}"
        )
    return doc


def sha256_file(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()
