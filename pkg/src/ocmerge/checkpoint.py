"""Named-parameter model state, task-vector arithmetic and the MSLD file format.

File layout (little-endian, no padding)::

    b"MSLD" | u32 version=1
    u32 meta_count  { u32 klen, key, u32 vlen, value }*
    u32 param_count { u32 nlen, name, u64 rows, u64 cols, f64[rows*cols] }*
"""
from __future__ import annotations

import os
import struct
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import (
    BadMagic,
    IncompatibleCheckpoints,
    IOFailure,
    TruncatedPayload,
    VersionMismatch,
)
from .linalg import as_matrix

MAGIC = b"MSLD"
VERSION = 1


class Checkpoint(Mapping):
    """Ordered, read-only mapping of parameter name to float64 matrix.

    Vectors are stored as n x 1 columns. ``meta`` holds free-form string
    key/value pairs (task id, epochs, lambda, ...).
    """

    def __init__(self, entries: Mapping[str, np.ndarray] | Iterable = (), meta: Mapping[str, str] | None = None):
        items = entries.items() if isinstance(entries, Mapping) else entries
        self._entries: dict[str, np.ndarray] = {}
        for name, value in items:
            if name in self._entries:
                raise ValueError(f"duplicate parameter name {name!r}")
            m = as_matrix(value, name).copy()
            m.flags.writeable = False
            self._entries[str(name)] = m
        self.meta: dict[str, str] = {str(k): str(v) for k, v in (meta or {}).items()}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        shapes = ", ".join(f"{k}:{v.shape[0]}x{v.shape[1]}" for k, v in self._entries.items())
        return f"Checkpoint({shapes})"

    def shapes(self) -> dict[str, tuple[int, int]]:
        return {k: v.shape for k, v in self._entries.items()}

    def with_meta(self, **meta) -> "Checkpoint":
        return Checkpoint(self._entries, {**self.meta, **{k: str(v) for k, v in meta.items()}})

    def equals(self, other: "Checkpoint", check_meta: bool = True) -> bool:
        """Bitwise equality of names, order, shapes, data (and meta)."""
        if list(self) != list(other):
            return False
        if check_meta and self.meta != other.meta:
            return False
        return all(
            self[k].shape == other[k].shape and self[k].tobytes() == other[k].tobytes()
            for k in self
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._entries.values()]) if self._entries else np.zeros(0)


# Semantically a per-parameter delta; structurally identical.
TaskVector = Checkpoint


def check_compatible(a: Checkpoint, b: Checkpoint) -> None:
    if set(a) != set(b):
        missing = sorted(set(a) ^ set(b))
        raise IncompatibleCheckpoints(f"parameter sets differ; first mismatch: {missing[0]!r}")
    for name in a:
        if a[name].shape != b[name].shape:
            raise IncompatibleCheckpoints(
                f"parameter {name!r}: shape {a[name].shape} vs {b[name].shape}"
            )


def task_vector(theta: Checkpoint, base: Checkpoint) -> TaskVector:
    """Per-parameter ``theta - base``."""
    check_compatible(theta, base)
    return Checkpoint({k: theta[k] - base[k] for k in base})


def apply_delta(base: Checkpoint, delta: TaskVector, scale: float = 1.0) -> Checkpoint:
    """Per-parameter ``base + scale * delta``."""
    check_compatible(base, delta)
    return Checkpoint({k: base[k] + scale * delta[k] for k in base}, base.meta)


def zeros_like(c: Checkpoint) -> Checkpoint:
    return Checkpoint({k: np.zeros(v.shape) for k, v in c.items()})


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def to_bytes(c: Checkpoint) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(c.meta))]
    for k, v in c.meta.items():
        parts += [_pack_str(k), _pack_str(v)]
    parts.append(struct.pack("<I", len(c)))
    for name, m in c.items():
        parts.append(_pack_str(name))
        parts.append(struct.pack("<QQ", m.shape[0], m.shape[1]))
        parts.append(m.astype("<f8", copy=False).tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes, what: str):
        self.buf, self.pos, self.what = buf, 0, what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedPayload(f"{self.what}: truncated payload at byte {self.pos} (need {n} more)")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]

    def i32(self) -> int:
        return struct.unpack("<i", self.take(4))[0]

    def string(self) -> str:
        return self.take(self.u32()).decode("utf-8")

    def matrix(self) -> np.ndarray:
        rows, cols = self.u64(), self.u64()
        data = self.take(8 * rows * cols)
        return np.frombuffer(data, dtype="<f8").astype(np.float64).reshape(rows, cols)

    def header(self, magic: bytes, version: int) -> None:
        got = self.take(4)
        if got != magic:
            raise BadMagic(f"{self.what}: bad magic {got!r}, expected {magic!r}")
        v = self.u32()
        if v != version:
            raise VersionMismatch(f"{self.what}: format version {v}, expected {version}")

    def done(self) -> None:
        if self.pos != len(self.buf):
            raise IOFailure(f"{self.what}: {len(self.buf) - self.pos} trailing bytes")


def from_bytes(buf: bytes, what: str = "checkpoint") -> Checkpoint:
    r = _Reader(buf, what)
    r.header(MAGIC, VERSION)
    meta = {}
    for _ in range(r.u32()):
        k = r.string()
        meta[k] = r.string()
    entries = []
    for _ in range(r.u32()):
        name = r.string()
        entries.append((name, r.matrix()))
    r.done()
    return Checkpoint(entries, meta)


def read_file(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IOFailure(f"cannot read {path}: {exc.strerror}") from exc


def write_file(path, payload: bytes) -> None:
    try:
        tmp = f"{path}.tmp"
        with open(tmp, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except OSError as exc:
        raise IOFailure(f"cannot write {path}: {exc.strerror}") from exc


def save(c: Checkpoint, path) -> None:
    write_file(path, to_bytes(c))


def load(path) -> Checkpoint:
    return from_bytes(read_file(path), what=str(path))
