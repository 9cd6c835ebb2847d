"""
Binary index files (little-endian).

Set index::

    b"SETN" | u32 version=1 | u32 D | u64 N | N*D float32 (row-major) | id table

Element index::

    b"SETE" | u32 version=1 | u32 D_e | u64 N
    | N x (u32 count | count*D_e float32) | id table

The id table is N entries of ``u32 byte length`` + UTF-8 bytes.

Datasets (sets with element labels) are stored as ``.npz`` archives.
"""

from __future__ import annotations

import struct

import numpy as np

from .engine import ElementIndex, SetCollection, SetIndex

SET_MAGIC = b"SETN"
ELEMENT_MAGIC = b"SETE"
FORMAT_VERSION = 1

_HEADER = struct.Struct("<4sIIQ")
_U32 = struct.Struct("<I")
_F32 = np.dtype("<f4")


class IndexFormatError(ValueError):
    pass


def _write_ids(fh, ids):
    for s in ids:
        raw = str(s).encode("utf-8")
        fh.write(_U32.pack(len(raw)))
        fh.write(raw)


def _read_exact(fh, n):
    data = fh.read(n)
    if len(data) != n:
        raise IndexFormatError("truncated index file")
    return data


def _read_ids(fh, n):
    ids = []
    for _ in range(n):
        (length,) = _U32.unpack(_read_exact(fh, 4))
        ids.append(_read_exact(fh, length).decode("utf-8"))
    return ids


def _read_header(fh, magic):
    got, version, dim, n = _HEADER.unpack(_read_exact(fh, _HEADER.size))
    if got != magic:
        raise IndexFormatError(f"bad magic {got!r}, expected {magic!r}")
    if version != FORMAT_VERSION:
        raise IndexFormatError(f"index format version {version}, this reader supports {FORMAT_VERSION}")
    return dim, n


def write_set_index(path, index: SetIndex) -> None:
    n, d = index.vectors.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(SET_MAGIC, FORMAT_VERSION, d, n))
        fh.write(np.ascontiguousarray(index.vectors, dtype=_F32).tobytes())
        _write_ids(fh, index.ids)


def read_set_index(path) -> SetIndex:
    with open(path, "rb") as fh:
        d, n = _read_header(fh, SET_MAGIC)
        vec = np.frombuffer(_read_exact(fh, n * d * 4), dtype=_F32).reshape(n, d)
        ids = _read_ids(fh, n)
    return SetIndex(ids, vec.astype(np.float32))


def set_index_nbytes(n: int, d: int, ids) -> int:
    return _HEADER.size + 4 * n * d + sum(4 + len(str(s).encode("utf-8")) for s in ids)


def write_element_index(path, index: ElementIndex) -> None:
    counts = np.diff(index.offsets)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(ELEMENT_MAGIC, FORMAT_VERSION, index.dim, len(index)))
        for i, c in enumerate(counts):
            fh.write(_U32.pack(int(c)))
            fh.write(np.ascontiguousarray(index.elements(i), dtype=_F32).tobytes())
        _write_ids(fh, index.ids)


def read_element_index(path) -> ElementIndex:
    with open(path, "rb") as fh:
        d, n = _read_header(fh, ELEMENT_MAGIC)
        blocks, counts = [], []
        for _ in range(n):
            (c,) = _U32.unpack(_read_exact(fh, 4))
            counts.append(c)
            blocks.append(np.frombuffer(_read_exact(fh, c * d * 4), dtype=_F32).reshape(c, d))
        ids = _read_ids(fh, n)
    x = np.concatenate(blocks) if blocks else np.zeros((0, d), np.float32)
    offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return ElementIndex(ids, x, offsets)


# dataset files (.npz): set ids, element rows, offsets and element labels


def write_collection(path, dataset: SetCollection) -> None:
    with open(path, "wb") as fh:
        np.savez(
            fh,
            ids=np.asarray(dataset.ids, dtype=str),
            x=np.asarray(dataset.x, dtype=np.float64),
            offsets=np.asarray(dataset.offsets, dtype=np.int64),
            labels=np.asarray(dataset.labels, dtype=np.int64),
        )


def read_collection(path) -> SetCollection:
    try:
        with np.load(path, allow_pickle=False) as z:
            return SetCollection([str(s) for s in z["ids"]], z["x"], z["offsets"], z["labels"])
    except (KeyError, ValueError, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise IndexFormatError(f"{path}: not a dataset file ({exc})") from exc
