import struct

import numpy as np
import pytest

from setret.engine import ElementIndex, SetCollection, SetIndex
from setret.indexio import (
    IndexFormatError,
    read_collection,
    read_element_index,
    read_set_index,
    set_index_nbytes,
    write_collection,
    write_element_index,
    write_set_index,
)

from .conftest import unit_rows


def test_set_index_round_trip_bit_exact(tmp_path, rng):
    index = SetIndex(["s0", "é-set", "s2"], unit_rows(rng, 3, 7))
    write_set_index(tmp_path / "a.setn", index)
    back = read_set_index(tmp_path / "a.setn")
    assert back.ids == index.ids
    assert back.vectors.tobytes() == index.vectors.tobytes()
    write_set_index(tmp_path / "b.setn", back)
    assert (tmp_path / "a.setn").read_bytes() == (tmp_path / "b.setn").read_bytes()


def test_element_index_round_trip_bit_exact(tmp_path, rng):
    index = ElementIndex(["a", "b", "c"], unit_rows(rng, 6, 4), [0, 1, 4, 6])
    write_element_index(tmp_path / "e.sete", index)
    back = read_element_index(tmp_path / "e.sete")
    assert back.ids == index.ids
    np.testing.assert_array_equal(back.offsets, index.offsets)
    assert back.x.tobytes() == index.x.tobytes()


def test_byte_size_matches_layout(tmp_path):
    """64k sets of D=128: header, 64k x 128 float32 rows and the id table."""
    n, d = 65536, 128
    ids = [f"s{i:05d}" for i in range(n)]
    index = SetIndex(ids, np.tile(np.eye(d, dtype=np.float32)[0], (n, 1)))
    write_set_index(tmp_path / "big.setn", index)
    size = (tmp_path / "big.setn").stat().st_size
    assert size == 4 + 4 + 4 + 8 + n * d * 4 + n * (4 + 6)
    assert size == set_index_nbytes(n, d, ids)


def test_header_layout(tmp_path, rng):
    write_set_index(tmp_path / "h.setn", SetIndex(["x"], unit_rows(rng, 1, 5)))
    raw = (tmp_path / "h.setn").read_bytes()
    assert struct.unpack("<4sIIQ", raw[:20]) == (b"SETN", 1, 5, 1)


def test_bad_magic_and_version(tmp_path, rng):
    write_set_index(tmp_path / "h.setn", SetIndex(["x"], unit_rows(rng, 1, 5)))
    raw = bytearray((tmp_path / "h.setn").read_bytes())
    with pytest.raises(IndexFormatError, match="magic"):
        read_element_index(tmp_path / "h.setn")
    raw[4] = 2
    (tmp_path / "v.setn").write_bytes(bytes(raw))
    with pytest.raises(IndexFormatError, match="version"):
        read_set_index(tmp_path / "v.setn")
    (tmp_path / "t.setn").write_bytes(bytes(raw[:30]))
    with pytest.raises(IndexFormatError):
        read_set_index(tmp_path / "t.setn")


def test_collection_round_trip(tmp_path, rng):
    ds = SetCollection.from_sets([unit_rows(rng, 2, 3), unit_rows(rng, 3, 3)], labels=[[1, 2], [3, -1, -1]])
    write_collection(tmp_path / "d.npz", ds)
    back = read_collection(tmp_path / "d.npz")
    assert back.ids == ds.ids
    np.testing.assert_array_equal(back.x, ds.x)
    np.testing.assert_array_equal(back.offsets, ds.offsets)
    np.testing.assert_array_equal(back.labels, ds.labels)
    write_collection(tmp_path / "e.npz", back)
    assert (tmp_path / "d.npz").read_bytes() == (tmp_path / "e.npz").read_bytes()


def test_collection_rejects_other_files(tmp_path):
    (tmp_path / "x.npz").write_bytes(b"not a zip")
    with pytest.raises(IndexFormatError):
        read_collection(tmp_path / "x.npz")
    with pytest.raises(FileNotFoundError):
        read_collection(tmp_path / "missing.npz")
