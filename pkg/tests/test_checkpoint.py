from __future__ import annotations

import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from blora.checkpoint import TensorFile, TensorFileEntry, parse, read_file, serialize, write_file
from blora.errors import FormatError, InvariantError, TruncatedFileError
from blora.tensor import Tensor

from conftest import tensor_files


def raw_file(header: dict, data: bytes = b"") -> bytes:
    h = json.dumps(header).encode()
    return struct.pack("<Q", len(h)) + h + data


def entry(dtype="F32", shape=(2,), start=0, end=8):
    return {"dtype": dtype, "shape": list(shape), "data_offsets": [start, end]}


@given(tensor_files())
def test_serialize_parse_round_trip(tf):
    buf = serialize(tf)
    back = parse(buf)
    assert back == tf
    assert serialize(back) == buf


@given(tensor_files())
def test_canonical_layout(tf):
    buf = serialize(tf)
    (n,) = struct.unpack("<Q", buf[:8])
    header = json.loads(buf[8:8 + n])
    names = [k for k in header if k != "__metadata__"]
    assert names == sorted(names)
    end = 0
    for k in names:
        start, stop = header[k]["data_offsets"]
        assert start == end
        end = stop
    assert len(buf) == 8 + n + end


def test_metadata_first_and_compact():
    tf = TensorFile.from_tensors({"b": Tensor(np.ones(2)), "a": Tensor(np.zeros(1))}, {"k": "v"})
    buf = serialize(tf)
    n = struct.unpack("<Q", buf[:8])[0]
    assert buf[8:8 + n].decode().startswith('{"__metadata__":{"k":"v"},"a":')
    assert b" " not in buf[8:8 + n]


@pytest.mark.parametrize("buf", [b"", b"\x01\x02", struct.pack("<Q", 100) + b"{}"])
def test_truncated(buf):
    with pytest.raises(TruncatedFileError):
        parse(buf)


@pytest.mark.parametrize("header,data,code", [
    ({"a": entry("I64")}, b"\0" * 8, "unknown-dtype"),
    ({"a": entry(end=16)}, b"\0" * 8, "out-of-bounds"),
    ({"a": entry(shape=(3,))}, b"\0" * 8, "size-mismatch"),
    ({"a": entry(), "b": entry(start=4, end=12)}, b"\0" * 12, "overlap"),
    ({"a": {"dtype": "F32", "shape": [2]}}, b"\0" * 8, "malformed-header"),
    ({"a": entry(shape=(0, 2), end=0)}, b"", "malformed-header"),
    ({"__metadata__": {"k": 1}}, b"", "malformed-header"),
])
def test_structured_errors(header, data, code):
    with pytest.raises(FormatError) as info:
        parse(raw_file(header, data))
    assert info.value.code == code


def test_duplicate_names_rejected():
    h = b'{"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"a":{"dtype":"F32","shape":[1],"data_offsets":[0,4]}}'
    with pytest.raises(FormatError) as info:
        parse(struct.pack("<Q", len(h)) + h + b"\0" * 4)
    assert info.value.code == "duplicate-name"


def test_bad_json():
    h = b"{not json"
    with pytest.raises(FormatError):
        parse(struct.pack("<Q", len(h)) + h)


def test_scalar_shape_is_read_as_one_element():
    tf = parse(raw_file({"s": {"dtype": "F32", "shape": [], "data_offsets": [0, 4]}}, struct.pack("<f", 2.5)))
    assert tf.tensor("s").numpy().tolist() == [2.5]


def test_padded_header_accepted():
    h = json.dumps({"a": entry(end=4, shape=(1,))}).encode()
    h += b" " * (-len(h) % 8)
    tf = parse(struct.pack("<Q", len(h)) + h + struct.pack("<f", 1.0))
    assert tf.tensor("a").numpy().tolist() == [1.0]


def test_reserved_name():
    with pytest.raises(InvariantError):
        TensorFile({"__metadata__": TensorFileEntry("F32", (1,), b"\0" * 4)})


def test_file_io(tmp_path):
    tf = TensorFile.from_tensors({"w": Tensor(np.arange(4.0).reshape(2, 2), "BF16")}, {"x": "y"})
    write_file(tmp_path / "f.safetensors", tf)
    assert read_file(tmp_path / "f.safetensors") == tf


@settings(max_examples=200)
@given(tensor_files(), st.data())
def test_byte_flips_never_crash(tf, data):
    buf = bytearray(serialize(tf))
    for _ in range(data.draw(st.integers(1, 4))):
        i = data.draw(st.integers(0, len(buf) - 1))
        buf[i] ^= data.draw(st.integers(1, 255))
    try:
        parse(bytes(buf))
    except FormatError:
        pass


class TestInterop:
    """The reference safetensors library as an independent oracle."""

    st_numpy = pytest.importorskip("safetensors.numpy")

    def test_we_read_theirs(self):
        rng = np.random.default_rng(0)
        arrays = {"x.weight": rng.standard_normal((3, 4)).astype(np.float32),
                  "h": rng.standard_normal(5).astype(np.float16)}
        buf = self.st_numpy.save(arrays, metadata={"a": "b"})
        tf = parse(buf)
        assert tf.metadata == {"a": "b"}
        assert np.array_equal(tf.tensor("x.weight").numpy(), arrays["x.weight"])
        assert np.array_equal(tf.tensor("h").numpy(), arrays["h"].astype(np.float32))

    def test_they_read_ours(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((2, 3)).astype(np.float32)
        tf = TensorFile.from_tensors({"a": Tensor(a), "b": Tensor(np.ones(2), "F16")}, {"k": "v"})
        back = self.st_numpy.load(serialize(tf))
        assert np.array_equal(back["a"], a)
        assert back["b"].dtype == np.float16 and back["b"].tolist() == [1.0, 1.0]

    def test_canonical_bytes_match_after_reserialise(self):
        arrays = {"z": np.arange(6, dtype=np.float32).reshape(2, 3), "a": np.ones(1, dtype=np.float32)}
        theirs = parse(self.st_numpy.save(arrays))
        assert parse(serialize(theirs)) == theirs
