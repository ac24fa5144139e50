import json
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from isonorm import tensorio as tio
from isonorm.errors import ChecksumFailure, FormatError, ParseError, VersionMismatch

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=5), elements=finite))
def test_tensor_round_trip_is_bitwise(a):
    back = tio.decode_tensor(tio.encode_tensor(a))
    assert back.shape == a.shape and back.dtype == np.float64
    assert back.tobytes() == a.tobytes()


def test_header_layout():
    a = np.arange(6, dtype=np.float32).reshape(2, 3)
    data = tio.encode_tensor(a)
    magic, version, code, pad, rank = struct.unpack_from("<4sHBBQ", data)
    assert (magic, version, code, pad, rank) == (b"ISON", 1, 1, 0, 2)
    assert struct.unpack_from("<2Q", data, 16) == (2, 3)
    assert data[32:-4] == a.astype("<f4").tobytes()
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def test_dtype_selection():
    assert tio.decode_tensor(tio.encode_tensor(np.ones(2, np.float32))).dtype == np.float32
    assert tio.decode_tensor(tio.encode_tensor(np.ones(2, np.int64))).dtype == np.float64
    assert tio.decode_tensor(tio.encode_tensor(np.ones(2), "float32")).dtype == np.float32


@pytest.mark.parametrize("cut", [1, 4, 20, 40])
def test_truncation_is_a_checksum_failure(cut):
    data = tio.encode_tensor(np.ones((3, 3)))
    with pytest.raises(ChecksumFailure):
        tio.decode_tensor(data[:-cut])


def test_corruption_and_version():
    data = bytearray(tio.encode_tensor(np.ones((2, 2))))
    data[40] ^= 1
    with pytest.raises(ChecksumFailure):
        tio.decode_tensor(bytes(data))
    data = bytearray(tio.encode_tensor(np.ones((2, 2))))
    data[4] = 9
    with pytest.raises(VersionMismatch):
        tio.decode_tensor(bytes(data))
    with pytest.raises(FormatError):
        tio.decode_tensor(b"NOPE" + bytes(40))


def test_bundle_round_trip_and_digests():
    tensors = {"a": np.eye(3), "b": np.arange(4.0)}
    data = tio.encode_bundle({"kind": "demo"}, tensors)
    manifest, back = tio.decode_bundle(data)
    assert manifest["kind"] == "demo" and manifest["format_version"] == 1
    for name, arr in tensors.items():
        np.testing.assert_array_equal(back[name], arr)
        entry = next(e for e in manifest["tensors"] if e["name"] == name)
        assert entry["sha256"] == tio.sha256(tio.encode_tensor(arr))
    with pytest.raises(ChecksumFailure):
        tio.decode_bundle(data[:-10])


def test_sidecar_manifest(tmp_path):
    path = tmp_path / "m.json"
    tio.write_manifest(path, {"kind": "demo"}, {"x": np.arange(5.0)})
    doc, tensors = tio.read_manifest(path)
    assert doc["tensors"]["x"]["path"] == "m.x.bin"
    np.testing.assert_array_equal(tensors["x"], np.arange(5.0))
    side = tmp_path / "m.x.bin"
    tio.write_tensor(side, np.zeros(5))
    with pytest.raises(ChecksumFailure):
        tio.read_manifest(path)
    doc["format_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(VersionMismatch):
        tio.read_manifest(path)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    target = tmp_path / "out.bin"
    tio.write_tensor(target, np.ones(3))
    assert [p.name for p in tmp_path.iterdir()] == ["out.bin"]

    with pytest.raises(TypeError):
        tio.atomic_write(target, object())
    assert [p.name for p in tmp_path.iterdir()] == ["out.bin"]
    np.testing.assert_array_equal(tio.read_tensor(target), np.ones(3))


# -- CSV ---------------------------------------------------------------------


def test_csv_3x2(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("x,y\n1,2\n3,4.5\n-1e3,0\n")
    a = tio.csv_import(p, has_header=True)
    assert a.shape == (3, 2) and a.dtype == np.float64
    np.testing.assert_array_equal(a, [[1, 2], [3, 4.5], [-1000, 0]])


def test_csv_ragged_row_reports_line(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("1,2\n3,4\n5\n")
    with pytest.raises(ParseError) as info:
        tio.csv_import(p)
    assert info.value.line == 3 and "line 3" in str(info.value)


def test_csv_non_numeric_cell(tmp_path):
    p = tmp_path / "a.csv"
    p.write_text("h1,h2\n1,2\n3,abc\n")
    with pytest.raises(ParseError) as info:
        tio.csv_import(p, has_header=True)
    assert info.value.line == 3 and "abc" in str(info.value)
    with pytest.raises(ParseError):
        tio.csv_import(p, has_header=False)


def test_csv_round_trip(tmp_path, rng):
    a = rng.standard_normal((50, 7)) * 10.0 ** rng.integers(-300, 300, (50, 7))
    p = tmp_path / "r.csv"
    tio.csv_export(p, a, header=[f"c{i}" for i in range(7)])
    back = tio.csv_import(p, has_header=True)
    np.testing.assert_allclose(back, a, rtol=1e-15, atol=0)
