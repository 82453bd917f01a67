import datetime as dt
import struct

import numpy as np
import pytest

from stmrf.formats import (
    HEADER_SIZE,
    RasterFormatError,
    decode_raster,
    encode_raster,
    read_dates,
    read_raster,
    write_raster,
)


def test_header_layout_is_bit_exact():
    data = np.arange(2 * 3 * 4 * 5, dtype=np.float64).reshape(2, 3, 4, 5)
    buf = encode_raster(data, "f8")
    assert len(buf) == HEADER_SIZE + data.size * 8
    assert buf[:4] == b"STMR"
    assert struct.unpack_from("<H", buf, 4) == (1,)
    assert struct.unpack_from("<4I", buf, 6) == (2, 3, 4, 5)
    assert struct.unpack_from("<H", buf, 22) == (2,)
    assert buf[24:64] == bytes(40)
    assert struct.unpack_from("<d", buf, 64)[0] == 0.0
    assert struct.unpack_from("<d", buf, 64 + 8 * 7)[0] == 7.0


@pytest.mark.parametrize("dtype, code", [("f4", 1), ("f8", 2), ("u2", 3)])
def test_roundtrip_all_dtypes(dtype, code):
    data = np.arange(24).reshape(2, 3, 4)
    buf = encode_raster(data, dtype)
    assert struct.unpack_from("<H", buf, 22) == (code,)
    back = decode_raster(buf)
    assert back.shape == (2, 3, 4, 1)
    assert np.array_equal(back[..., 0], data)


def test_rejects_corrupt_input():
    buf = encode_raster(np.zeros((1, 2, 2)), "f8")
    with pytest.raises(RasterFormatError):
        decode_raster(b"XXXX" + buf[4:])
    with pytest.raises(RasterFormatError):
        decode_raster(buf[:-1])
    with pytest.raises(RasterFormatError):
        encode_raster(np.array([[[70000]]]), "u2")


def test_files_and_date_sidecar(tmp_path):
    dates = [dt.date(2014, 6, 8), dt.date(2014, 6, 30)]
    data = np.random.default_rng(0).random((2, 3, 3, 2))
    write_raster(tmp_path / "x.stmr", data, "f8", dates)
    assert (tmp_path / "x.stmr.dates").read_text() == "2014-06-08\n2014-06-30\n"
    assert read_dates(tmp_path / "x.stmr") == dates
    assert np.array_equal(read_raster(tmp_path / "x.stmr"), data)
