import numpy as np
import pytest

from collagefix import io as cfio
from collagefix.core import FlowField, RasterImage


def test_png_round_trip_16bit(tmp_path):
    rng = np.random.default_rng(0)
    img = RasterImage(rng.random((7, 9, 3), dtype=np.float32))
    path = tmp_path / "a.png"
    cfio.save_png(img, path, bitdepth=16)
    back = cfio.load_png(path)
    # exact at the 16-bit quantization grid
    assert np.array_equal(np.round(back.data * 65535), np.round(img.data * 65535))
    assert np.abs(back.data - img.data).max() <= 0.5 / 65535 + 1e-7


def test_png_round_trip_8bit_gray(tmp_path):
    img = RasterImage(np.linspace(0, 1, 24, dtype=np.float32).reshape(4, 6, 1))
    path = tmp_path / "g.png"
    cfio.save_png(img, path, bitdepth=8)
    back = cfio.load_png(path)
    assert back.channels == 1
    assert np.abs(back.data - img.data).max() <= 0.5 / 255 + 1e-7


def test_png_second_round_trip_is_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    img = RasterImage(rng.random((5, 5, 3), dtype=np.float32))
    cfio.save_png(img, tmp_path / "a.png", bitdepth=16)
    once = cfio.load_png(tmp_path / "a.png")
    cfio.save_png(once, tmp_path / "b.png", bitdepth=16)
    twice = cfio.load_png(tmp_path / "b.png")
    assert np.array_equal(once.data, twice.data)


def test_png_encode_decode_bytes():
    img = RasterImage(np.random.default_rng(2).random((6, 4, 3), dtype=np.float32))
    blob = cfio.encode_png_bytes(img, bitdepth=8)
    back = cfio.decode_png_bytes(blob)
    assert back.shape == img.shape


def test_png_rejects_undecodable():
    with pytest.raises(cfio.FileFormatError):
        cfio.decode_png_bytes(b"this is not a png at all")


def test_tensor_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    data = rng.normal(size=(5, 8, 2)).astype(np.float32)
    data[0, 0, :] = np.nan
    path = tmp_path / "t.mfxt"
    cfio.save_tensor(data, path)
    back = cfio.load_tensor(path)
    assert back.shape == (5, 8, 2)
    assert np.array_equal(back.view(np.uint32), data.view(np.uint32))


def test_tensor_header_checks(tmp_path):
    path = tmp_path / "t.mfxt"
    cfio.save_tensor(np.zeros((2, 2, 1), dtype=np.float32), path)
    blob = path.read_bytes()
    with pytest.raises(cfio.FileFormatError, match="magic"):
        cfio.decode_tensor_bytes(b"XXXX" + blob[4:])
    with pytest.raises(cfio.FileFormatError, match="expected"):
        cfio.decode_tensor_bytes(blob[:-4])


def test_flo_round_trip(tmp_path):
    rng = np.random.default_rng(4)
    flow = FlowField(rng.normal(scale=3.0, size=(6, 7, 2)).astype(np.float32))
    path = tmp_path / "f.flo"
    cfio.save_flo(flow, path)
    back = cfio.load_flo(path)
    assert np.array_equal(back.data, flow.data)


def test_flo_bad_magic(tmp_path):
    path = tmp_path / "f.flo"
    path.write_bytes(b"\x00" * 20)
    with pytest.raises(cfio.FileFormatError, match="magic"):
        cfio.load_flo(path)
