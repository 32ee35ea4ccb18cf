import numpy as np
import pytest

from ern.errors import FormatError
from ern.ppm import read_ppm, write_ppm


def test_round_trip(tmp_path, rng):
    img = rng.integers(0, 256, size=(3, 37, 61), dtype=np.uint8)
    p = tmp_path / "x.ppm"
    write_ppm(p, img)
    assert np.array_equal(read_ppm(p), img)


def test_header_comments(tmp_path):
    img = np.arange(12, dtype=np.uint8).reshape(2, 2, 3)
    raw = b"P6\n# made by hand\n2 # width\n2\n# one more\n255\n" + img.tobytes()
    p = tmp_path / "c.ppm"
    p.write_bytes(raw)
    got = read_ppm(p)
    assert got.shape == (3, 2, 2)
    assert np.array_equal(got, np.moveaxis(img, 2, 0))


def test_single_whitespace_after_maxval(tmp_path):
    # the byte right after 255 is part of the header, not the pixels
    data = bytes(range(12))
    p = tmp_path / "w.ppm"
    p.write_bytes(b"P6 2 2 255\n" + data)
    assert read_ppm(p).shape == (3, 2, 2)


def test_wrong_magic(tmp_path):
    p = tmp_path / "p5.ppm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
    with pytest.raises(FormatError, match="P6"):
        read_ppm(p)


def test_wide_maxval_rejected(tmp_path):
    p = tmp_path / "m.ppm"
    p.write_bytes(b"P6\n2 2\n65535\n" + bytes(24))
    with pytest.raises(FormatError, match="255"):
        read_ppm(p)


def test_zero_dims_rejected(tmp_path):
    p = tmp_path / "z.ppm"
    p.write_bytes(b"P6\n0 2\n255\n")
    with pytest.raises(FormatError):
        read_ppm(p)


def test_truncated_pixels(tmp_path):
    p = tmp_path / "t.ppm"
    p.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
    with pytest.raises(FormatError, match="48"):
        read_ppm(p)


def test_write_rejects_bad_shape(tmp_path):
    with pytest.raises(FormatError):
        write_ppm(tmp_path / "b.ppm", np.zeros((1, 4, 4), np.uint8))
