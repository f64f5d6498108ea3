import numpy as np
import pytest

from hierlight.errors import InputError
from hierlight.ppm import encode_ppm, parse_ppm, read_ppm, write_ppm


def test_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    path = tmp_path / "x.ppm"
    write_ppm(path, img)
    np.testing.assert_array_equal(read_ppm(path), img)
    assert path.read_bytes()[:11] == b"P6\n7 5\n255\n"


def test_comments_and_odd_whitespace():
    data = b"P6 # made by hand\n2\t 1 # size\n255\r" + bytes(range(6))
    img = parse_ppm(data)
    assert img.shape == (1, 2, 3)
    assert img.ravel().tolist() == list(range(6))


def test_pixel_data_may_start_with_whitespace_byte():
    # exactly one separator; a following 0x0a is pixel data
    img = parse_ppm(b"P6\n1 1\n255\n\n\n\n")
    assert img.ravel().tolist() == [10, 10, 10]


@pytest.mark.parametrize(
    "data,offset,msg",
    [
        (b"P3\n1 1\n255\n000", 0, "magic"),
        (b"", 0, "magic"),
        (b"P6\n1 x\n255\n000", 5, "height"),
        (b"P6\n1 1\n65535\n" + b"0" * 6, 7, "maxval"),
        (b"P6\n0 1\n255\n", 3, "positive"),
        (b"P6\n2 2\n255\n" + b"0" * 11, 22, "truncated"),
        (b"P6\n1 1\n255\n" + b"0" * 4, 14, "trailing"),
        (b"P6\n1 1", 6, "end of PPM header"),
        (b"P6\n1 1 255", 10, "whitespace byte before pixel"),
        (b"P61 1 255\n000", 2, "whitespace after magic"),
    ],
)
def test_malformed_inputs_report_byte_offset(data, offset, msg):
    with pytest.raises(InputError, match=msg) as info:
        parse_ppm(data)
    assert info.value.offset == offset
    assert str(info.value).startswith(f"byte {offset}:")


def test_encode_rejects_wrong_dtype():
    with pytest.raises(InputError):
        encode_ppm(np.zeros((2, 2, 3), np.float32))
    assert len(encode_ppm(np.zeros((2, 2, 3), np.uint8))) == len(b"P6\n2 2\n255\n") + 12
