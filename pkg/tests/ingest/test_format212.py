import numpy as np
import pytest

from ducktools.fedgaf.exceptions import ParseError, SerializeError
from ducktools.fedgaf.ingest import (
    decode_format212,
    decode_format212_raw,
    encode_format212,
)


def test_hand_decoded_pair():
    raw = decode_format212_raw(bytes([0x34, 0x12, 0x56]), 2)
    assert raw.tolist() == [0x234, 0x156]

    physical = decode_format212(bytes([0x34, 0x12, 0x56]), 2, gain=1, baseline=0)
    assert physical.tolist() == [564.0, 342.0]


def test_zero_pair():
    assert decode_format212(bytes(3), 2).tolist() == [0.0, 0.0]


def test_negative_sample():
    raw = decode_format212_raw(bytes([0xFF, 0x0F, 0x00]), 2)
    assert raw.tolist() == [-1, 0]


def test_physical_units():
    data = encode_format212([1224, 824])
    values = decode_format212(data, 2, gain=200, baseline=1024)
    np.testing.assert_allclose(values, [1.0, -1.0])


def test_odd_count_drops_half_pair():
    data = encode_format212([5, 6, 7, 8])
    assert decode_format212_raw(data, 3).tolist() == [5, 6, 7]


def test_short_stream():
    with pytest.raises(ParseError):
        decode_format212_raw(bytes(5), 4)


def test_empty():
    assert decode_format212_raw(b"", 0).size == 0


def test_round_trip_bytes():
    rng = np.random.default_rng(12)
    data = rng.integers(0, 256, size=300, dtype=np.uint8).tobytes()
    raw = decode_format212_raw(data, 200)
    assert encode_format212(raw) == data


def test_encode_range_checked():
    with pytest.raises(SerializeError):
        encode_format212([2048])
