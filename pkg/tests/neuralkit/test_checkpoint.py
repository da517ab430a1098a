import numpy as np
import pytest

from ducktools.fedgaf.exceptions import DeserializeError
from ducktools.fedgaf.neuralkit import (
    CHECKPOINT_HEADER,
    ModelSpec,
    decode_checkpoint,
    encode_checkpoint,
    init_params,
    load_checkpoint,
    save_checkpoint,
)


def test_file_round_trip(tmp_path, tiny_spec):
    params = init_params(tiny_spec, seed=2)
    path = tmp_path / "model.fgck"
    save_checkpoint(path, tiny_spec, params)

    spec, loaded = load_checkpoint(path)
    assert spec == tiny_spec
    assert list(loaded) == list(params)
    for name in params:
        np.testing.assert_array_equal(loaded[name], params[name])


def test_alpha_survives_float32_header():
    spec = ModelSpec(c1=1, c2=1, c3=1, c4=1, fc=2, alpha=0.2)
    decoded, _ = decode_checkpoint(encode_checkpoint(spec, init_params(spec)))
    assert decoded.alpha == 0.2


def test_short_data():
    with pytest.raises(DeserializeError):
        decode_checkpoint(b"\x00" * (CHECKPOINT_HEADER.size - 1))


def test_invalid_spec_in_header(tiny_spec):
    data = bytearray(encode_checkpoint(tiny_spec, init_params(tiny_spec)))
    data[0:2] = b"\x00\x00"
    with pytest.raises(DeserializeError):
        decode_checkpoint(bytes(data))


def test_params_for_another_spec(tiny_spec):
    data = encode_checkpoint(tiny_spec, init_params(tiny_spec))
    header = CHECKPOINT_HEADER.pack(3, 4, 4, 4, 16, 5, 0.01)
    with pytest.raises(DeserializeError):
        decode_checkpoint(header + data[CHECKPOINT_HEADER.size:])


def test_truncated_params(tiny_spec):
    data = encode_checkpoint(tiny_spec, init_params(tiny_spec))
    with pytest.raises(DeserializeError):
        decode_checkpoint(data[:-1])
