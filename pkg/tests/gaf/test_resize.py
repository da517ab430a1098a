import numpy as np
import pytest

from ducktools.fedgaf.exceptions import EncodeError
from ducktools.fedgaf.gaf import paa, resize_bilinear


def test_paa_halves():
    np.testing.assert_allclose(paa([1, 2, 3, 4], 2), [1.5, 3.5])


def test_paa_fractional():
    np.testing.assert_allclose(paa([1, 2, 3], 2), [4 / 3, 8 / 3])


def test_paa_identity():
    x = np.arange(7.0)
    np.testing.assert_array_equal(paa(x, 7), x)


def test_paa_preserves_mean():
    rng = np.random.default_rng(5)
    x = rng.normal(size=128)
    for m in range(1, 129):
        assert abs(paa(x, m).mean() - x.mean()) < 1e-9


def test_paa_bad_segments():
    with pytest.raises(EncodeError):
        paa([1, 2, 3], 0)
    with pytest.raises(EncodeError):
        paa([1, 2, 3], 4)


def test_bilinear_identity():
    m = np.random.default_rng(0).uniform(-1, 1, size=(32, 32))
    np.testing.assert_array_equal(resize_bilinear(m, 32), m)


def test_bilinear_constant():
    for size in (1, 3, 32):
        assert np.all(resize_bilinear(np.zeros((2, 2)), size) == 0)


def test_bilinear_center():
    out = resize_bilinear([[0, 1], [1, 0]], 3)
    assert out[1, 1] == pytest.approx(0.5)
    # Corners of the aligned grid keep the input corners
    assert out[0, 0] == 0 and out[0, 2] == 1 and out[2, 0] == 1 and out[2, 2] == 0


def test_bilinear_bounds():
    m = np.random.default_rng(3).uniform(-1, 1, size=(128, 128))
    out = resize_bilinear(m, 32)
    assert out.shape == (32, 32)
    assert out.min() >= m.min() and out.max() <= m.max()
