import math

import numpy as np
import pytest

from ducktools.fedgaf.exceptions import EncodeError
from ducktools.fedgaf.gaf import gadf, gasf


def _double_loop(x, op):
    n = len(x)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = op(math.acos(x[i]), math.acos(x[j]))
    return out


def test_gasf_fixture():
    expected = [[1, 0, -1], [0, -1, 0], [-1, 0, 1]]
    np.testing.assert_allclose(gasf([-1, 0, 1]), expected, atol=1e-9)


def test_gadf_fixture():
    expected = [[0, 1, 0], [-1, 0, 1], [0, -1, 0]]
    np.testing.assert_allclose(gadf([-1, 0, 1]), expected, atol=1e-9)


def test_single_point():
    assert gasf([1.0]).tolist() == [[1.0]]


def test_double_loop_oracle():
    x = np.random.default_rng(7).uniform(-1, 1, size=16)
    np.testing.assert_allclose(gasf(x), _double_loop(x, lambda a, b: math.cos(a + b)), atol=1e-6)
    np.testing.assert_allclose(gadf(x), _double_loop(x, lambda a, b: math.sin(a - b)), atol=1e-6)


def test_angle_oracle_on_random_vectors():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        x = rng.uniform(-1, 1, size=rng.integers(2, 65))
        phi = np.arccos(x)
        np.testing.assert_allclose(gasf(x), np.cos(np.add.outer(phi, phi)), atol=1e-6)
        np.testing.assert_allclose(gadf(x), np.sin(np.subtract.outer(phi, phi)), atol=1e-6)


def test_symmetry_exact():
    x = np.random.default_rng(1).uniform(-1, 1, size=16)
    s = gasf(x)
    d = gadf(x)
    np.testing.assert_array_equal(s, s.T)
    np.testing.assert_array_equal(d, -d.T)
    assert np.all(np.diag(d) == 0)
    np.testing.assert_allclose(np.diag(s), 2 * x**2 - 1, atol=1e-12)


def test_tolerance_clamp():
    out = gasf([1 + 5e-10, -1 - 5e-10])
    assert out.max() <= 1 and out.min() >= -1


def test_out_of_range():
    with pytest.raises(EncodeError):
        gasf([1.01, 0.0])
    with pytest.raises(EncodeError):
        gadf([0.0, -1.5])
