import numpy as np
import pytest

from ducktools.fedgaf.config import SAMPLE_WEIGHTED, UNIFORM
from ducktools.fedgaf.exceptions import AggregationError
from ducktools.fedgaf.fedcore import ClientUpdate, aggregate


def update(client_id, value, count=1, round_index=1):
    params = {"w": np.asarray(value, dtype=np.float32)}
    return ClientUpdate(client_id, round_index, params, count, 0.0, 0.0)


def test_uniform_mean():
    out = aggregate([update("a", [2.0]), update("b", [4.0])], UNIFORM)
    assert out["w"].tolist() == [3.0]
    assert out["w"].dtype == np.float32


def test_sample_weighted_mean():
    out = aggregate([update("a", [2.0], count=3), update("b", [4.0], count=1)], SAMPLE_WEIGHTED)
    assert out["w"].tolist() == [2.5]


def test_identical_copies_are_exact():
    values = np.random.default_rng(0).normal(size=(4, 5)).astype(np.float32)
    updates = [update(f"c{i}", values) for i in range(7)]
    np.testing.assert_array_equal(aggregate(updates)["w"], values)


def test_uniform_equals_weighted_for_equal_counts():
    rng = np.random.default_rng(1)
    updates = [update(f"c{i}", rng.normal(size=50), count=12) for i in range(3)]
    np.testing.assert_allclose(
        aggregate(updates, UNIFORM)["w"],
        aggregate(updates, SAMPLE_WEIGHTED)["w"],
        atol=1e-7,
    )


def test_input_order_does_not_matter():
    rng = np.random.default_rng(2)
    updates = [update(f"c{i}", rng.normal(size=20), count=i + 1) for i in range(4)]
    for mode in (UNIFORM, SAMPLE_WEIGHTED):
        forward = aggregate(updates, mode)["w"]
        backward = aggregate(updates[::-1], mode)["w"]
        assert forward.tobytes() == backward.tobytes()


def test_single_update_is_identity():
    values = np.random.default_rng(3).normal(size=9).astype(np.float32)
    np.testing.assert_array_equal(aggregate([update("only", values)])["w"], values)


def test_empty():
    with pytest.raises(AggregationError):
        aggregate([])


def test_shape_mismatch():
    with pytest.raises(AggregationError):
        aggregate([update("a", [1.0, 2.0]), update("b", [1.0])])


def test_name_mismatch():
    other = ClientUpdate("b", 1, {"v": np.zeros(1, dtype=np.float32)}, 1, 0.0, 0.0)
    with pytest.raises(AggregationError):
        aggregate([update("a", [1.0]), other])


def test_mixed_rounds():
    with pytest.raises(AggregationError):
        aggregate([update("a", [1.0], round_index=1), update("b", [1.0], round_index=2)])


def test_duplicate_clients():
    with pytest.raises(AggregationError):
        aggregate([update("a", [1.0]), update("a", [2.0])])


def test_zero_samples_weighted():
    with pytest.raises(AggregationError):
        aggregate([update("a", [1.0], count=0)], SAMPLE_WEIGHTED)


def test_unknown_mode():
    with pytest.raises(AggregationError):
        aggregate([update("a", [1.0])], "median")
