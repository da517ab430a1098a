import logging

import numpy as np
import pytest

from ducktools.fedgaf.evalkit import (
    ConfusionMatrix,
    evaluate,
    format_accuracy_summary,
    per_class_accuracy,
)
from ducktools.fedgaf.exceptions import ConfigError
from ducktools.fedgaf.neuralkit import zero_params


def test_padded_matrix_accuracy():
    matrix = ConfusionMatrix.padded([[8, 2], [1, 9]])
    assert matrix.classes == 5
    assert matrix.total == 20
    assert matrix.accuracy == 0.85


def test_perfect_predictor():
    labels = np.array([0, 1, 2, 3, 4, 4, 2])
    matrix = ConfusionMatrix.from_predictions(labels, labels)
    assert matrix.accuracy == 1.0
    assert np.array_equal(np.diag(np.diag(matrix.counts)), matrix.counts)
    assert per_class_accuracy(matrix) == [1.0] * 5


def test_constant_predictor(tiny_spec, random_images):
    params = zero_params(tiny_spec)
    params["fc2.bias"][0] = 1.0
    x, _ = random_images(10)
    labels = np.repeat(np.arange(5), 2)

    matrix, accuracy = evaluate(params, tiny_spec, x, labels)

    assert accuracy == 0.2
    assert matrix.total == 10
    assert matrix.counts[:, 0].tolist() == [2, 2, 2, 2, 2]


def test_class_row_recall():
    counts = np.zeros((5, 5), dtype=int)
    np.fill_diagonal(counts, 50)
    counts[3] = [18, 0, 0, 82, 0]
    assert per_class_accuracy(ConfusionMatrix(counts))[3] == 0.82


def test_empty_class_is_undefined(caplog):
    counts = np.diag([3, 0, 2, 1, 1])
    with caplog.at_level(logging.WARNING):
        result = per_class_accuracy(ConfusionMatrix(counts))
    assert result == [1.0, None, 1.0, 1.0, 1.0]
    assert "L has no samples" in caplog.text


def test_overall_is_weighted_mean_of_classes():
    counts = np.random.default_rng(0).integers(1, 20, size=(5, 5))
    matrix = ConfusionMatrix(counts)
    rows = counts.sum(axis=1)
    weighted = sum(acc * row for acc, row in zip(per_class_accuracy(matrix), rows))
    assert weighted == pytest.approx(matrix.accuracy * matrix.total)
    assert int(np.trace(counts)) == matrix.correct


def test_matrix_validation():
    with pytest.raises(ConfigError):
        ConfusionMatrix([[1, 2, 3]])
    with pytest.raises(ConfigError):
        ConfusionMatrix([[1, -1], [0, 1]])


def test_matrix_is_read_only():
    matrix = ConfusionMatrix(np.eye(5, dtype=int))
    with pytest.raises(ValueError):
        matrix.counts[0, 0] = 7


def test_empty_test_set(tiny_spec):
    with pytest.raises(ConfigError):
        evaluate(zero_params(tiny_spec), tiny_spec, np.zeros((0, 1, 32, 32)), [])


def test_summary_text():
    text = format_accuracy_summary(ConfusionMatrix.padded([[8, 2], [1, 9]]))
    assert text.splitlines()[0] == "Overall accuracy: 85.00% (17/20)"
    assert "  N: 80.00% (8/10)" in text
    assert "  R: n/a (0/0)" in text
