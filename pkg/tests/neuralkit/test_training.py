import numpy as np
import pytest

from ducktools.fedgaf.exceptions import ConfigError
from ducktools.fedgaf.neuralkit import (
    AdamState,
    TrainConfig,
    forward_backward,
    init_params,
    train_epoch,
)


@pytest.mark.parametrize("n, steps", [(32, 1), (33, 2), (64, 2), (5, 1)])
def test_step_count(tiny_spec, random_images, n, steps):
    x, y = random_images(n)
    params = init_params(tiny_spec)
    _, state, metrics = train_epoch(params, tiny_spec, AdamState.fresh(params), x, y, batch_size=32)
    assert metrics.steps == steps
    assert metrics.samples == n
    assert state.t == steps


def test_epoch_is_deterministic(tiny_spec, random_images):
    x, y = random_images(20)
    runs = []
    for _ in range(2):
        params = init_params(tiny_spec, seed=1)
        params, _, metrics = train_epoch(params, tiny_spec, AdamState.fresh(params), x, y, batch_size=8, seed=11)
        runs.append((params, metrics))

    (a, ma), (b, mb) = runs
    assert ma == mb
    for name in a:
        np.testing.assert_array_equal(a[name], b[name])


def test_shuffle_seed_matters(tiny_spec, random_images):
    x, y = random_images(20)
    start = init_params(tiny_spec, seed=1)
    a, _, _ = train_epoch(start, tiny_spec, AdamState.fresh(start), x, y, batch_size=8, seed=1)
    b, _, _ = train_epoch(start, tiny_spec, AdamState.fresh(start), x, y, batch_size=8, seed=2)
    assert not np.array_equal(a["fc2.weight"], b["fc2.weight"])


def test_empty_shard(tiny_spec):
    params = init_params(tiny_spec)
    with pytest.raises(ConfigError):
        train_epoch(params, tiny_spec, AdamState.fresh(params), np.zeros((0, 1, 32, 32)), np.zeros(0))


def test_overfits_a_small_batch(tiny_spec, synth_arrays):
    images, labels = synth_arrays
    x, y = images[:16], labels[:16]
    params = init_params(tiny_spec, seed=0)
    state = AdamState.fresh(params, TrainConfig(lr=0.01))

    start_loss, _, _ = forward_backward(params, tiny_spec, x, y)
    for epoch in range(50):
        params, state, _ = train_epoch(params, tiny_spec, state, x, y, batch_size=16, seed=epoch)
    end_loss, _, _ = forward_backward(params, tiny_spec, x, y)

    assert state.t == 50
    assert end_loss <= 0.5 * start_loss
