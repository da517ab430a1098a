import numpy as np
import pytest

from ducktools.fedgaf.exceptions import ConfigError
from ducktools.fedgaf.fedcore import epoch_seed, local_update
from ducktools.fedgaf.neuralkit import AdamState, TrainConfig, init_params, train_epoch


def test_zero_learning_rate_keeps_params(tiny_spec, random_images):
    x, y = random_images(12)
    params = init_params(tiny_spec, seed=1)
    result = local_update(params, tiny_spec, x, y, 2, TrainConfig(lr=0.0, batch_size=4), seed=0, round_index=1)
    for name in params:
        np.testing.assert_array_equal(result.params[name], params[name])


def test_same_inputs_give_same_bytes(tiny_spec, random_images):
    x, y = random_images(12)
    params = init_params(tiny_spec, seed=1)
    cfg = TrainConfig(batch_size=4)
    a = local_update(params, tiny_spec, x, y, 2, cfg, seed=3, round_index=2, client_id="a")
    b = local_update(params, tiny_spec, x, y, 2, cfg, seed=3, round_index=2, client_id="a")
    assert a.payload() == b.payload()
    assert a == b


def test_one_epoch_is_one_train_epoch(tiny_spec, random_images):
    x, y = random_images(32)
    params = init_params(tiny_spec, seed=1)
    cfg = TrainConfig()
    result = local_update(params, tiny_spec, x, y, 1, cfg, seed=4, round_index=3)

    state = AdamState.fresh(params, cfg)
    expected, state, metrics = train_epoch(params, tiny_spec, state, x, y, batch_size=32, seed=epoch_seed(4, 3, 0))
    assert state.t == 1
    assert result.sample_count == 32
    assert result.round == 3
    assert result.mean_loss == metrics.mean_loss
    for name in params:
        np.testing.assert_array_equal(result.params[name], expected[name])


def test_zero_epochs_rejected(tiny_spec, random_images):
    x, y = random_images(4)
    with pytest.raises(ConfigError):
        local_update(init_params(tiny_spec), tiny_spec, x, y, 0, TrainConfig(), seed=0, round_index=1)


def test_epoch_seed():
    assert epoch_seed(0, 1, 0) == epoch_seed(0, 1, 0)
    seeds = {epoch_seed(s, r, e) for s in range(2) for r in range(1, 4) for e in range(3)}
    assert len(seeds) == 18
