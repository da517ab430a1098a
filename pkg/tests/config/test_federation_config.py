import json

import pytest

from ducktools.fedgaf.config import (
    SAMPLE_WEIGHTED,
    ClientSpec,
    FederationConfig,
    TransportConfig,
    dump_config,
    load_config,
)
from ducktools.fedgaf.exceptions import ConfigError
from ducktools.fedgaf.neuralkit import ModelSpec, TrainConfig


def test_defaults():
    config = FederationConfig()
    assert config.rounds == 10
    assert config.local_epochs == 10
    assert config.client_ids == ["server"]
    assert config.shares == [1.0]
    assert config.train == TrainConfig()
    assert config.model == ModelSpec()
    assert config.transport.mode == "loopback"


def test_from_dict():
    config = FederationConfig.from_dict(
        {
            "rounds": 3,
            "local_epochs": 2,
            "lr": 0.01,
            "batch_size": 16,
            "aggregation": SAMPLE_WEIGHTED,
            "seed": 7,
            "clients": [{"id": "a", "share": 0.25}, {"id": "b", "share": 0.75}],
            "model": {"c1": 4, "fc": 32},
            "transport": {"mode": "tcp", "timeout_sec": 30},
        }
    )
    assert config.rounds == 3
    assert config.train == TrainConfig(lr=0.01, batch_size=16)
    assert config.clients == (ClientSpec("a", 0.25), ClientSpec("b", 0.75))
    assert config.model == ModelSpec(c1=4, fc=32)
    assert config.transport == TransportConfig("tcp", 30)


def test_dict_round_trip(small_config):
    config = small_config(ids=("x", "y", "z"), shares=[0.5, 0.3, 0.2])
    assert FederationConfig.from_dict(config.as_dict()) == config


def test_file_round_trip(tmp_path, small_config):
    config = small_config()
    path = tmp_path / "config.json"
    path.write_text(dump_config(config))
    assert load_config(path) == config
    assert json.loads(path.read_text())["rounds"] == 2


def test_as_dict_keys():
    data = FederationConfig().as_dict()
    assert sorted(data) == sorted([
        "rounds", "local_epochs", "lr", "beta1", "beta2", "eps", "batch_size",
        "aggregation", "seed", "eval_every_round", "clients", "model", "transport",
    ])
    assert data["model"] == {
        "c1": 8, "c2": 16, "c3": 16, "c4": 16, "fc": 128, "classes": 5, "alpha": 0.01,
    }
    assert data["clients"] == [{"id": "server", "share": 1.0}]
    assert data["transport"] == {"mode": "loopback", "timeout_sec": 600.0}


def test_replace_keeps_every_other_field(small_config):
    config = small_config(eval_every_round=True, aggregation=SAMPLE_WEIGHTED)
    config = config.replace(transport=TransportConfig("tcp", 5.0))
    changed = config.replace(seed=99)

    assert changed.seed == 99
    for name in ("rounds", "local_epochs", "clients", "aggregation", "train", "model", "transport"):
        assert getattr(changed, name) == getattr(config, name), name
    assert changed.eval_every_round is True


@pytest.mark.parametrize(
    "data",
    [
        {"round": 3},
        {"rounds": 0},
        {"local_epochs": 0},
        {"aggregation": "median"},
        {"clients": []},
        {"clients": [{"id": "a", "share": 0.5}]},
        {"clients": [{"id": "a", "share": 0.5}, {"id": "a", "share": 0.5}]},
        {"clients": [{"id": "a", "share": 1.0}, {"id": "b", "share": 0.0}]},
        {"clients": [{"share": 1.0}]},
        {"model": {"width": 3}},
        {"transport": {"mode": "carrier-pigeon"}},
        {"lr": -1},
        [],
    ],
)
def test_rejected(data):
    with pytest.raises(ConfigError):
        FederationConfig.from_dict(data)


def test_invalid_json(tmp_path):
    path = tmp_path / "config.json"
    path.write_text("{")
    with pytest.raises(ConfigError):
        load_config(path)


def test_client_id_bounds():
    with pytest.raises(ConfigError):
        ClientSpec("", 1.0)
    with pytest.raises(ConfigError):
        ClientSpec("x" * 256, 1.0)


def test_without_clients(small_config):
    config = small_config(ids=("a", "b", "c"), shares=[0.5, 0.49, 0.01])
    trimmed = config.without_clients(["c"])
    assert trimmed.client_ids == ["a", "b"]
    assert sum(trimmed.shares) == 1.0
    assert trimmed.shares[0] == pytest.approx(0.5 / 0.99)
    assert trimmed.rounds == config.rounds


def test_without_clients_errors(small_config):
    config = small_config()
    with pytest.raises(ConfigError):
        config.without_clients(["nobody"])
    with pytest.raises(ConfigError):
        config.without_clients(["a", "b"])


def test_replace(small_config):
    config = small_config()
    changed = config.replace(rounds=7)
    assert changed.rounds == 7
    assert config.rounds == 2
    with pytest.raises(ConfigError):
        config.replace(rounds=-1)
