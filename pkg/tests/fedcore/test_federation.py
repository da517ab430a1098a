import numpy as np
import pytest

from ducktools.fedgaf.config import SAMPLE_WEIGHTED, TransportConfig
from ducktools.fedgaf.exceptions import ConfigError
from ducktools.fedgaf.fedcore import local_update, repeat_simulation, simulate
from ducktools.fedgaf.neuralkit import encode_checkpoint, init_params, predict
from ducktools.fedgaf.transport import HEADER_SIZE, params_payload_size


def test_single_client_equals_sequential_training(small_config, make_shards):
    config = small_config(ids=("solo",), rounds=3, local_epochs=2)
    [shard] = make_shards(1)
    params, report = simulate(config, [shard])

    expected = init_params(config.model, config.seed)
    for round_index in range(1, 4):
        expected = local_update(
            expected, config.model, shard[0], shard[1], 2, config.train, config.seed, round_index
        ).params

    for name in expected:
        np.testing.assert_array_equal(params[name], expected[name])
    assert len(report.rounds) == 3


def test_loopback_and_tcp_agree(small_config, make_shards):
    config = small_config(ids=("a", "b", "c"))
    shards = make_shards(3)
    loop_params, loop_report = simulate(config, shards)
    tcp_config = config.replace(transport=TransportConfig(mode="tcp", timeout_sec=60))
    tcp_params, tcp_report = simulate(tcp_config, shards)

    assert encode_checkpoint(config.model, loop_params) == encode_checkpoint(config.model, tcp_params)
    assert loop_report.comm == tcp_report.comm
    assert loop_report.bytes_sent == tcp_report.bytes_sent


def test_traffic_matches_formula(small_config, make_shards):
    ids = ("alpha", "b", "c3")
    config = small_config(ids=ids, rounds=3)
    params, report = simulate(config, make_shards(3))

    model = params_payload_size(init_params(config.model))
    rounds, n = config.rounds, len(ids)
    register = sum(HEADER_SIZE + 1 + len(i) for i in ids)
    per_round_sent = n * (HEADER_SIZE + model)
    per_round_received = n * (HEADER_SIZE + 16 + model)

    assert report.bytes_sent == rounds * per_round_sent + n * HEADER_SIZE
    assert report.bytes_received == register + rounds * per_round_received
    assert report.comm["frames_sent"] == {"DONE": n, "GLOBAL_MODEL": rounds * n}
    assert report.comm["frames_received"] == {"LOCAL_UPDATE": rounds * n, "REGISTER": n}

    for k, entry in enumerate(report.rounds, start=1):
        assert entry["round"] == k
        assert entry["bytes_sent"] == k * per_round_sent
        assert entry["bytes_received"] == register + k * per_round_received
        assert [c["id"] for c in entry["clients"]] == sorted(ids)


def test_report_contents(small_config, make_shards, holdout):
    config = small_config(eval_every_round=True, aggregation=SAMPLE_WEIGHTED)
    shards = make_shards(2)
    seen = []
    _, report = simulate(config, shards, test=holdout, on_round=seen.append)

    assert [r.round for r in seen] == [1, 2]
    assert all(r.test_accuracy is not None for r in seen)
    assert report.test_confusion.total == len(holdout[1])
    assert report.train_confusion.total == sum(len(s[1]) for s in shards)
    assert report.train_accuracy_source == "evaluated"
    assert report.aborted is False
    assert {c["id"] for c in report.clients} == {"a", "b"}
    assert all(c["train_time_sec"] >= 0 for c in report.clients)
    assert all(c["cpu_time_sec"] >= 0 for c in report.clients)
    assert all(c["peak_rss_bytes"] > 0 for c in report.clients)
    assert all(c["updates_sent"] == 2 for c in report.clients)
    assert [c["samples"] for c in report.clients] == [len(s[1]) for s in shards]


def test_client_relabelling(small_config, make_shards, holdout):
    shards = make_shards(3)
    config = small_config(ids=("a", "b", "c"))
    relabelled = small_config(ids=("c", "a", "b"))

    params, _ = simulate(config, shards)
    other, _ = simulate(relabelled, shards)

    for name in params:
        np.testing.assert_allclose(params[name], other[name], rtol=0, atol=1e-6)
    np.testing.assert_array_equal(
        predict(params, config.model, holdout[0]),
        predict(other, config.model, holdout[0]),
    )


def test_empty_shard_is_excluded(small_config, make_shards):
    config = small_config(ids=("a", "b", "empty"))
    a, b = make_shards(2)
    empty = (a[0][:0], a[1][:0])
    _, report = simulate(config, [a, b, empty])
    assert report.config["clients"][0]["id"] == "a"
    assert [c["id"] for c in report.config["clients"]] == ["a", "b"]
    assert sum(c["share"] for c in report.config["clients"]) == pytest.approx(1.0)


def test_shard_count_mismatch(small_config, make_shards):
    with pytest.raises(ConfigError):
        simulate(small_config(), make_shards(3))


def test_repeats(small_config, make_shards, holdout):
    config = small_config(rounds=1)
    results, summary = repeat_simulation(config, make_shards(2), test=holdout, repeats=2)
    assert len(results) == 2
    assert [r.config["seed"] for _, r in results] == [5, 6]
    assert summary.repeats == 2
    accuracies = [r.test_accuracy for _, r in results]
    assert summary.test_accuracy_mean == pytest.approx(np.mean(accuracies))
    assert summary.test_accuracy_std == pytest.approx(np.std(accuracies))

    with pytest.raises(ConfigError):
        repeat_simulation(config, make_shards(2), repeats=0)
