# MIT License
#
# Copyright (c) 2025 David C Ellis
#
# Permission is hereby granted, free of charge, to any person obtaining a copy
# of this software and associated documentation files (the "Software"), to deal
# in the Software without restriction, including without limitation the rights
# to use, copy, modify, merge, publish, distribute, sublicense, and/or sell
# copies of the Software, and to permit persons to whom the Software is
# furnished to do so, subject to the following conditions:
#
# The above copyright notice and this permission notice shall be included in all
# copies or substantial portions of the Software.
#
# THE SOFTWARE IS PROVIDED "AS IS", WITHOUT WARRANTY OF ANY KIND, EXPRESS OR
# IMPLIED, INCLUDING BUT NOT LIMITED TO THE WARRANTIES OF MERCHANTABILITY,
# FITNESS FOR A PARTICULAR PURPOSE AND NONINFRINGEMENT. IN NO EVENT SHALL THE
# AUTHORS OR COPYRIGHT HOLDERS BE LIABLE FOR ANY CLAIM, DAMAGES OR OTHER
# LIABILITY, WHETHER IN AN ACTION OF CONTRACT, TORT OR OTHERWISE, ARISING FROM,
# OUT OF OR IN CONNECTION WITH THE SOFTWARE OR THE USE OR OTHER DEALINGS IN THE
# SOFTWARE.


"""
Round based federated averaging.

The server initializes the global model, sends it to every registered
client, waits for all of their local updates, averages them and repeats.
``simulate`` runs the server and all clients in one process over loopback
(or localhost TCP) channels, with byte accounting unchanged.
"""
import logging
import math
import time
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait

import numpy as np
import psutil

from ducktools.classbuilder.prefab import Prefab, attribute

from .config import LOOPBACK, SAMPLE_WEIGHTED, TCP, UNIFORM, FederationConfig
from .evalkit import RunReport, evaluate, summarize_repeats
from .exceptions import (
    AggregationError,
    ChannelClosed,
    ClientAbortError,
    ConfigError,
    DeserializeError,
    ProtocolError,
    RoundAbortError,
    ShapeError,
)
from .neuralkit import (
    AdamState,
    check_params,
    init_params,
    train_epoch,
)
from .transport import (
    CommStats,
    LoopbackListener,
    MessageType,
    TcpListener,
    decode_local_update,
    decode_register,
    deserialize_params,
    encode_local_update,
    encode_register,
    recv_frame,
    send_frame,
    serialize_params,
    tcp_connect,
)

log = logging.getLogger(__name__)


class ClientUpdate(Prefab, frozen=True):
    """
    A client's parameters after one round of local training.
    """
    client_id: str
    round: int
    params: dict = attribute(compare=False)
    sample_count: int
    mean_loss: float
    train_accuracy: float

    def payload(self):
        return encode_local_update(
            self.round, self.sample_count, self.mean_loss, self.train_accuracy, self.params
        )


class RoundReport(Prefab, frozen=True, dict_method=True):
    round: int
    clients: tuple
    bytes_sent: int
    bytes_received: int
    wall_time_sec: float
    test_accuracy: float | None = None


class ClientSummary(Prefab, frozen=True, dict_method=True):
    """
    What one client did over a run, as seen from the client.

    :param train_time_sec: wall time spent in local training
    :param cpu_time_sec: CPU time of the training thread
    :param peak_rss_bytes: largest resident set size of the client process
                           sampled after each round; clients simulated in
                           one process all see that process
    :param comm: the client's byte counters
    """
    client_id: str = attribute(serialize=False)
    updates_sent: int
    train_time_sec: float
    cpu_time_sec: float = 0.0
    peak_rss_bytes: int | None = None
    comm: dict = attribute(default_factory=dict, serialize=False)


def epoch_seed(seed, round_index, epoch):
    """
    Shuffle seed for one local epoch. Independent of the client, so
    relabelling clients does not change what each shard trains on.
    """
    state = np.random.SeedSequence([seed, round_index, epoch]).generate_state(1)
    return int(state[0])


def aggregate(updates, mode=UNIFORM):
    """
    Average client parameters.

    Sums run in float64 in ascending client id order and are cast back to
    float32 at the end.

    :param updates: ClientUpdate list, all for the same round
    :param mode: "uniform" for the plain mean, "sample-weighted" for
                 the sample count weighted mean
    :return: aggregated params
    """
    if not updates:
        raise AggregationError("Cannot aggregate an empty list of updates")
    if mode not in (UNIFORM, SAMPLE_WEIGHTED):
        raise AggregationError(f"Unknown aggregation mode {mode!r}")
    ordered = sorted(updates, key=lambda u: u.client_id)
    ids = [u.client_id for u in ordered]
    if len(set(ids)) != len(ids):
        raise AggregationError(f"Duplicate client ids in updates: {ids}")
    rounds = {u.round for u in ordered}
    if len(rounds) != 1:
        raise AggregationError(f"Updates come from different rounds {sorted(rounds)}")

    reference = ordered[0].params
    for update in ordered[1:]:
        if list(update.params) != list(reference):
            raise AggregationError(f"Update from {update.client_id!r} has different tensor names")
        for name, tensor in reference.items():
            if np.shape(update.params[name]) != np.shape(tensor):
                raise AggregationError(
                    f"Update from {update.client_id!r} has shape "
                    f"{np.shape(update.params[name])} for {name!r}, expected {np.shape(tensor)}"
                )

    if mode == UNIFORM:
        weights = [1.0] * len(ordered)
        total = float(len(ordered))
    else:
        weights = [float(u.sample_count) for u in ordered]
        total = math.fsum(weights)
        if total <= 0:
            raise AggregationError("Sample weighted aggregation needs a positive sample count")

    result = {}
    for name, tensor in reference.items():
        acc = np.zeros(np.shape(tensor), dtype=np.float64)
        for weight, update in zip(weights, ordered):
            acc += weight * np.asarray(update.params[name], dtype=np.float64)
        result[name] = (acc / total).astype(np.float32)
    return result


def local_update(params, spec, images, labels, epochs, train_config, seed, round_index, client_id=""):
    """
    Train a copy of the global model on one shard for ``epochs`` epochs.

    Adam starts from zero moments every round.

    :return: ClientUpdate with the mean of the epoch metrics
    """
    if epochs < 1:
        raise ConfigError(f"local epochs must be at least 1, got {epochs!r}")
    state = AdamState.fresh(params, train_config)
    losses, accuracies = [], []
    for epoch in range(epochs):
        params, state, metrics = train_epoch(
            params,
            spec,
            state,
            images,
            labels,
            batch_size=train_config.batch_size,
            seed=epoch_seed(seed, round_index, epoch),
        )
        losses.append(metrics.mean_loss)
        accuracies.append(metrics.accuracy)
    return ClientUpdate(
        client_id=client_id,
        round=round_index,
        params=params,
        sample_count=int(len(labels)),
        mean_loss=float(np.mean(losses)),
        train_accuracy=float(np.mean(accuracies)),
    )


# Server side
def _accept_clients(config, listener, timeout, sessions):
    # Fills ``sessions`` in place so the caller can close them on failure
    expected = set(config.client_ids)
    deadline = None if timeout is None else time.monotonic() + timeout
    while len(sessions) < len(expected):
        try:
            remaining = None if deadline is None else deadline - time.monotonic()
            if remaining is not None and remaining <= 0:
                raise TimeoutError(f"Registration window of {timeout} seconds closed")
            channel = listener.accept(timeout=remaining)
        except TimeoutError as e:
            missing = sorted(expected - set(sessions))
            raise RoundAbortError(f"Clients {missing} did not register in time") from e
        try:
            frame = recv_frame(channel, deadline)
            if frame.msg_type != MessageType.REGISTER:
                raise ProtocolError(f"Expected REGISTER, got {frame.msg_type.name}")
            client_id = decode_register(frame.payload)
        except (ProtocolError, ChannelClosed, TimeoutError) as e:
            log.warning("Dropping connection that failed to register: %s", e)
            channel.close()
            continue
        if client_id not in expected or client_id in sessions:
            log.warning("Rejecting registration from unexpected or duplicate client %r", client_id)
            channel.close()
            continue
        sessions[client_id] = channel
        log.info("Client %r registered (%d/%d)", client_id, len(sessions), len(expected))


def _receive_update(client_id, channel, round_index, spec, deadline=None):
    try:
        frame = recv_frame(channel, deadline)
    except ChannelClosed as e:
        raise RoundAbortError(
            f"Client {client_id!r} disconnected during round {round_index}", client_id
        ) from e
    except TimeoutError as e:
        raise RoundAbortError(
            f"Client {client_id!r} timed out in round {round_index}", client_id
        ) from e
    except ProtocolError as e:
        raise RoundAbortError(f"Client {client_id!r} sent a bad frame: {e}", client_id) from e

    if frame.msg_type != MessageType.LOCAL_UPDATE:
        raise RoundAbortError(
            f"Client {client_id!r} sent {frame.msg_type.name} instead of LOCAL_UPDATE", client_id
        )
    try:
        round_tag, count, loss, accuracy, params = decode_local_update(frame.payload)
        check_params(params, spec)
    except (ProtocolError, ShapeError) as e:
        raise RoundAbortError(f"Client {client_id!r} sent a malformed update: {e}", client_id) from e
    if round_tag != round_index:
        raise RoundAbortError(
            f"Client {client_id!r} sent an update for round {round_tag} during round {round_index}",
            client_id,
        )
    return ClientUpdate(client_id, round_tag, params, count, loss, accuracy)


def _collect_updates(sessions, round_index, spec, timeout=None):
    # One deadline for the whole round, however the bytes trickle in
    deadline = None if timeout is None else time.monotonic() + timeout
    with ThreadPoolExecutor(max_workers=len(sessions), thread_name_prefix="fedgaf-recv") as pool:
        futures = {
            pool.submit(_receive_update, cid, channel, round_index, spec, deadline): cid
            for cid, channel in sessions.items()
        }
        done, pending = wait(futures, return_when=FIRST_EXCEPTION)
        failed = [f for f in done if f.exception() is not None]
        if failed:
            # Unblock the remaining receivers before leaving the pool
            for channel in sessions.values():
                channel.close()
            raise failed[0].exception()
        return [f.result() for f in done]


def _close_all(sessions):
    for channel in sessions.values():
        try:
            channel.close()
        except OSError:
            pass


def _client_entries(updates):
    return tuple(
        {
            "id": u.client_id,
            "samples": u.sample_count,
            "mean_loss": u.mean_loss,
            "train_accuracy": u.train_accuracy,
        }
        for u in sorted(updates, key=lambda u: u.client_id)
    )


def _weighted_client_accuracy(updates):
    total = sum(u.sample_count for u in updates)
    if not total:
        return None
    return math.fsum(u.train_accuracy * u.sample_count for u in updates) / total


def run_server(config, listener, test=None, train=None, on_round=None):
    """
    Serve one federated run to the configured clients.

    :param config: FederationConfig
    :param listener: LoopbackListener or TcpListener the clients connect to
    :param test: optional (images, labels) evaluated after the last round
    :param train: optional (images, labels) for the reported train accuracy,
                  otherwise client reported accuracy is used
    :param on_round: callable receiving each RoundReport
    :return: (final params, RunReport)
    """
    spec = config.model
    stats = listener.stats
    timeout = config.transport.timeout_sec
    rounds = []
    last_updates = []

    sessions = {}
    start = time.perf_counter()
    try:
        _accept_clients(config, listener, timeout, sessions)
        params = init_params(spec, config.seed)
        start = time.perf_counter()
        for round_index in range(1, config.rounds + 1):
            round_start = time.perf_counter()
            payload = serialize_params(params)
            for cid in sorted(sessions):
                try:
                    send_frame(sessions[cid], MessageType.GLOBAL_MODEL, payload)
                except ChannelClosed as e:
                    raise RoundAbortError(
                        f"Client {cid!r} disconnected before round {round_index}", cid
                    ) from e

            updates = _collect_updates(sessions, round_index, spec, timeout)
            params = aggregate(updates, config.aggregation)
            last_updates = updates

            test_accuracy = None
            if config.eval_every_round and test is not None:
                _, test_accuracy = evaluate(params, spec, *test)

            report = RoundReport(
                round=round_index,
                clients=_client_entries(updates),
                bytes_sent=stats.bytes_sent,
                bytes_received=stats.bytes_received,
                wall_time_sec=time.perf_counter() - round_start,
                test_accuracy=test_accuracy,
            )
            rounds.append(report)
            log.info(
                "Round %d/%d aggregated over %d clients, %d bytes sent, %d received",
                round_index, config.rounds, len(updates), stats.bytes_sent, stats.bytes_received,
            )
            if on_round is not None:
                on_round(report)

        for cid in sorted(sessions):
            send_frame(sessions[cid], MessageType.DONE)
    except RoundAbortError as e:
        log.error("Run aborted: %s", e)
        e.report = RunReport(
            config=config.as_dict(),
            bytes_sent=stats.bytes_sent,
            bytes_received=stats.bytes_received,
            train_time_sec=time.perf_counter() - start,
            rounds=[r.as_dict() for r in rounds],
            clients=list(_client_entries(last_updates)),
            comm=stats.snapshot(),
            aborted=True,
            abort_reason=str(e),
        )
        raise
    finally:
        _close_all(sessions)
    train_time = time.perf_counter() - start

    test_confusion = evaluate(params, spec, *test)[0] if test is not None else None
    train_confusion = evaluate(params, spec, *train)[0] if train is not None else None
    report = RunReport(
        config=config.as_dict(),
        test_confusion=test_confusion,
        train_confusion=train_confusion,
        client_train_accuracy=_weighted_client_accuracy(last_updates),
        bytes_sent=stats.bytes_sent,
        bytes_received=stats.bytes_received,
        train_time_sec=train_time,
        rounds=[r.as_dict() for r in rounds],
        clients=list(_client_entries(last_updates)),
        comm=stats.snapshot(),
    )
    if report.test_accuracy is not None:
        log.info("Final test accuracy %.4f", report.test_accuracy)
    return params, report


# Client side
def run_client(client_id, channel, images, labels, config=None):
    """
    Register with the server and train until it sends DONE.

    :param client_id: id announced in REGISTER
    :param channel: connected Channel, closed on return
    :param images: shard images (N, 1, S, S)
    :param labels: shard labels
    :param config: FederationConfig with the training settings and model spec
    :return: ClientSummary
    """
    config = config if config is not None else FederationConfig()
    spec = config.model
    sent = 0
    train_time = 0.0
    cpu_time = 0.0
    peak_rss = None
    process = psutil.Process()
    try:
        send_frame(channel, MessageType.REGISTER, encode_register(client_id))
        while True:
            frame = recv_frame(channel)
            if frame.msg_type == MessageType.DONE:
                break
            if frame.msg_type != MessageType.GLOBAL_MODEL:
                raise ProtocolError(f"Client {client_id!r} got unexpected {frame.msg_type.name} frame")
            try:
                params = deserialize_params(frame.payload)
                check_params(params, spec)
            except (DeserializeError, ShapeError) as e:
                raise ProtocolError(f"Received model does not match the local spec: {e}") from e

            round_index = sent + 1
            t0 = time.perf_counter()
            c0 = time.thread_time()
            update = local_update(
                params, spec, images, labels, config.local_epochs, config.train,
                config.seed, round_index, client_id,
            )
            cpu_time += time.thread_time() - c0
            elapsed = time.perf_counter() - t0
            train_time += elapsed
            rss = process.memory_info().rss
            peak_rss = rss if peak_rss is None else max(peak_rss, rss)
            send_frame(channel, MessageType.LOCAL_UPDATE, update.payload())
            sent += 1
            log.info(
                "Client %r round %d: loss %.4f, accuracy %.4f, %.2f s",
                client_id, round_index, update.mean_loss, update.train_accuracy, elapsed,
            )
    except (ChannelClosed, TimeoutError) as e:
        raise ClientAbortError(f"Client {client_id!r} lost its connection: {e}") from e
    finally:
        channel.close()
    return ClientSummary(
        client_id=client_id,
        updates_sent=sent,
        train_time_sec=train_time,
        cpu_time_sec=cpu_time,
        peak_rss_bytes=peak_rss,
        comm=channel.stats.snapshot(),
    )


# Single process harness
def _union(shards):
    images = np.concatenate([s[0] for s in shards])
    labels = np.concatenate([np.asarray(s[1], dtype=np.int64) for s in shards])
    return images, labels


def simulate(config, shards, test=None, train=None, on_round=None):
    """
    Run server and clients in one process.

    Uses loopback channels unless ``config.transport.mode`` is "tcp", in
    which case the clients connect to a localhost socket.

    :param config: FederationConfig
    :param shards: one (images, labels) pair per configured client, in order
    :param test: optional (images, labels) test set
    :param train: optional (images, labels) for train accuracy; defaults to
                  the union of the shards
    :param on_round: callable receiving each RoundReport
    :return: (final params, RunReport)
    """
    shards = list(shards)
    if len(shards) != len(config.clients):
        raise ConfigError(f"{len(config.clients)} clients configured but {len(shards)} shards given")
    empty = [c.id for c, s in zip(config.clients, shards) if len(s[1]) == 0]
    if empty:
        log.warning("Excluding clients with empty shards: %s", empty)
        shards = [s for c, s in zip(config.clients, shards) if c.id not in empty]
        config = config.without_clients(empty)
    if train is None:
        train = _union(shards)

    timeout = config.transport.timeout_sec
    if config.transport.mode == TCP:
        listener = TcpListener("127.0.0.1", 0, timeout=timeout)

        def connect(stats):
            return tcp_connect(listener.address, stats, timeout=2 * timeout)
    elif config.transport.mode == LOOPBACK:
        listener = LoopbackListener(timeout=timeout)

        def connect(stats):
            channel = listener.connect(stats)
            channel.timeout = 2 * timeout
            return channel
    else:  # pragma: no cover
        raise ConfigError(f"Unknown transport mode {config.transport.mode!r}")

    def client_main(client, shard):
        channel = connect(CommStats())
        return run_client(client.id, channel, shard[0], shard[1], config)

    with ThreadPoolExecutor(max_workers=len(shards), thread_name_prefix="fedgaf-client") as pool:
        futures = [pool.submit(client_main, c, s) for c, s in zip(config.clients, shards)]
        try:
            params, report = run_server(config, listener, test=test, train=train, on_round=on_round)
        finally:
            listener.close()
        summaries = [f.result() for f in futures]

    by_id = {s.client_id: s for s in summaries}
    for entry in report.clients:
        if entry["id"] in by_id:
            entry.update(by_id[entry["id"]].as_dict())
    return params, report


def repeat_simulation(config, shards, test=None, repeats=5, train=None, on_round=None):
    """
    Run ``simulate`` with seeds seed, seed + 1, ... and summarize.

    :param on_round: round callback, used for the first repeat only
    :return: (list of (params, RunReport), RepeatSummary)
    """
    if repeats < 1:
        raise ConfigError(f"repeats must be at least 1, got {repeats!r}")
    results = []
    for i in range(repeats):
        params, report = simulate(
            config.replace(seed=config.seed + i),
            shards,
            test=test,
            train=train,
            on_round=on_round if i == 0 else None,
        )
        results.append((params, report))
        log.info("Repeat %d/%d: test accuracy %s", i + 1, repeats, report.test_accuracy)
    return results, summarize_repeats([r for _, r in results])
