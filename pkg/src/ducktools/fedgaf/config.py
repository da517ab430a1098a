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
Federation configuration records and their JSON form.
"""
import json
import logging
import math
from pathlib import Path

from ducktools.classbuilder.prefab import Prefab, get_attributes

from .exceptions import ConfigError
from .neuralkit import ModelSpec, TrainConfig

log = logging.getLogger(__name__)

UNIFORM = "uniform"
SAMPLE_WEIGHTED = "sample-weighted"
AGGREGATION_MODES = (UNIFORM, SAMPLE_WEIGHTED)

LOOPBACK = "loopback"
TCP = "tcp"
TRANSPORT_MODES = (LOOPBACK, TCP)

SHARE_TOLERANCE = 1e-9

_TOP_KEYS = {
    "rounds", "local_epochs", "lr", "beta1", "beta2", "eps", "batch_size",
    "aggregation", "seed", "eval_every_round", "clients", "model", "transport",
}
_TRAIN_KEYS = ("lr", "beta1", "beta2", "eps", "batch_size")


class ClientSpec(Prefab, frozen=True, dict_method=True):
    id: str
    share: float

    def __prefab_post_init__(self):
        if not self.id or len(self.id.encode("utf-8")) > 255:
            raise ConfigError(f"Client id {self.id!r} must be 1 to 255 bytes of UTF-8")
        if not (self.share > 0 and math.isfinite(self.share)):
            raise ConfigError(f"Client {self.id!r} has invalid share {self.share!r}")


class TransportConfig(Prefab, frozen=True, dict_method=True):
    mode: str = LOOPBACK
    timeout_sec: float = 600.0

    def __prefab_post_init__(self):
        if self.mode not in TRANSPORT_MODES:
            raise ConfigError(f"Unknown transport mode {self.mode!r}, expected one of {TRANSPORT_MODES}")
        if not self.timeout_sec > 0:
            raise ConfigError(f"Transport timeout must be positive, got {self.timeout_sec!r}")


class FederationConfig(Prefab, frozen=True):
    """
    Everything that decides the outcome of a federated run.

    :param rounds: number of federated rounds R
    :param local_epochs: epochs per client per round E
    :param clients: ClientSpec tuple, shares summing to 1
    :param aggregation: "uniform" or "sample-weighted"
    :param seed: seed for initialization, splits and shuffles
    :param train: optimizer and batch settings
    :param model: ModelSpec
    :param transport: TransportConfig
    :param eval_every_round: evaluate the global model after every round
    """
    rounds: int = 10
    local_epochs: int = 10
    clients: tuple = (ClientSpec("server", 1.0),)
    aggregation: str = UNIFORM
    seed: int = 0
    train: TrainConfig = TrainConfig()
    model: ModelSpec = ModelSpec()
    transport: TransportConfig = TransportConfig()
    eval_every_round: bool = False

    def __prefab_post_init__(self, clients):
        clients = tuple(clients)
        if not isinstance(self.rounds, int) or self.rounds < 1:
            raise ConfigError(f"rounds must be a positive integer, got {self.rounds!r}")
        if not isinstance(self.local_epochs, int) or self.local_epochs < 1:
            raise ConfigError(f"local_epochs must be a positive integer, got {self.local_epochs!r}")
        if not clients:
            raise ConfigError("At least one client is required")
        ids = [c.id for c in clients]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"Client ids must be unique, got {ids}")
        total = math.fsum(c.share for c in clients)
        if abs(total - 1.0) > SHARE_TOLERANCE:
            raise ConfigError(f"Client shares sum to {total!r}, expected 1")
        if self.aggregation not in AGGREGATION_MODES:
            raise ConfigError(
                f"Unknown aggregation {self.aggregation!r}, expected one of {AGGREGATION_MODES}"
            )
        if not isinstance(self.seed, int):
            raise ConfigError(f"seed must be an integer, got {self.seed!r}")
        self.clients = clients

    @property
    def client_ids(self):
        return [c.id for c in self.clients]

    @property
    def shares(self):
        return [c.share for c in self.clients]

    @classmethod
    def from_dict(cls, data):
        """
        Build a config from its JSON form. Missing keys take defaults,
        unknown keys are rejected.
        """
        if not isinstance(data, dict):
            raise ConfigError("Config must be a JSON object")
        unknown = set(data) - _TOP_KEYS
        if unknown:
            raise ConfigError(f"Unknown config keys: {sorted(unknown)}")
        try:
            train = TrainConfig(**{k: data[k] for k in _TRAIN_KEYS if k in data})
            model = ModelSpec(**data.get("model", {}))
            transport = TransportConfig(**data.get("transport", {}))
            kwargs = {
                k: data[k]
                for k in ("rounds", "local_epochs", "aggregation", "seed", "eval_every_round")
                if k in data
            }
            if "clients" in data:
                kwargs["clients"] = tuple(
                    ClientSpec(id=str(c["id"]), share=float(c["share"])) for c in data["clients"]
                )
        except (TypeError, KeyError) as e:
            raise ConfigError(f"Malformed config: {e}") from e
        return cls(train=train, model=model, transport=transport, **kwargs)

    def as_dict(self):
        return {
            "rounds": self.rounds,
            "local_epochs": self.local_epochs,
            **self.train.as_dict(),
            "aggregation": self.aggregation,
            "seed": self.seed,
            "eval_every_round": self.eval_every_round,
            "clients": [c.as_dict() for c in self.clients],
            "model": self.model.as_dict(),
            "transport": self.transport.as_dict(),
        }

    def replace(self, **changes):
        values = {name: getattr(self, name) for name in get_attributes(type(self))}
        values.update(changes)
        return type(self)(**values)

    def without_clients(self, ids):
        """
        Drop clients by id and rescale the remaining shares to sum to 1.

        :param ids: iterable of client ids to drop
        :return: new FederationConfig
        """
        ids = set(ids)
        unknown = ids - set(self.client_ids)
        if unknown:
            raise ConfigError(f"Cannot exclude unknown clients {sorted(unknown)}")
        kept = [c for c in self.clients if c.id not in ids]
        if not kept:
            raise ConfigError("Excluding these clients leaves nobody to train")
        total = math.fsum(c.share for c in kept)
        rescaled = [ClientSpec(c.id, c.share / total) for c in kept]
        # Push any rounding residue onto the largest share
        residue = 1.0 - math.fsum(c.share for c in rescaled)
        if residue:
            big = max(range(len(rescaled)), key=lambda i: rescaled[i].share)
            rescaled[big] = ClientSpec(rescaled[big].id, rescaled[big].share + residue)
        log.info("Excluded clients %s, %d remain", sorted(ids), len(rescaled))
        return self.replace(clients=tuple(rescaled))


def load_config(path):
    """
    Read a FederationConfig from a JSON file.
    """
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {path} is not valid JSON: {e}") from e
    return FederationConfig.from_dict(data)


def dump_config(config):
    return json.dumps(config.as_dict(), indent=2, sort_keys=True) + "\n"
