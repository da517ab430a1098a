import numpy as np
import pytest

from ducktools.fedgaf.config import ClientSpec, FederationConfig
from ducktools.fedgaf.gaf import EncodeConfig, encode_manifest, images_to_arrays
from ducktools.fedgaf.ingest import encode_format212, synth_dataset
from ducktools.fedgaf.neuralkit import ModelSpec, TrainConfig


@pytest.fixture(scope="session")
def tiny_spec():
    # Narrow layers keep federated runs fast, input stays 32x32
    return ModelSpec(c1=2, c2=4, c3=4, c4=4, fc=16)


@pytest.fixture(scope="session")
def synth_arrays():
    """
    60 encoded synthetic beats, 12 per class, as (images, labels).
    """
    manifest = synth_dataset(per_class=12, window=64, seed=3)
    images = encode_manifest(manifest, EncodeConfig())
    return images_to_arrays(images)


@pytest.fixture
def random_images():
    def make(n, seed=0, classes=5):
        rng = np.random.default_rng(seed)
        x = rng.uniform(-1, 1, size=(n, 1, 32, 32)).astype(np.float32)
        y = rng.integers(0, classes, size=n)
        return x, y
    return make


@pytest.fixture
def small_config(tiny_spec):
    def make(ids=("a", "b"), shares=None, **changes):
        shares = shares or [1 / len(ids)] * len(ids)
        shares[-1] = 1.0 - sum(shares[:-1])
        config = FederationConfig(
            rounds=2,
            local_epochs=1,
            clients=tuple(ClientSpec(i, s) for i, s in zip(ids, shares)),
            seed=5,
            train=TrainConfig(batch_size=8),
            model=tiny_spec,
        )
        return config.replace(**changes) if changes else config
    return make


def encode_annotations(entries):
    """
    Build an MIT annotation stream from (sample_index, code) pairs,
    inserting SKIP entries for gaps wider than 1023 samples.
    """
    out = bytearray()
    time = 0
    for index, code in entries:
        gap = index - time
        if gap > 1023:
            out += ((59 << 10) | 0).to_bytes(2, "little")
            skip = gap
            out += bytes([(skip >> 16) & 0xFF, (skip >> 24) & 0xFF, skip & 0xFF, (skip >> 8) & 0xFF])
            gap = 0
        out += ((code << 10) | gap).to_bytes(2, "little")
        time = index
    out += b"\x00\x00"
    return bytes(out)


@pytest.fixture
def annotation_bytes():
    return encode_annotations


@pytest.fixture
def write_record(tmp_path):
    """
    Write a two signal format 212 record with gain 200 and baseline 1024.
    """
    def write(name, raw_channel0, annotations, directory=None):
        directory = directory or tmp_path
        raw0 = np.asarray(raw_channel0, dtype=np.int64)
        raw1 = np.zeros_like(raw0)
        interleaved = np.stack([raw0, raw1], axis=1).reshape(-1)
        (directory / f"{name}.dat").write_bytes(encode_format212(interleaved))
        header = (
            f"{name} 2 360 {raw0.size}\n"
            f"{name}.dat 212 200 11 1024 0 0 0 MLII\n"
            f"{name}.dat 212 200 11 1024 0 0 0 V5\n"
        )
        (directory / f"{name}.hea").write_text(header)
        (directory / f"{name}.atr").write_bytes(encode_annotations(annotations))
        return directory
    return write
