import pytest


@pytest.fixture
def make_shards(synth_arrays):
    """
    Interleaved shards of the synthetic set, so every shard sees every class.
    """
    images, labels = synth_arrays

    def make(n):
        return [(images[i::n], labels[i::n]) for i in range(n)]
    return make


@pytest.fixture
def holdout(synth_arrays):
    images, labels = synth_arrays
    return images[::3], labels[::3]
