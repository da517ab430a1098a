import numpy as np
import pytest

from ducktools.fedgaf.exceptions import ConfigError, ShapeError
from ducktools.fedgaf.neuralkit import (
    ModelSpec,
    check_params,
    forward,
    init_params,
    param_count,
    param_names,
    predict,
    softmax,
    zero_params,
)


def test_default_param_count():
    spec = ModelSpec()
    assert param_count(spec) == 148_293
    shapes = spec.param_shapes()
    assert np.prod(shapes["fc2.weight"]) + np.prod(shapes["fc2.bias"]) == 645
    assert spec.flatten_size == 1024


def test_canonical_names():
    assert param_names(ModelSpec()) == [
        "conv1.weight", "conv1.bias",
        "conv2.weight", "conv2.bias",
        "conv3.weight", "conv3.bias",
        "conv4.weight", "conv4.bias",
        "fc1.weight", "fc1.bias",
        "fc2.weight", "fc2.bias",
    ]


def test_doubling_c1_only_touches_conv1_and_conv2():
    base = ModelSpec().param_shapes()
    wide = ModelSpec(c1=16).param_shapes()
    changed = {name for name in base if base[name] != wide[name]}
    assert changed == {"conv1.weight", "conv1.bias", "conv2.weight"}
    assert param_count(ModelSpec(c1=16)) - param_count(ModelSpec()) == (8 * 49 + 8) + 16 * 8 * 25


def test_spec_validation():
    with pytest.raises(ConfigError):
        ModelSpec(c1=0)
    with pytest.raises(ConfigError):
        ModelSpec(classes=1)
    with pytest.raises(ConfigError):
        ModelSpec(alpha=1.0)


def test_spec_is_frozen():
    spec = ModelSpec()
    with pytest.raises(TypeError):
        spec.c1 = 4


def test_init_is_seeded(tiny_spec):
    a = init_params(tiny_spec, seed=4)
    b = init_params(tiny_spec, seed=4)
    c = init_params(tiny_spec, seed=5)
    for name in a:
        assert a[name].dtype == np.float32
        np.testing.assert_array_equal(a[name], b[name])
    assert not np.array_equal(a["conv1.weight"], c["conv1.weight"])
    assert not a["conv1.bias"].any()


def test_zero_params_give_uniform_softmax(tiny_spec, random_images):
    x, _ = random_images(3)
    logits = forward(zero_params(tiny_spec), tiny_spec, x)
    assert logits.shape == (3, 5)
    np.testing.assert_allclose(softmax(logits), 0.2)


def test_output_shape(random_images):
    spec = ModelSpec()
    x, _ = random_images(4)
    assert forward(init_params(spec), spec, x).shape == (4, 5)


def test_accepts_three_dimensional_batch(tiny_spec, random_images):
    x, _ = random_images(2)
    params = init_params(tiny_spec)
    np.testing.assert_array_equal(forward(params, tiny_spec, x[:, 0]), forward(params, tiny_spec, x))


def test_batch_permutation_equivariance(tiny_spec, random_images):
    x, _ = random_images(6, seed=2)
    params = init_params(tiny_spec, seed=1)
    perm = np.array([3, 0, 5, 1, 4, 2])
    np.testing.assert_allclose(
        forward(params, tiny_spec, x[perm]),
        forward(params, tiny_spec, x)[perm],
        rtol=1e-6,
        atol=1e-6,
    )


def test_predict_matches_forward(tiny_spec, random_images):
    x, _ = random_images(10)
    params = init_params(tiny_spec, seed=9)
    expected = forward(params, tiny_spec, x).argmax(axis=1)
    np.testing.assert_array_equal(predict(params, tiny_spec, x, batch_size=3), expected)


def test_wrong_input_size(tiny_spec):
    with pytest.raises(ShapeError):
        forward(zero_params(tiny_spec), tiny_spec, np.zeros((1, 1, 16, 16)))


def test_check_params(tiny_spec):
    params = zero_params(tiny_spec)
    check_params(params, tiny_spec)

    with pytest.raises(ShapeError):
        check_params(zero_params(ModelSpec()), tiny_spec)

    reordered = dict(reversed(list(params.items())))
    with pytest.raises(ShapeError):
        check_params(reordered, tiny_spec)
