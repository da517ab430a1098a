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
A small numpy CNN: layers with hand written gradients, softmax cross
entropy, Adam and the training loop used by every client.

All layer functions work on batches in NCHW layout and keep the dtype of
their inputs, so the same code trains in float32 and is gradient checked
in float64.
"""
import logging
import math
import struct
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ducktools.classbuilder.prefab import Prefab, attribute

from .exceptions import ConfigError, DeserializeError, ShapeError
from .transport import deserialize_params, serialize_params

log = logging.getLogger(__name__)

INPUT_SIZE = 32
CHECKPOINT_HEADER = struct.Struct("<6Hf")

# (kind, parameter prefix) in execution order
_LAYERS = (
    ("conv", "conv1"),
    ("act", None),
    ("pool", None),
    ("conv", "conv2"),
    ("act", None),
    ("conv", "conv3"),
    ("act", None),
    ("conv", "conv4"),
    ("act", None),
    ("pool", None),
    ("flatten", None),
    ("dense", "fc1"),
    ("act", None),
    ("dense", "fc2"),
)


class ModelSpec(Prefab, frozen=True, dict_method=True):
    """
    Layer widths of the classifier.

    conv1 uses 7x7 kernels, conv2 to conv4 use 5x5, all padded to keep
    the spatial size. Pools follow conv1 and conv4.
    """
    c1: int = 8
    c2: int = 16
    c3: int = 16
    c4: int = 16
    fc: int = 128
    classes: int = 5
    alpha: float = 0.01

    def __prefab_post_init__(self):
        for name in ("c1", "c2", "c3", "c4", "fc"):
            value = getattr(self, name)
            if not 1 <= value <= 0xFFFF:
                raise ConfigError(f"Model width {name}={value!r} must be in 1..65535")
        if not 2 <= self.classes <= 0xFFFF:
            raise ConfigError(f"Model needs at least 2 classes, got {self.classes!r}")
        if not 0 <= self.alpha < 1:
            raise ConfigError(f"LeakyReLU slope must be in [0, 1), got {self.alpha!r}")

    @property
    def flatten_size(self):
        return self.c4 * (INPUT_SIZE // 4) ** 2

    def param_shapes(self):
        """
        :return: dict of parameter name to shape, in canonical order
        """
        return {
            "conv1.weight": (self.c1, 1, 7, 7),
            "conv1.bias": (self.c1,),
            "conv2.weight": (self.c2, self.c1, 5, 5),
            "conv2.bias": (self.c2,),
            "conv3.weight": (self.c3, self.c2, 5, 5),
            "conv3.bias": (self.c3,),
            "conv4.weight": (self.c4, self.c3, 5, 5),
            "conv4.bias": (self.c4,),
            "fc1.weight": (self.fc, self.flatten_size),
            "fc1.bias": (self.fc,),
            "fc2.weight": (self.classes, self.fc),
            "fc2.bias": (self.classes,),
        }


class TrainConfig(Prefab, frozen=True, dict_method=True):
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 32

    def __prefab_post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"Learning rate must be non-negative, got {self.lr!r}")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must be in [0, 1), got {getattr(self, name)!r}")
        if self.eps <= 0:
            raise ConfigError(f"eps must be positive, got {self.eps!r}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got {self.batch_size!r}")


class AdamState(Prefab):
    """
    Adam moments and step counter for one parameter set.

    :param lr: learning rate
    :param beta1: first moment decay
    :param beta2: second moment decay
    :param eps: denominator guard
    :param t: number of steps taken
    :param m: first moments keyed like the parameters
    :param v: second moments keyed like the parameters
    """
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = attribute(default_factory=dict, compare=False)
    v: dict = attribute(default_factory=dict, compare=False)

    @classmethod
    def fresh(cls, params, train_config=None):
        """
        Zero moments shaped like ``params``.
        """
        cfg = train_config if train_config is not None else TrainConfig()
        return cls(
            lr=cfg.lr,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.eps,
            m={k: np.zeros_like(p) for k, p in params.items()},
            v={k: np.zeros_like(p) for k, p in params.items()},
        )


class EpochMetrics(Prefab, frozen=True):
    mean_loss: float
    accuracy: float
    steps: int
    samples: int


# Parameters
def param_names(spec):
    return list(spec.param_shapes())


def param_count(spec):
    """
    Number of trainable scalars for a model spec.
    """
    return sum(math.prod(shape) for shape in spec.param_shapes().values())


def init_params(spec, seed=0):
    """
    He-uniform weights and zero biases, fully determined by ``seed``.

    :param spec: ModelSpec
    :param seed: integer seed
    :return: dict of name to float32 array in canonical order
    """
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".bias"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = math.prod(shape[1:])
            limit = math.sqrt(6.0 / fan_in)
            params[name] = rng.uniform(-limit, limit, size=shape).astype(np.float32)
    return params


def zero_params(spec):
    return {name: np.zeros(shape, dtype=np.float32) for name, shape in spec.param_shapes().items()}


def check_params(params, spec):
    """
    Raise ShapeError unless ``params`` holds exactly the spec's tensors,
    in canonical order and with the expected shapes.
    """
    expected = spec.param_shapes()
    if list(params) != list(expected):
        raise ShapeError(
            f"Parameter names {list(params)} do not match the model {list(expected)}"
        )
    for name, shape in expected.items():
        actual = np.shape(params[name])
        if actual != shape:
            raise ShapeError(f"Parameter {name!r} has shape {actual}, expected {shape}")


# Layers
def _correlate(xp, w):
    # xp: (B, C_in, H+2p, W+2p), w: (C_out, C_in, k, k) -> (B, C_out, H', W')
    k = w.shape[2]
    cols = sliding_window_view(xp, (k, k), axis=(2, 3))
    out = np.tensordot(cols, w, axes=([1, 4, 5], [1, 2, 3]))
    return out.transpose(0, 3, 1, 2), cols


def conv2d_forward(x, w, b, pad=None):
    """
    Stride 1 cross-correlation with zero padding and per channel bias.

    :param x: input batch (B, C_in, H, W)
    :param w: kernels (C_out, C_in, k, k) with odd k
    :param b: bias (C_out,)
    :param pad: zero padding, (k - 1) // 2 keeps the spatial size
    :return: (output (B, C_out, H', W'), cache for conv2d_backward)
    """
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and kernels, got {x.shape} and {w.shape}")
    c_out, c_in, kh, kw = w.shape
    if kh != kw or kh % 2 == 0:
        raise ShapeError(f"conv2d kernels must be square with odd size, got {kh}x{kw}")
    if x.shape[1] != c_in:
        raise ShapeError(f"conv2d input has {x.shape[1]} channels, kernels expect {c_in}")
    if np.shape(b) != (c_out,):
        raise ShapeError(f"conv2d bias has shape {np.shape(b)}, expected ({c_out},)")
    pad = (kh - 1) // 2 if pad is None else pad
    if not 0 <= pad < kh:
        raise ShapeError(f"conv2d padding must be in 0..{kh - 1}, got {pad}")
    if x.shape[2] + 2 * pad < kh or x.shape[3] + 2 * pad < kh:
        raise ShapeError(f"conv2d input {x.shape[2:]} is smaller than the {kh}x{kh} kernel")

    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out, cols = _correlate(xp, w)
    out = out + b[None, :, None, None]
    return out, (cols, w, pad, x.shape)


def conv2d_backward(dout, cache):
    """
    :return: (dx, dw, db)
    """
    cols, w, pad, x_shape = cache
    k = w.shape[2]
    db = dout.sum(axis=(0, 2, 3))
    dw = np.tensordot(dout, cols, axes=([0, 2, 3], [0, 2, 3]))

    # Input gradient is a full correlation of dout with the flipped kernels
    full = k - 1 - pad
    dpad = np.pad(dout, ((0, 0), (0, 0), (full, full), (full, full)))
    dx, _ = _correlate(dpad, w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    return np.ascontiguousarray(dx), dw, db


def leaky_relu_forward(x, alpha=0.01):
    return np.where(x > 0, x, x * alpha), x


def leaky_relu_backward(dout, cache, alpha=0.01):
    # Slope alpha at exactly zero
    x = cache
    return np.where(x > 0, dout, dout * alpha)


def maxpool2d_forward(x):
    """
    2x2 max pooling with stride 2.

    :param x: (B, C, H, W) with even H and W
    :return: (pooled (B, C, H/2, W/2), cache)
    """
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects a 4D batch, got shape {x.shape}")
    bsz, ch, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2d needs even height and width, got {h}x{w}")
    blocks = (
        x.reshape(bsz, ch, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(bsz, ch, h // 2, w // 2, 4)
    )
    # argmax returns the first maximum, in row-major block order
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, (idx, x.shape)


def maxpool2d_backward(dout, cache):
    idx, (bsz, ch, h, w) = cache
    dblocks = np.zeros((bsz, ch, h // 2, w // 2, 4), dtype=dout.dtype)
    np.put_along_axis(dblocks, idx[..., None], dout[..., None], axis=-1)
    return (
        dblocks.reshape(bsz, ch, h // 2, w // 2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(bsz, ch, h, w)
    )


def dense_forward(x, w, b):
    """
    Fully connected layer, ``x @ w.T + b``.

    :param x: (B, in) batch or a single (in,) vector
    :param w: weights (out, in)
    :param b: bias (out,)
    """
    if w.ndim != 2 or x.shape[-1] != w.shape[1] or np.shape(b) != (w.shape[0],):
        raise ShapeError(
            f"dense shapes do not line up: input {x.shape}, weights {w.shape}, bias {np.shape(b)}"
        )
    return x @ w.T + b, x


def dense_backward(dout, cache, w):
    """
    :return: (dx, dw, db)
    """
    x = cache
    if x.ndim == 1:
        return w.T @ dout, np.outer(dout, x), dout
    return dout @ w, dout.T @ x, dout.sum(axis=0)


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """
    Softmax followed by negative log likelihood, stabilised by subtracting
    the row maximum.

    A single logit vector with an integer label gives the loss and the
    gradient ``softmax - onehot``. A (B, K) batch with B labels gives the
    batch mean loss and the gradient of that mean.

    :return: (loss, gradient shaped like logits)
    """
    logits = np.asarray(logits)
    single = logits.ndim == 1
    z2 = np.atleast_2d(logits)
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if y.shape != (z2.shape[0],):
        raise ShapeError(f"{z2.shape[0]} logit rows but labels have shape {y.shape}")
    if y.size and (y.min() < 0 or y.max() >= z2.shape[1]):
        raise ShapeError(f"Labels must lie in 0..{z2.shape[1] - 1}")

    z = z2 - z2.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    rows = np.arange(z2.shape[0])
    losses = -log_p[rows, y]

    grad = np.exp(log_p)
    grad[rows, y] -= 1
    if single:
        return float(losses[0]), grad[0]
    bsz = z2.shape[0]
    return float(losses.mean()), grad / bsz


def adam_step(params, grads, state):
    """
    One Adam update with bias corrected moments.

    The step counter is incremented before bias correction. ``state`` is
    updated in place and returned alongside the new parameters.

    :return: (new params, state)
    """
    if list(params) != list(grads):
        raise ShapeError("Gradient names do not match parameter names")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    correction1 = 1 - b1 ** t
    correction2 = 1 - b2 ** t

    new_params = {}
    for name, p in params.items():
        g = grads[name]
        if np.shape(g) != np.shape(p):
            raise ShapeError(f"Gradient for {name!r} has shape {np.shape(g)}, expected {np.shape(p)}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None or m.shape != p.shape:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        new_params[name] = (p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype, copy=False)
    return new_params, state


# Whole model
def as_batch(images):
    """
    Accept a (B, 1, S, S) array, a (B, S, S) array or a sequence of GafImage.
    """
    if isinstance(images, np.ndarray):
        x = images
    else:
        from .gaf import images_to_arrays
        x, _ = images_to_arrays(list(images))
    if x.ndim == 3:
        x = x[:, None, :, :]
    if x.ndim != 4 or x.shape[1] != 1 or x.shape[2:] != (INPUT_SIZE, INPUT_SIZE):
        raise ShapeError(f"Model input must be (B, 1, {INPUT_SIZE}, {INPUT_SIZE}), got {x.shape}")
    return x


def _run_forward(params, spec, x):
    caches = []
    h = x
    for kind, prefix in _LAYERS:
        if kind == "conv":
            h, cache = conv2d_forward(h, params[f"{prefix}.weight"], params[f"{prefix}.bias"])
        elif kind == "act":
            h, cache = leaky_relu_forward(h, spec.alpha)
        elif kind == "pool":
            h, cache = maxpool2d_forward(h)
        elif kind == "flatten":
            cache = h.shape
            h = h.reshape(h.shape[0], -1)
        else:
            h, cache = dense_forward(h, params[f"{prefix}.weight"], params[f"{prefix}.bias"])
        caches.append(cache)
    return h, caches


def forward(params, spec, images):
    """
    Logits for a batch of images.

    :param params: model parameters matching ``spec``
    :param spec: ModelSpec
    :param images: see as_batch
    :return: logits (B, classes)
    """
    check_params(params, spec)
    logits, _ = _run_forward(params, spec, as_batch(images))
    return logits


def forward_backward(params, spec, images, labels):
    """
    Batch mean loss and its gradient for every parameter.

    :return: (loss, grads in canonical order, logits)
    """
    check_params(params, spec)
    x = as_batch(images)
    logits, caches = _run_forward(params, spec, x)
    loss, dh = softmax_cross_entropy(logits, labels)

    grads = {}
    for (kind, prefix), cache in zip(reversed(_LAYERS), reversed(caches)):
        if kind == "conv":
            dh, grads[f"{prefix}.weight"], grads[f"{prefix}.bias"] = conv2d_backward(dh, cache)
        elif kind == "act":
            dh = leaky_relu_backward(dh, cache, spec.alpha)
        elif kind == "pool":
            dh = maxpool2d_backward(dh, cache)
        elif kind == "flatten":
            dh = dh.reshape(cache)
        else:
            dh, grads[f"{prefix}.weight"], grads[f"{prefix}.bias"] = dense_backward(
                dh, cache, params[f"{prefix}.weight"]
            )

    grads = {name: grads[name].astype(params[name].dtype, copy=False) for name in params}
    return loss, grads, logits


def predict(params, spec, images, batch_size=256):
    """
    Predicted class index for each image, evaluated in fixed size chunks.
    """
    x = as_batch(images)
    check_params(params, spec)
    out = np.zeros(x.shape[0], dtype=np.int64)
    for start in range(0, x.shape[0], batch_size):
        logits, _ = _run_forward(params, spec, x[start:start + batch_size])
        out[start:start + batch_size] = logits.argmax(axis=1)
    return out


def train_epoch(params, spec, state, images, labels, batch_size=32, seed=0):
    """
    One pass over a shard in seeded random order.

    Metrics are taken from the forward pass of each batch, before that
    batch's update.

    :param params: starting parameters
    :param spec: ModelSpec
    :param state: AdamState, updated in place
    :param images: (N, 1, S, S) array
    :param labels: (N,) class indices
    :param batch_size: minibatch size; the last batch may be short
    :param seed: shuffle seed
    :return: (params, state, EpochMetrics)
    """
    x = as_batch(images)
    y = np.asarray(labels, dtype=np.int64)
    n = x.shape[0]
    if n == 0:
        raise ConfigError("Cannot train on an empty shard")
    if y.shape != (n,):
        raise ShapeError(f"{n} images but labels have shape {y.shape}")

    order = np.random.default_rng(seed).permutation(n)
    total_loss = 0.0
    correct = 0
    steps = 0
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        loss, grads, logits = forward_backward(params, spec, x[idx], y[idx])
        params, state = adam_step(params, grads, state)
        total_loss += loss * idx.size
        correct += int((logits.argmax(axis=1) == y[idx]).sum())
        steps += 1

    metrics = EpochMetrics(
        mean_loss=total_loss / n,
        accuracy=correct / n,
        steps=steps,
        samples=n,
    )
    log.debug("Epoch: %d steps, loss %.4f, accuracy %.4f", steps, metrics.mean_loss, metrics.accuracy)
    return params, state, metrics


# Gradient checking
def finite_difference(fn, array, h=1e-3):
    """
    Central difference gradient of a scalar function, in float64.

    :param fn: callable taking an array shaped like ``array``, returning a scalar
    :param array: point to differentiate at
    :param h: step size
    :return: float64 gradient shaped like ``array``
    """
    x = np.array(array, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        upper = float(fn(x))
        flat[i] = original - h
        lower = float(fn(x))
        flat[i] = original
        grad[i] = (upper - lower) / (2 * h)
    return grad.reshape(x.shape)


def max_relative_error(analytic, numeric, floor=1e-8):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = np.maximum(np.abs(a) + np.abs(n), floor)
    return float(np.max(np.abs(a - n) / scale))


# Checkpoints
def encode_checkpoint(spec, params):
    """
    Model spec header followed by the serialized parameters.
    """
    check_params(params, spec)
    header = CHECKPOINT_HEADER.pack(
        spec.c1, spec.c2, spec.c3, spec.c4, spec.fc, spec.classes, spec.alpha
    )
    return header + serialize_params(params)


def decode_checkpoint(data):
    """
    :return: (ModelSpec, params)
    """
    if len(data) < CHECKPOINT_HEADER.size:
        raise DeserializeError(f"Checkpoint of {len(data)} bytes is shorter than its header")
    c1, c2, c3, c4, fc, classes, alpha = CHECKPOINT_HEADER.unpack_from(data, 0)
    try:
        # Shortest decimal form of the stored float32 slope
        spec = ModelSpec(c1, c2, c3, c4, fc, classes, float(str(np.float32(alpha))))
    except ConfigError as e:
        raise DeserializeError(f"Checkpoint holds an invalid model spec: {e}") from e
    params = deserialize_params(memoryview(data)[CHECKPOINT_HEADER.size:])
    try:
        check_params(params, spec)
    except ShapeError as e:
        raise DeserializeError(f"Checkpoint parameters do not fit its spec: {e}") from e
    return spec, params


def save_checkpoint(path, spec, params):
    Path(path).write_bytes(encode_checkpoint(spec, params))


def load_checkpoint(path):
    return decode_checkpoint(Path(path).read_bytes())
