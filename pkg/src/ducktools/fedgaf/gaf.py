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
Gramian Angular Field encoding of beats into small square images.

A beat is min-max rescaled, read as angles phi = arccos(x), and turned into
either the summation field cos(phi_i + phi_j) (GASF) or the difference field
sin(phi_i - phi_j) (GADF). The field is brought to the output size either by
bilinear resizing of the full image or by piecewise aggregate approximation
of the series before the field is built.
"""
import logging
import struct
from concurrent.futures import ProcessPoolExecutor
from functools import partial
from pathlib import Path

import numpy as np

from ducktools.classbuilder.prefab import Prefab, attribute

from .exceptions import ConfigError, EncodeError, ParseError
from .ingest import BeatLabel

log = logging.getLogger(__name__)

GASF = "gasf"
GADF = "gadf"
RESIZE_BILINEAR = "bilinear"
RESIZE_PAA = "paa"

RESCALE_RANGES = ((-1.0, 1.0), (0.0, 1.0))
DEFAULT_IMAGE_SIZE = 32

IMAGES_MAGIC = b"FGIM"
IMAGES_VERSION = 1

# arccos argument slack before a value counts as out of range
_ANGLE_TOLERANCE = 1e-9


class EncodeConfig(Prefab, frozen=True):
    method: str = GASF
    rescale_range: tuple = (-1.0, 1.0)
    resize: str = RESIZE_BILINEAR
    output_size: int = DEFAULT_IMAGE_SIZE

    def __prefab_post_init__(self, rescale_range):
        self.rescale_range = tuple(float(v) for v in rescale_range)
        if self.method not in (GASF, GADF):
            raise ConfigError(f"Unknown GAF method {self.method!r}, use 'gasf' or 'gadf'")
        if self.rescale_range not in RESCALE_RANGES:
            raise ConfigError(
                f"Rescale range must be one of {RESCALE_RANGES}, got {self.rescale_range}"
            )
        if self.resize not in (RESIZE_BILINEAR, RESIZE_PAA):
            raise ConfigError(f"Unknown resize mode {self.resize!r}, use 'bilinear' or 'paa'")
        if self.output_size < 2:
            raise ConfigError(f"Output size must be at least 2, got {self.output_size}")


class GafImage(Prefab, frozen=True):
    pixels: np.ndarray = attribute(compare=False)
    label: BeatLabel
    method: str = GASF

    def __prefab_post_init__(self, pixels):
        arr = np.array(pixels, dtype=np.float32)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise EncodeError(f"GAF images must be square, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)) or arr.min() < -1 or arr.max() > 1:
            raise EncodeError("GAF pixels must be finite and lie in [-1, 1]")
        arr.flags.writeable = False
        self.pixels = arr

    @property
    def size(self):
        return self.pixels.shape[0]

    def __eq__(self, other):
        if self.__class__ is other.__class__:
            return (
                self.label == other.label
                and self.method == other.method
                and np.array_equal(self.pixels, other.pixels)
            )
        return NotImplemented


def rescale_minmax(x, value_range=(-1.0, 1.0)):
    """
    Affinely map [min(x), max(x)] onto ``value_range``.

    A constant series maps to the middle of the range.

    :param x: non-empty finite series
    :param value_range: (low, high) target interval
    :return: float64 array within the range inclusive
    """
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise EncodeError("Cannot rescale an empty series")
    if not np.all(np.isfinite(arr)):
        raise EncodeError("Series contains NaN or infinite values")

    low, high = value_range
    xmin, xmax = arr.min(), arr.max()
    if xmax == xmin:
        return np.full_like(arr, (low + high) / 2)

    scaled = (arr - xmin) / (xmax - xmin) * (high - low) + low
    return np.clip(scaled, low, high)


def _polar(x):
    # cos(phi) and sin(phi) for phi = arccos(x)
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(arr)):
        raise EncodeError("Series contains NaN or infinite values")
    if arr.size and (arr.min() < -1 - _ANGLE_TOLERANCE or arr.max() > 1 + _ANGLE_TOLERANCE):
        raise EncodeError(
            f"Rescaled values must lie in [-1, 1], got [{arr.min()!r}, {arr.max()!r}]"
        )
    cos_phi = np.clip(arr, -1.0, 1.0)
    sin_phi = np.sqrt(np.maximum(0.0, 1.0 - cos_phi * cos_phi))
    return cos_phi, sin_phi


def gasf(x):
    """
    Gramian angular summation field, cos(phi_i + phi_j).

    Evaluated as x_i x_j - sqrt(1 - x_i^2) sqrt(1 - x_j^2), which is exactly
    symmetric.

    :param x: rescaled series with values in [-1, 1]
    :return: n x n float64 matrix
    """
    cos_phi, sin_phi = _polar(x)
    field = np.outer(cos_phi, cos_phi) - np.outer(sin_phi, sin_phi)
    return np.clip(field, -1.0, 1.0)


def gadf(x):
    """
    Gramian angular difference field, sin(phi_i - phi_j).

    :param x: rescaled series with values in [-1, 1]
    :return: n x n antisymmetric float64 matrix with a zero diagonal
    """
    cos_phi, sin_phi = _polar(x)
    field = np.outer(sin_phi, cos_phi) - np.outer(cos_phi, sin_phi)
    return np.clip(field, -1.0, 1.0)


def paa(x, segments):
    """
    Piecewise aggregate approximation with fractional coverage.

    Segment k averages x over [k n/m, (k+1) n/m), counting partially covered
    samples by the covered fraction, so the overall mean is preserved.

    :param x: series of length n
    :param segments: number of output segments m, 1 <= m <= n
    :return: float64 array of length m
    """
    arr = np.asarray(x, dtype=np.float64).reshape(-1)
    n = arr.size
    if not 1 <= segments <= n:
        raise EncodeError(f"PAA needs 1 <= segments <= {n}, got {segments}")
    if segments == n:
        return arr.copy()

    # Work on a grid scaled by m * n so every boundary is an integer
    k = np.arange(segments)[:, None]
    j = np.arange(n)[None, :]
    overlap = np.minimum((k + 1) * n, (j + 1) * segments) - np.maximum(k * n, j * segments)
    weights = np.clip(overlap, 0, None).astype(np.float64)
    return weights @ arr / n


def _bilinear_weights(n, size):
    weights = np.zeros((size, n), dtype=np.float64)
    if n == 1:
        weights[:, 0] = 1.0
        return weights
    if size == 1:
        pos = np.array([(n - 1) / 2])
    else:
        pos = np.arange(size) * (n - 1) / (size - 1)
    lower = np.minimum(np.floor(pos).astype(np.int64), n - 2)
    frac = pos - lower
    rows = np.arange(size)
    weights[rows, lower] = 1.0 - frac
    weights[rows, lower + 1] += frac
    return weights


def resize_bilinear(matrix, size):
    """
    Bilinear resampling on a corner aligned grid.

    :param matrix: 2D array
    :param size: output edge length S
    :return: S x S float64 array within [min, max] of the input
    """
    arr = np.asarray(matrix, dtype=np.float64)
    if arr.ndim != 2 or arr.size == 0:
        raise EncodeError(f"Expected a non-empty 2D matrix, got shape {arr.shape}")
    if size < 1:
        raise EncodeError(f"Output size must be positive, got {size}")
    if arr.shape == (size, size):
        return arr.copy()

    rows = _bilinear_weights(arr.shape[0], size)
    cols = _bilinear_weights(arr.shape[1], size)
    out = rows @ arr @ cols.T
    return np.clip(out, arr.min(), arr.max())


def encode_series(samples, cfg):
    """
    Run the encoding pipeline on a raw series.

    :return: S x S float64 field
    """
    x = rescale_minmax(samples, cfg.rescale_range)
    size = cfg.output_size

    if cfg.resize == RESIZE_PAA and x.size != size:
        x = paa(x, size)

    field = gasf(x) if cfg.method == GASF else gadf(x)

    if cfg.resize == RESIZE_BILINEAR:
        field = resize_bilinear(field, size)
    return field


def encode_beat(beat, cfg=None):
    """
    Encode one beat as a GafImage.

    :param beat: BeatRecord
    :param cfg: EncodeConfig, defaults to GASF, [-1, 1], bilinear, 32
    :return: GafImage
    """
    if cfg is None:
        cfg = EncodeConfig()
    return GafImage(encode_series(beat.samples, cfg), beat.label, cfg.method)


def _encode_chunk(chunk, method, rescale_range, resize, output_size):
    cfg = EncodeConfig(method, rescale_range, resize, output_size)
    return np.stack([encode_series(s, cfg) for s in chunk]).astype(np.float32)


def encode_manifest(manifest, cfg=None, workers=1, chunk_size=512):
    """
    Encode every beat of a manifest, keeping manifest order.

    :param manifest: DatasetManifest
    :param cfg: EncodeConfig
    :param workers: worker processes, 1 encodes in process
    :param chunk_size: beats handed to a worker at a time
    :return: list of GafImage
    """
    if cfg is None:
        cfg = EncodeConfig()
    beats = manifest.beats
    chunks = [
        [b.samples for b in beats[i:i + chunk_size]]
        for i in range(0, len(beats), chunk_size)
    ]
    job = partial(
        _encode_chunk,
        method=cfg.method,
        rescale_range=cfg.rescale_range,
        resize=cfg.resize,
        output_size=cfg.output_size,
    )

    if workers > 1 and len(chunks) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            blocks = list(pool.map(job, chunks))
    else:
        blocks = [job(chunk) for chunk in chunks]

    images = []
    for block, start in zip(blocks, range(0, len(beats), chunk_size)):
        for offset, pixels in enumerate(block):
            images.append(GafImage(pixels, beats[start + offset].label, cfg.method))
    log.info("Encoded %d beats as %dx%d %s images", len(images), cfg.output_size, cfg.output_size, cfg.method)
    return images


def images_to_arrays(images):
    """
    Stack images into a CNN batch.

    :param images: sequence of GafImage
    :return: (float32 array N x 1 x S x S, int64 labels of length N)
    """
    if not images:
        return np.zeros((0, 1, 0, 0), dtype=np.float32), np.zeros(0, dtype=np.int64)
    pixels = np.stack([img.pixels for img in images])[:, None, :, :]
    labels = np.array([int(img.label) for img in images], dtype=np.int64)
    return np.ascontiguousarray(pixels, dtype=np.float32), labels


# FGIM container
def images_to_bytes(images):
    size = images[0].size if images else 0
    header = IMAGES_MAGIC + struct.pack("<BIH", IMAGES_VERSION, len(images), size)
    if not images:
        return header
    for i, img in enumerate(images):
        if img.size != size:
            raise EncodeError(f"Image {i} is {img.size}x{img.size}, expected {size}x{size}")
    record = np.dtype([("label", "u1"), ("pixels", "<f4", (size, size))])
    table = np.zeros(len(images), dtype=record)
    table["label"] = [int(img.label) for img in images]
    table["pixels"] = np.stack([img.pixels for img in images])
    return header + table.tobytes()


def image_arrays_from_bytes(data):
    """
    Decode an ``FGIM`` container straight into arrays.

    :return: (float32 pixels N x S x S, int64 labels)
    """
    view = memoryview(data)
    if len(view) < 11 or bytes(view[:4]) != IMAGES_MAGIC:
        raise ParseError("Not an FGIM image container")
    version, count, size = struct.unpack_from("<BIH", view, 4)
    if version != IMAGES_VERSION:
        raise ParseError(f"Unsupported FGIM version {version}")

    expected = 11 + count * (1 + 4 * size * size)
    if len(view) != expected:
        raise ParseError(f"FGIM container holds {len(view)} bytes, expected {expected}")
    if count == 0:
        return np.zeros((0, size, size), dtype=np.float32), np.zeros(0, dtype=np.int64)
    if size == 0:
        raise ParseError("FGIM container declares images of size 0")

    record = np.dtype([("label", "u1"), ("pixels", "<f4", (size, size))])
    table = np.frombuffer(view, dtype=record, count=count, offset=11)
    labels = table["label"].astype(np.int64)
    if labels.size and labels.max() >= len(BeatLabel):
        raise ParseError(f"Invalid image label {labels.max()}")
    return np.array(table["pixels"], dtype=np.float32), labels


def images_from_bytes(data, method=GASF):
    """
    Decode an ``FGIM`` container into GafImage records.

    The container stores pixels and labels only, not the field type, so
    the caller must say which ``method`` produced the images. Arrays for
    training do not need it, see ``image_arrays_from_bytes``.

    :param method: "gasf" or "gadf", copied onto every image
    :return: list of GafImage
    """
    if method not in (GASF, GADF):
        raise ConfigError(f"Unknown GAF method {method!r}")
    pixels, labels = image_arrays_from_bytes(data)
    return [GafImage(p, BeatLabel(int(lbl)), method) for p, lbl in zip(pixels, labels)]


def write_images(path, images):
    Path(path).write_bytes(images_to_bytes(images))


def read_images(path, method=GASF):
    # FGIM carries no method tag, pass the one used by ``encode``
    return images_from_bytes(Path(path).read_bytes(), method)
