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
Reading WFDB records and turning them into labelled beat manifests.

Covers the three files of a WFDB record (``.hea`` text header, format 212
``.dat`` signal and MIT ``.atr`` annotations), fixed window beat
extraction around annotated R peaks, stratified train/test splitting,
stratified client sharding and the ``FGDS`` manifest container.
"""
import logging
import math
import re
import struct
from concurrent.futures import ProcessPoolExecutor
from enum import IntEnum
from pathlib import Path

import numpy as np

from ducktools.classbuilder.prefab import Prefab, attribute

from .exceptions import ConfigError, ParseError, SerializeError

log = logging.getLogger(__name__)

DEFAULT_SAMPLING_RATE = 360.0
DEFAULT_GAIN = 200.0
DEFAULT_WINDOW = 128

MANIFEST_MAGIC = b"FGDS"
MANIFEST_VERSION = 1

# MIT annotation control codes
_SKIP = 59
_NUM = 60
_SUB = 61
_CHAN = 62
_AUX = 63


class BeatLabel(IntEnum):
    N = 0
    L = 1
    R = 2
    A = 3
    V = 4

    @classmethod
    def parse_list(cls, text):
        """
        Parse a comma separated list of class letters such as ``"N,L,R,A,V"``.

        :param text: comma separated class letters
        :return: tuple of BeatLabel in the order given
        """
        labels = []
        for item in text.split(","):
            item = item.strip().upper()
            if not item:
                continue
            try:
                labels.append(cls[item])
            except KeyError:
                raise ConfigError(f"Unknown beat class {item!r}") from None
        if not labels:
            raise ConfigError("At least one beat class is required")
        return tuple(labels)


NUM_CLASSES = len(BeatLabel)

# Standard WFDB beat codes: NORMAL, LBBB, RBBB, APC, PVC
DEFAULT_CODE_MAP = {
    1: BeatLabel.N,
    2: BeatLabel.L,
    3: BeatLabel.R,
    8: BeatLabel.A,
    5: BeatLabel.V,
}


class SignalSpec(Prefab, frozen=True):
    file_name: str
    storage_format: int
    gain: float = DEFAULT_GAIN
    baseline: int = 0
    description: str = ""


class RecordHeader(Prefab, frozen=True):
    record_name: str
    num_signals: int
    sampling_rate: float = DEFAULT_SAMPLING_RATE
    num_samples: int = 0
    signals: tuple = ()

    def __prefab_post_init__(self):
        if self.num_signals < 1:
            raise ParseError(
                f"Record {self.record_name!r} declares {self.num_signals} signals, "
                f"at least 1 is required"
            )
        if self.sampling_rate <= 0:
            raise ParseError(
                f"Record {self.record_name!r} has non-positive sampling rate "
                f"{self.sampling_rate}"
            )
        if self.num_samples < 0:
            raise ParseError(
                f"Record {self.record_name!r} has negative sample count {self.num_samples}"
            )
        for sig in self.signals:
            if sig.gain <= 0:
                raise ParseError(
                    f"Signal {sig.description or sig.file_name!r} has non-positive gain {sig.gain}"
                )


class Annotation(Prefab, frozen=True):
    sample_index: int
    code: int


class BeatRecord(Prefab, frozen=True):
    """
    One extracted heartbeat.

    ``samples`` is stored as a read-only float32 array in mV.
    """
    samples: np.ndarray = attribute(compare=False)
    label: BeatLabel
    record_name: str
    r_peak_index: int

    def __prefab_post_init__(self, samples):
        arr = np.array(samples, dtype=np.float32).reshape(-1)
        if arr.size == 0:
            raise ConfigError("A beat needs at least one sample")
        if not np.all(np.isfinite(arr)):
            raise ConfigError(
                f"Beat at {self.record_name}:{self.r_peak_index} has non-finite samples"
            )
        arr.flags.writeable = False
        self.samples = arr

    def __eq__(self, other):
        if self.__class__ is other.__class__:
            return (
                self.label == other.label
                and self.record_name == other.record_name
                and self.r_peak_index == other.r_peak_index
                and np.array_equal(self.samples, other.samples)
            )
        return NotImplemented


class DatasetManifest(Prefab, frozen=True):
    """
    An ordered collection of beats with the tags of where it came from.

    :param beats: the beats, all of the same length
    :param split: "train", "test" or None for an unsplit dataset
    :param shard: client id for a client shard, otherwise None
    :param seed: the seed used to produce this manifest, if any
    """
    beats: tuple = ()
    split: str | None = None
    shard: str | None = None
    seed: int | None = None

    def __prefab_post_init__(self, beats):
        beats = tuple(beats)
        if beats:
            width = beats[0].samples.size
            for beat in beats:
                if beat.samples.size != width:
                    raise ConfigError(
                        f"Beat {beat.record_name}:{beat.r_peak_index} has "
                        f"{beat.samples.size} samples, expected {width}"
                    )
        self.beats = beats

    def __len__(self):
        return len(self.beats)

    def __iter__(self):
        return iter(self.beats)

    @property
    def window(self):
        return self.beats[0].samples.size if self.beats else 0

    def labels(self):
        return np.array([int(b.label) for b in self.beats], dtype=np.int64)

    def class_counts(self):
        """
        :return: int array of length 5, counts in N, L, R, A, V order
        """
        return np.bincount(self.labels(), minlength=NUM_CLASSES)

    def samples_matrix(self):
        if not self.beats:
            return np.zeros((0, 0), dtype=np.float32)
        return np.stack([b.samples for b in self.beats])


# Header parsing
_GAIN_RE = re.compile(
    r"^(?P<gain>[-+]?[0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)"
    r"(?:\((?P<baseline>[-+]?\d+)\))?"
    r"(?:/(?P<units>\S+))?$"
)
_FORMAT_RE = re.compile(r"^(?P<fmt>\d+)")


def _parse_signal_line(line):
    fields = line.split()
    if len(fields) < 2:
        raise ParseError(f"Signal line {line!r} needs a file name and a format")

    file_name = fields[0]
    fmt_match = _FORMAT_RE.match(fields[1])
    if not fmt_match:
        raise ParseError(f"Signal line {line!r} has an invalid format field {fields[1]!r}")
    storage_format = int(fmt_match["fmt"])

    gain = DEFAULT_GAIN
    baseline = None
    if len(fields) > 2:
        gain_match = _GAIN_RE.match(fields[2])
        if not gain_match:
            raise ParseError(f"Signal line {line!r} has an invalid gain field {fields[2]!r}")
        gain = float(gain_match["gain"]) or DEFAULT_GAIN
        if gain_match["baseline"] is not None:
            baseline = int(gain_match["baseline"])

    # Without an explicit baseline WFDB falls back to the ADC zero
    if baseline is None:
        if len(fields) > 4:
            try:
                baseline = int(fields[4])
            except ValueError:
                raise ParseError(
                    f"Signal line {line!r} has an invalid ADC zero {fields[4]!r}"
                ) from None
        else:
            baseline = 0

    description = " ".join(fields[8:])

    return SignalSpec(
        file_name=file_name,
        storage_format=storage_format,
        gain=gain,
        baseline=baseline,
        description=description,
    )


def parse_header(text_lines):
    """
    Parse a WFDB ``.hea`` header.

    :param text_lines: header text, or an iterable of its lines
    :return: RecordHeader
    """
    if isinstance(text_lines, str):
        text_lines = text_lines.splitlines()

    lines = []
    for raw in text_lines:
        line = raw.strip()
        if line and not line.startswith("#"):
            lines.append(line)

    if not lines:
        raise ParseError("Header contains no record line")

    fields = lines[0].split()
    if len(fields) < 2:
        raise ParseError(
            f"Record line {lines[0]!r} needs at least a record name and a signal count"
        )

    record_name = fields[0].split("/")[0]
    try:
        num_signals = int(fields[1])
    except ValueError:
        raise ParseError(f"Invalid signal count {fields[1]!r}") from None

    sampling_rate = DEFAULT_SAMPLING_RATE
    num_samples = 0
    try:
        if len(fields) > 2:
            # "360/...(...)": counter frequency and base counter are ignored
            sampling_rate = float(re.split(r"[/(]", fields[2])[0])
        if len(fields) > 3:
            num_samples = int(fields[3])
    except ValueError as e:
        raise ParseError(f"Invalid record line {lines[0]!r}: {e}") from e

    signal_lines = lines[1:]
    if len(signal_lines) != num_signals:
        raise ParseError(
            f"Record {record_name!r} declares {num_signals} signals "
            f"but has {len(signal_lines)} signal lines"
        )

    return RecordHeader(
        record_name=record_name,
        num_signals=num_signals,
        sampling_rate=sampling_rate,
        num_samples=num_samples,
        signals=tuple(_parse_signal_line(line) for line in signal_lines),
    )


# Format 212
def decode_format212_raw(byte_stream, num_samples):
    """
    Unpack 12 bit two's complement sample pairs into raw ADC values.

    :param byte_stream: bytes-like object holding the packed samples
    :param num_samples: number of samples to decode
    :return: int16 array of length num_samples
    """
    if num_samples < 0:
        raise ParseError(f"Negative sample count {num_samples}")
    pairs = -(-num_samples // 2)
    needed = pairs * 3
    if len(byte_stream) < needed:
        raise ParseError(
            f"Format 212 stream holds {len(byte_stream)} bytes, "
            f"{needed} are needed for {num_samples} samples"
        )
    if num_samples == 0:
        return np.zeros(0, dtype=np.int16)

    packed = np.frombuffer(byte_stream, dtype=np.uint8, count=needed)
    packed = packed.reshape(-1, 3).astype(np.int16)

    raw = np.empty(pairs * 2, dtype=np.int16)
    raw[0::2] = packed[:, 0] | ((packed[:, 1] & 0x0F) << 8)
    raw[1::2] = packed[:, 2] | ((packed[:, 1] & 0xF0) << 4)
    raw[raw >= 2048] -= 4096

    return raw[:num_samples]


def decode_format212(byte_stream, num_samples, gain=DEFAULT_GAIN, baseline=0):
    """
    Decode a format 212 stream into physical units.

    :param byte_stream: packed samples
    :param num_samples: number of samples to decode, odd counts drop the
                        trailing half pair
    :param gain: ADC units per mV
    :param baseline: ADC value of 0 mV
    :return: float64 array of mV values
    """
    if gain <= 0:
        raise ParseError(f"Gain must be positive, got {gain}")
    raw = decode_format212_raw(byte_stream, num_samples)
    return (raw.astype(np.float64) - baseline) / gain


def encode_format212(raw_samples):
    """
    Pack raw ADC values into format 212. Odd counts are padded with a zero.

    :param raw_samples: integer values in [-2048, 2047]
    :return: packed bytes
    """
    raw = np.asarray(raw_samples, dtype=np.int64).reshape(-1)
    if raw.size and (raw.min() < -2048 or raw.max() > 2047):
        raise SerializeError("Format 212 samples must lie in [-2048, 2047]")
    if raw.size % 2:
        raw = np.append(raw, 0)

    unsigned = raw & 0xFFF
    first, second = unsigned[0::2], unsigned[1::2]

    packed = np.empty((first.size, 3), dtype=np.uint8)
    packed[:, 0] = first & 0xFF
    packed[:, 1] = ((first >> 8) & 0x0F) | (((second >> 8) & 0x0F) << 4)
    packed[:, 2] = second & 0xFF
    return packed.tobytes()


# Annotations
def parse_annotations(byte_stream):
    """
    Decode an MIT format annotation stream.

    Control entries (SKIP, NUM, SUB, CHAN, AUX) are consumed, every other
    entry advances the clock by its interval and is emitted.

    :param byte_stream: contents of an ``.atr`` file
    :return: list of Annotation with absolute sample indices
    """
    data = bytes(byte_stream)
    size = len(data)
    pos = 0
    time = 0
    annotations = []

    while pos < size:
        if pos + 2 > size:
            raise ParseError(f"Annotation stream truncated at byte {pos}")
        word = data[pos] | (data[pos + 1] << 8)
        pos += 2
        code = word >> 10
        interval = word & 0x3FF

        if code == 0 and interval == 0:
            break

        if code == _SKIP:
            if pos + 4 > size:
                raise ParseError(f"SKIP entry truncated at byte {pos}")
            # PDP-11 long: high word first, each word little endian
            skip = (
                (data[pos] << 16) | (data[pos + 1] << 24)
                | data[pos + 2] | (data[pos + 3] << 8)
            )
            if skip >= 2**31:
                skip -= 2**32
            if time + skip < 0:
                raise ParseError(f"SKIP entry at byte {pos} moves before the record start")
            time += skip
            pos += 4
        elif code == _AUX:
            length = interval + (interval & 1)
            if pos + length > size:
                raise ParseError(f"AUX entry truncated at byte {pos}")
            pos += length
        elif code in (_NUM, _SUB, _CHAN):
            pass
        else:
            time += interval
            annotations.append(Annotation(sample_index=time, code=code))

    return annotations


# Beat extraction
def extract_beats(signal, annotations, window=DEFAULT_WINDOW, code_map=None, record_name=""):
    """
    Cut a window of samples centred on each labelled annotation.

    Beats whose window runs past either end of the record are dropped.

    :param signal: 1D channel, or a 2D (samples, channels) array of which
                   channel 0 is used
    :param annotations: Annotation list for the record
    :param window: even window length W, the beat covers [r - W/2, r + W/2)
    :param code_map: annotation code to BeatLabel mapping
    :param record_name: provenance stored on each beat
    :return: (list of BeatRecord, number of dropped boundary beats)
    """
    if window <= 0 or window % 2:
        raise ConfigError(f"Beat window must be a positive even number, got {window}")
    if code_map is None:
        code_map = DEFAULT_CODE_MAP

    sig = np.asarray(signal, dtype=np.float64)
    if sig.ndim == 2:
        sig = sig[:, 0]
    half = window // 2
    length = sig.shape[0]

    beats = []
    dropped = 0
    for ann in annotations:
        label = code_map.get(ann.code)
        if label is None:
            continue
        start = ann.sample_index - half
        stop = start + window
        if start < 0 or stop > length:
            dropped += 1
            continue
        segment = sig[start:stop]
        if not np.all(np.isfinite(segment)):
            dropped += 1
            continue
        beats.append(
            BeatRecord(
                samples=segment,
                label=BeatLabel(label),
                record_name=record_name,
                r_peak_index=ann.sample_index,
            )
        )

    return beats, dropped


def read_record(directory, record_name, annotator="atr"):
    """
    Read one WFDB record triplet.

    :param directory: folder holding the record files
    :param record_name: record name without extension, eg "100"
    :param annotator: annotation file extension
    :return: (RecordHeader, channel 0 signal in mV, list of Annotation)
    """
    directory = Path(directory)
    header = parse_header((directory / f"{record_name}.hea").read_text())

    first = header.signals[0]
    if first.storage_format != 212:
        raise ParseError(
            f"Record {record_name!r} uses format {first.storage_format}, only 212 is supported"
        )

    # Signals stored in the same file are interleaved sample by sample
    channels = sum(1 for s in header.signals if s.file_name == first.file_name)
    data = (directory / first.file_name).read_bytes()

    num_samples = header.num_samples
    if num_samples == 0:
        num_samples = (len(data) * 2 // 3) // channels

    raw = decode_format212_raw(data, num_samples * channels)
    raw = raw.reshape(num_samples, channels)[:, 0]
    signal = (raw.astype(np.float64) - first.baseline) / first.gain

    annotations = parse_annotations((directory / f"{record_name}.{annotator}").read_bytes())
    return header, signal, annotations


class IngestStats(Prefab, frozen=True):
    records: int = 0
    annotations: int = 0
    beats: int = 0
    dropped: int = 0
    empty_records: int = 0


def _ingest_record(job):
    # Runs in worker processes, so only plain data crosses the boundary
    directory, record_name, window, code_map = job
    _, signal, annotations = read_record(directory, record_name)
    beats, dropped = extract_beats(signal, annotations, window, code_map, record_name)
    plain = [(b.samples, int(b.label), b.r_peak_index) for b in beats]
    return record_name, plain, dropped, len(annotations)


def ingest_directory(
    directory,
    window=DEFAULT_WINDOW,
    classes=tuple(BeatLabel),
    max_per_class=None,
    seed=0,
    workers=1,
):
    """
    Extract beats from every record in a directory.

    Records are processed independently (optionally in worker processes)
    and merged in record name order.

    :param directory: folder of ``.hea``/``.dat``/``.atr`` triplets
    :param window: beat window length
    :param classes: beat classes to keep
    :param max_per_class: optional cap per class, applied with ``seed``
    :param seed: seed for the cap
    :param workers: number of worker processes, 1 runs in process
    :return: (DatasetManifest, IngestStats)
    """
    directory = Path(directory)
    names = sorted(p.stem for p in directory.glob("*.hea"))
    if not names:
        raise ConfigError(f"No WFDB headers found in {str(directory)!r}")

    keep = set(classes)
    code_map = {code: label for code, label in DEFAULT_CODE_MAP.items() if label in keep}
    jobs = [(str(directory), name, window, code_map) for name in names]

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_ingest_record, jobs))
    else:
        results = [_ingest_record(job) for job in jobs]

    beats = []
    total_dropped = 0
    total_annotations = 0
    empty = 0
    for record_name, plain, dropped, annotation_count in results:
        if annotation_count == 0:
            log.warning("Record %s has no annotations", record_name)
            empty += 1
        total_dropped += dropped
        total_annotations += annotation_count
        beats.extend(
            BeatRecord(samples, BeatLabel(label), record_name, r_peak)
            for samples, label, r_peak in plain
        )
        log.debug("Record %s: %d beats, %d dropped", record_name, len(plain), dropped)

    manifest = DatasetManifest(beats, seed=seed)
    if max_per_class is not None:
        manifest = cap_per_class(manifest, max_per_class, seed)

    stats = IngestStats(
        records=len(names),
        annotations=total_annotations,
        beats=len(manifest),
        dropped=total_dropped,
        empty_records=empty,
    )
    log.info(
        "Ingested %d records: %d beats kept, %d boundary beats dropped",
        stats.records, stats.beats, stats.dropped,
    )
    return manifest, stats


# Splitting and partitioning
def largest_remainder(total, fractions):
    """
    Split an integer total in proportion to ``fractions``.

    Floors every quota then hands the leftover units to the largest
    remainders, ties going to the lower index.

    :param total: non-negative integer to distribute
    :param fractions: proportions, expected to sum to 1
    :return: list of integer counts summing to ``total``
    """
    quotas = [total * f for f in fractions]
    counts = [math.floor(q) for q in quotas]
    leftover = total - sum(counts)

    if leftover >= 0:
        order = sorted(range(len(quotas)), key=lambda i: (-(quotas[i] - counts[i]), i))
        for i in order[:leftover]:
            counts[i] += 1
    else:
        order = sorted(range(len(quotas)), key=lambda i: (quotas[i] - counts[i], -i))
        for i in order[:-leftover]:
            counts[i] -= 1
    return counts


def _indices_by_class(manifest):
    labels = manifest.labels()
    return [np.flatnonzero(labels == k) for k in range(NUM_CLASSES)]


def _subset(manifest, indices, **tags):
    return DatasetManifest(
        [manifest.beats[i] for i in sorted(indices)],
        split=tags.get("split", manifest.split),
        shard=tags.get("shard", manifest.shard),
        seed=tags.get("seed", manifest.seed),
    )


def split_train_test(manifest, train_fraction=0.5, seed=0):
    """
    Stratified, seeded train/test split.

    Each class contributes floor(count * fraction) beats to training, with
    largest-remainder rounding bringing the total to
    floor(total * fraction + 0.5).

    :param manifest: DatasetManifest holding all five classes
    :param train_fraction: share of beats used for training, in (0, 1)
    :param seed: shuffle seed
    :return: (train manifest, test manifest)
    """
    if not 0 < train_fraction < 1:
        raise ConfigError(f"Train fraction must lie in (0, 1), got {train_fraction}")

    by_class = _indices_by_class(manifest)
    counts = [idx.size for idx in by_class]
    missing = [BeatLabel(k).name for k, c in enumerate(counts) if c == 0]
    if missing:
        raise ConfigError(f"Classes {', '.join(missing)} have no beats")

    total = sum(counts)
    quotas = [c * train_fraction for c in counts]
    train_counts = [math.floor(q) for q in quotas]
    leftover = math.floor(total * train_fraction + 0.5) - sum(train_counts)
    order = sorted(range(NUM_CLASSES), key=lambda k: (-(quotas[k] - train_counts[k]), k))
    for k in order:
        if leftover <= 0:
            break
        if train_counts[k] < counts[k]:
            train_counts[k] += 1
            leftover -= 1

    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for idx, n_train in zip(by_class, train_counts):
        shuffled = idx[rng.permutation(idx.size)]
        train_idx.extend(shuffled[:n_train].tolist())
        test_idx.extend(shuffled[n_train:].tolist())

    train = _subset(manifest, train_idx, split="train", seed=seed)
    test = _subset(manifest, test_idx, split="test", seed=seed)
    log.info("Split %d beats into %d train / %d test", total, len(train), len(test))
    return train, test


def validate_shares(shares):
    shares = [float(s) for s in shares]
    if not shares:
        raise ConfigError("At least one share is required")
    if any(s <= 0 for s in shares):
        raise ConfigError(f"Shares must be positive, got {shares}")
    if abs(sum(shares) - 1.0) > 1e-9:
        raise ConfigError(f"Shares must sum to 1, got {sum(shares)!r}")
    return shares


def partition_clients(train, shares, seed=0, shard_ids=None):
    """
    Stratified partition of a training manifest into client shards.

    :param train: training DatasetManifest
    :param shares: positive fractions summing to 1, one per client
    :param seed: shuffle seed
    :param shard_ids: optional shard names, default ``shard-<i>``
    :return: list of shard DatasetManifest, one per share
    """
    shares = validate_shares(shares)
    if shard_ids is None:
        shard_ids = [f"shard-{i}" for i in range(len(shares))]
    elif len(shard_ids) != len(shares):
        raise ConfigError(f"{len(shard_ids)} shard ids given for {len(shares)} shares")

    rng = np.random.default_rng(seed)
    assigned = [[] for _ in shares]
    for idx in _indices_by_class(train):
        shuffled = idx[rng.permutation(idx.size)]
        start = 0
        for shard, count in enumerate(largest_remainder(idx.size, shares)):
            assigned[shard].extend(shuffled[start:start + count].tolist())
            start += count

    shards = [
        _subset(train, indices, shard=shard_id, seed=seed)
        for shard_id, indices in zip(shard_ids, assigned)
    ]
    for shard in shards:
        log.info("Shard %s: %d beats %s", shard.shard, len(shard), shard.class_counts().tolist())
    return shards


def cap_per_class(manifest, max_per_class, seed=0):
    """
    Keep at most ``max_per_class`` beats of each class, chosen by seed.
    """
    if max_per_class < 1:
        raise ConfigError(f"Per class cap must be at least 1, got {max_per_class}")
    rng = np.random.default_rng(seed)
    keep = []
    for idx in _indices_by_class(manifest):
        if idx.size > max_per_class:
            idx = idx[rng.permutation(idx.size)[:max_per_class]]
        keep.extend(idx.tolist())
    return _subset(manifest, keep)


def synth_dataset(
    num_classes=NUM_CLASSES,
    per_class=200,
    window=DEFAULT_WINDOW,
    seed=0,
    noise=0.1,
    variation=1.0,
):
    """
    Generate a separable synthetic beat set for desk-scale experiments.

    Class k is a sine making about k + 1 cycles over the window, plus
    gaussian noise with standard deviation ``noise`` times its amplitude.
    Each beat also gets its own phase, a frequency offset of up to 10%,
    an amplitude between 0.7 and 1.3 and a linear baseline drift, all
    scaled by ``variation``. A handful of beats per class is then not
    enough to recognise the rest, while a few hundred are.

    :param noise: relative noise level
    :param variation: 0.0 gives identical beats within a class before noise,
                      1.0 the full per beat spread
    :return: DatasetManifest with ``per_class`` beats of each class
    """
    if num_classes != NUM_CLASSES:
        raise ConfigError(f"Synthetic data has exactly {NUM_CLASSES} classes, got {num_classes}")
    if per_class < 1:
        raise ConfigError(f"per_class must be at least 1, got {per_class}")
    if window < 2:
        raise ConfigError(f"Window must be at least 2 samples, got {window}")
    if noise < 0:
        raise ConfigError(f"Noise level must be non-negative, got {noise}")
    if not 0.0 <= variation <= 1.0:
        raise ConfigError(f"Variation must lie in [0, 1], got {variation}")

    rng = np.random.default_rng(seed)
    t = np.arange(window) / window
    beats = []
    for k in range(num_classes):
        size = (per_class, 1)
        freq = (k + 1) * (1.0 + variation * rng.uniform(-0.1, 0.1, size=size))
        phase = variation * rng.uniform(0.0, 2 * np.pi, size=size)
        amplitude = 1.0 + variation * rng.uniform(-0.3, 0.3, size=size)
        drift = variation * rng.uniform(-0.5, 0.5, size=size)
        jitter = rng.normal(0.0, noise, size=(per_class, window))
        rows = amplitude * (np.sin(2 * np.pi * freq * t + phase) + jitter) + drift * (t - 0.5)
        for i in range(per_class):
            beats.append(
                BeatRecord(
                    samples=rows[i],
                    label=BeatLabel(k),
                    record_name="synth",
                    r_peak_index=k * per_class + i,
                )
            )
    return DatasetManifest(beats, seed=seed)


# FGDS container
def manifest_to_bytes(manifest):
    parts = [MANIFEST_MAGIC, struct.pack("<BH", MANIFEST_VERSION, manifest.window)]
    for beat in manifest.beats:
        name = beat.record_name.encode("utf-8")
        if len(name) > 255:
            raise SerializeError(f"Record name {beat.record_name!r} exceeds 255 bytes")
        if not 0 <= beat.r_peak_index < 2**32:
            raise SerializeError(f"R peak index {beat.r_peak_index} does not fit in 32 bits")
        parts.append(struct.pack("<BIB", int(beat.label), beat.r_peak_index, len(name)))
        parts.append(name)
        parts.append(beat.samples.astype("<f4").tobytes())
    return b"".join(parts)


def manifest_from_bytes(data, **tags):
    """
    Decode an ``FGDS`` container.

    :param data: container bytes
    :param tags: split/shard/seed tags for the resulting manifest
    :return: DatasetManifest
    """
    view = memoryview(data)
    if len(view) < 7 or bytes(view[:4]) != MANIFEST_MAGIC:
        raise ParseError("Not an FGDS manifest")
    version, window = struct.unpack_from("<BH", view, 4)
    if version != MANIFEST_VERSION:
        raise ParseError(f"Unsupported FGDS version {version}")

    pos = 7
    beats = []
    sample_bytes = 4 * window
    while pos < len(view):
        if pos + 6 > len(view):
            raise ParseError(f"FGDS beat header truncated at byte {pos}")
        label, r_peak, name_len = struct.unpack_from("<BIB", view, pos)
        pos += 6
        end = pos + name_len + sample_bytes
        if end > len(view):
            raise ParseError(f"FGDS beat truncated at byte {pos}")
        try:
            beat_label = BeatLabel(label)
        except ValueError:
            raise ParseError(f"Invalid beat label {label} at byte {pos - 6}") from None
        try:
            name = bytes(view[pos:pos + name_len]).decode("utf-8")
        except UnicodeDecodeError as e:
            raise ParseError(f"Record name at byte {pos} is not valid UTF-8") from e
        pos += name_len
        samples = np.frombuffer(view[pos:end], dtype="<f4")
        pos = end
        beats.append(BeatRecord(samples, beat_label, name, r_peak))
    return DatasetManifest(beats, **tags)


def write_manifest(path, manifest):
    Path(path).write_bytes(manifest_to_bytes(manifest))


def read_manifest(path, **tags):
    return manifest_from_bytes(Path(path).read_bytes(), **tags)
