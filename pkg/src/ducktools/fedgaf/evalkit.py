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
Accuracy metrics, run reports and the run directory layout.

Per class accuracy is recall: the diagonal entry over its true class row.
"""
import json
import logging
from pathlib import Path

import numpy as np

from ducktools.classbuilder.prefab import Prefab, attribute

from .exceptions import ConfigError, ReportIOError
from .ingest import NUM_CLASSES, BeatLabel
from .neuralkit import predict, save_checkpoint

log = logging.getLogger(__name__)

CONFIG_FILE = "config.json"
REPORT_JSON = "report.json"
REPORT_MD = "report.md"
MODEL_FILE = "model_final.bin"
ROUNDS_LOG = "rounds.log"

TRAIN_SOURCE_EVALUATED = "evaluated"
TRAIN_SOURCE_CLIENTS = "client-reported"


class ConfusionMatrix(Prefab, frozen=True):
    """
    Counts of true class (rows) against predicted class (columns).
    """
    counts: np.ndarray = attribute(compare=False)

    def __prefab_post_init__(self, counts):
        arr = np.array(counts, dtype=np.int64)
        if arr.ndim != 2 or arr.shape[0] != arr.shape[1]:
            raise ConfigError(f"Confusion matrix must be square, got shape {arr.shape}")
        if (arr < 0).any():
            raise ConfigError("Confusion matrix counts must be non-negative")
        arr.flags.writeable = False
        self.counts = arr

    @classmethod
    def from_predictions(cls, true_labels, predicted, classes=NUM_CLASSES):
        true_labels = np.asarray(true_labels, dtype=np.int64)
        predicted = np.asarray(predicted, dtype=np.int64)
        flat = np.bincount(true_labels * classes + predicted, minlength=classes * classes)
        return cls(flat.reshape(classes, classes))

    @classmethod
    def padded(cls, counts, classes=NUM_CLASSES):
        """
        Place a smaller square matrix in the top left of a classes x classes one.
        """
        small = np.asarray(counts, dtype=np.int64)
        full = np.zeros((classes, classes), dtype=np.int64)
        full[:small.shape[0], :small.shape[1]] = small
        return cls(full)

    @property
    def classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    @property
    def correct(self):
        return int(np.trace(self.counts))

    @property
    def accuracy(self):
        return self.correct / self.total if self.total else None

    def tolist(self):
        return self.counts.tolist()

    def __eq__(self, other):
        if self.__class__ is other.__class__:
            return np.array_equal(self.counts, other.counts)
        return NotImplemented


def evaluate(params, spec, images, labels):
    """
    Classify a test set by logit argmax.

    :param params: model parameters
    :param spec: ModelSpec
    :param images: (N, 1, S, S) array or sequence of GafImage
    :param labels: true class indices
    :return: (ConfusionMatrix, overall accuracy)
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        raise ConfigError("Cannot evaluate on an empty test set")
    predicted = predict(params, spec, images)
    matrix = ConfusionMatrix.from_predictions(labels, predicted, spec.classes)
    return matrix, matrix.accuracy


def per_class_accuracy(matrix, warn=True):
    """
    Recall for each class.

    :param matrix: ConfusionMatrix or square array
    :return: list with one fraction per class, None where the class has no samples
    """
    counts = matrix.counts if isinstance(matrix, ConfusionMatrix) else np.asarray(matrix)
    out = []
    for k in range(counts.shape[0]):
        row = int(counts[k].sum())
        if row == 0:
            if warn:
                log.warning("Class %s has no samples, its accuracy is undefined", _class_name(k))
            out.append(None)
        else:
            out.append(int(counts[k, k]) / row)
    return out


def _class_name(k):
    try:
        return BeatLabel(k).name
    except ValueError:
        return str(k)


class RepeatSummary(Prefab, frozen=True, dict_method=True):
    repeats: int
    test_accuracy_mean: float
    test_accuracy_std: float
    train_accuracy_mean: float | None
    train_accuracy_std: float | None
    per_class_mean: tuple
    per_class_std: tuple


def _mean_std(values):
    values = [v for v in values if v is not None]
    if not values:
        return None, None
    arr = np.array(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def summarize_repeats(reports):
    """
    Mean and population standard deviation over repeated runs.
    Undefined per class entries are skipped.
    """
    if not reports:
        raise ConfigError("No runs to summarize")
    test_mean, test_std = _mean_std([r.test_accuracy for r in reports])
    train_mean, train_std = _mean_std([r.train_accuracy for r in reports])
    per_class = [r.per_class_accuracy for r in reports]
    classes = max(len(p) for p in per_class)
    class_mean, class_std = [], []
    for k in range(classes):
        m, s = _mean_std([p[k] for p in per_class if k < len(p)])
        class_mean.append(m)
        class_std.append(s)
    return RepeatSummary(
        repeats=len(reports),
        test_accuracy_mean=test_mean,
        test_accuracy_std=test_std,
        train_accuracy_mean=train_mean,
        train_accuracy_std=train_std,
        per_class_mean=tuple(class_mean),
        per_class_std=tuple(class_std),
    )


class RunReport(Prefab):
    """
    Outcome of one federated run.

    :param config: config echo as produced by FederationConfig.as_dict
    :param test_confusion: ConfusionMatrix on the test set, None if not evaluated
    :param train_confusion: ConfusionMatrix on the training data, None if not evaluated
    :param client_train_accuracy: sample weighted client reported accuracy of the last round
    :param bytes_sent: server frame bytes sent
    :param bytes_received: server frame bytes received
    :param train_time_sec: wall time of the rounds
    :param rounds: per round log entries (dicts)
    :param clients: per client summaries (dicts)
    :param comm: CommStats snapshot of the server
    :param aborted: True if the run stopped before its last round
    :param abort_reason: why it stopped
    :param repeats: RepeatSummary dict for repeated experiments
    """
    config: dict = attribute(default_factory=dict)
    test_confusion: ConfusionMatrix | None = None
    train_confusion: ConfusionMatrix | None = None
    client_train_accuracy: float | None = None
    bytes_sent: int = 0
    bytes_received: int = 0
    train_time_sec: float = 0.0
    rounds: list = attribute(default_factory=list)
    clients: list = attribute(default_factory=list)
    comm: dict = attribute(default_factory=dict)
    aborted: bool = False
    abort_reason: str | None = None
    repeats: dict | None = None

    @property
    def test_accuracy(self):
        return self.test_confusion.accuracy if self.test_confusion is not None else None

    @property
    def train_accuracy(self):
        if self.train_confusion is not None:
            return self.train_confusion.accuracy
        return self.client_train_accuracy

    @property
    def train_accuracy_source(self):
        if self.train_confusion is not None:
            return TRAIN_SOURCE_EVALUATED
        if self.client_train_accuracy is not None:
            return TRAIN_SOURCE_CLIENTS
        return None

    @property
    def per_class_accuracy(self):
        if self.test_confusion is None:
            return []
        return per_class_accuracy(self.test_confusion, warn=False)

    def to_dict(self):
        per_class = self.per_class_accuracy
        return {
            "train_accuracy": self.train_accuracy,
            "train_accuracy_source": self.train_accuracy_source,
            "test_accuracy": self.test_accuracy,
            "per_class_accuracy": {_class_name(k): v for k, v in enumerate(per_class)},
            "confusion_matrix": self.test_confusion.tolist() if self.test_confusion is not None else None,
            "train_confusion_matrix": (
                self.train_confusion.tolist() if self.train_confusion is not None else None
            ),
            "client_train_accuracy": self.client_train_accuracy,
            "bytes_sent": self.bytes_sent,
            "bytes_received": self.bytes_received,
            "train_time_sec": self.train_time_sec,
            "rounds": list(self.rounds),
            "clients": list(self.clients),
            "comm": dict(self.comm),
            "aborted": self.aborted,
            "abort_reason": self.abort_reason,
            "repeats": self.repeats,
            "config": dict(self.config),
        }

    @classmethod
    def from_dict(cls, data):
        def matrix(key):
            value = data.get(key)
            return ConfusionMatrix(value) if value is not None else None

        try:
            return cls(
                config=data.get("config", {}),
                test_confusion=matrix("confusion_matrix"),
                train_confusion=matrix("train_confusion_matrix"),
                client_train_accuracy=data.get("client_train_accuracy"),
                bytes_sent=int(data["bytes_sent"]),
                bytes_received=int(data["bytes_received"]),
                train_time_sec=float(data.get("train_time_sec", 0.0)),
                rounds=list(data.get("rounds", [])),
                clients=list(data.get("clients", [])),
                comm=dict(data.get("comm", {})),
                aborted=bool(data.get("aborted", False)),
                abort_reason=data.get("abort_reason"),
                repeats=data.get("repeats"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"Malformed report: {e}") from e


# Rendering
def _pct(value):
    return "n/a" if value is None else f"{value * 100:.2f}%"


def _num(value, fmt="{:.4f}"):
    return "n/a" if value is None else fmt.format(value)


def render_json(report):
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def render_markdown(report):
    """
    Human readable summary with the same fields as report.json.
    """
    per_class = report.per_class_accuracy
    class_names = ", ".join(_class_name(k) for k in range(len(per_class))) or "none"
    lines = [
        "# Federated run report",
        "",
        "| Metric | Value |",
        "| --- | --- |",
        f"| Train accuracy | {_pct(report.train_accuracy)} ({report.train_accuracy_source or 'n/a'}) |",
        f"| Test accuracy | {_pct(report.test_accuracy)} |",
        f"| Accuracy by class ({class_names}) | {', '.join(_pct(v) for v in per_class) or 'n/a'} |",
        f"| Total send size | {report.bytes_sent} bytes |",
        f"| Total receive size | {report.bytes_received} bytes |",
        f"| Training time | {report.train_time_sec:.2f} s |",
        f"| Rounds completed | {len(report.rounds)} |",
        f"| Aborted | {'yes: ' + str(report.abort_reason) if report.aborted else 'no'} |",
        "",
    ]

    if report.rounds:
        lines += [
            "## Rounds",
            "",
            "| Round | Bytes sent | Bytes received | Time (s) | Test accuracy |",
            "| --- | --- | --- | --- | --- |",
        ]
        for entry in report.rounds:
            lines.append(
                f"| {entry['round']} | {entry['bytes_sent']} | {entry['bytes_received']} "
                f"| {entry['wall_time_sec']:.2f} | {_pct(entry.get('test_accuracy'))} |"
            )
        lines.append("")

    if report.clients:
        lines += [
            "## Clients",
            "",
            "| Client | Samples | Mean loss | Train accuracy | Train time (s) "
            "| CPU time (s) | Peak memory (MiB) |",
            "| --- | --- | --- | --- | --- | --- | --- |",
        ]
        for entry in report.clients:
            rss = entry.get("peak_rss_bytes")
            lines.append(
                f"| {entry['id']} | {entry['samples']} | {_num(entry.get('mean_loss'))} "
                f"| {_pct(entry.get('train_accuracy'))} "
                f"| {_num(entry.get('train_time_sec'), '{:.2f}')} "
                f"| {_num(entry.get('cpu_time_sec'), '{:.2f}')} "
                f"| {_num(None if rss is None else rss / 2**20, '{:.1f}')} |"
            )
        lines.append("")

    if report.test_confusion is not None:
        names = [_class_name(k) for k in range(report.test_confusion.classes)]
        lines += [
            "## Confusion matrix (rows true, columns predicted)",
            "",
            "| | " + " | ".join(names) + " |",
            "| --- " * (len(names) + 1) + "|",
        ]
        for name, row in zip(names, report.test_confusion.tolist()):
            lines.append(f"| {name} | " + " | ".join(str(v) for v in row) + " |")
        lines.append("")

    if report.repeats:
        rep = report.repeats
        lines += [
            f"## Repeats ({rep['repeats']} runs)",
            "",
            f"- Test accuracy: {_pct(rep['test_accuracy_mean'])} ± {_pct(rep['test_accuracy_std'])}",
            f"- Train accuracy: {_pct(rep['train_accuracy_mean'])} ± {_pct(rep['train_accuracy_std'])}",
            "- Accuracy by class: " + ", ".join(
                f"{_pct(m)} ± {_pct(s)}" for m, s in zip(rep["per_class_mean"], rep["per_class_std"])
            ),
            "",
        ]

    lines += [
        "## Config",
        "",
        "```json",
        json.dumps(report.config, indent=2, sort_keys=True),
        "```",
        "",
    ]
    return "\n".join(lines)


def _write(path, text):
    try:
        Path(path).write_text(text, encoding="utf-8", newline="\n")
    except OSError as e:
        raise ReportIOError(f"Could not write {path}: {e}") from e


def emit_report(report, out_dir, formats=("json", "md")):
    """
    Write report.json and/or report.md into a directory.

    Writing the same report twice produces identical bytes.

    :return: list of written paths
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportIOError(f"Could not create run directory {out_dir}: {e}") from e
    written = []
    for fmt in formats:
        if fmt == "json":
            path = out_dir / REPORT_JSON
            _write(path, render_json(report))
        elif fmt == "md":
            path = out_dir / REPORT_MD
            _write(path, render_markdown(report))
        else:
            raise ConfigError(f"Unknown report format {fmt!r}")
        written.append(path)
    return written


def load_report(path):
    path = Path(path)
    if path.is_dir():
        path = path / REPORT_JSON
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ReportIOError(f"Could not read {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Report {path} is not valid JSON: {e}") from e
    return RunReport.from_dict(data)


class RoundLog:
    """
    Appends one JSON line per finished round to ``rounds.log``.

    Created empty, so a run that aborts leaves the rounds it finished.
    """
    def __init__(self, path):
        self.path = Path(path)
        _write(self.path, "")

    def __call__(self, round_report):
        entry = round_report.as_dict() if hasattr(round_report, "as_dict") else round_report
        try:
            with self.path.open("a", encoding="utf-8", newline="\n") as f:
                f.write(json.dumps(entry, sort_keys=True) + "\n")
        except OSError as e:
            raise ReportIOError(f"Could not append to {self.path}: {e}") from e


def prepare_run_dir(out_dir, config):
    """
    Create the run directory, write the config echo and start rounds.log.

    :return: RoundLog for the run
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise ReportIOError(f"Could not create run directory {out_dir}: {e}") from e
    _write(out_dir / CONFIG_FILE, json.dumps(config.as_dict(), indent=2, sort_keys=True) + "\n")
    return RoundLog(out_dir / ROUNDS_LOG)


def finish_run_dir(out_dir, report, spec=None, params=None):
    """
    Write the reports and, when given, the final model checkpoint.
    """
    out_dir = Path(out_dir)
    written = emit_report(report, out_dir)
    if params is not None:
        path = out_dir / MODEL_FILE
        try:
            save_checkpoint(path, spec, params)
        except OSError as e:
            raise ReportIOError(f"Could not write {path}: {e}") from e
        written.append(path)
    return written


def format_accuracy_summary(matrix):
    """
    Short text block of overall and per class accuracy for the console.
    """
    lines = [f"Overall accuracy: {_pct(matrix.accuracy)} ({matrix.correct}/{matrix.total})"]
    for k, value in enumerate(per_class_accuracy(matrix)):
        row = int(matrix.counts[k].sum())
        lines.append(f"  {_class_name(k)}: {_pct(value)} ({int(matrix.counts[k, k])}/{row})")
    return "\n".join(lines)
