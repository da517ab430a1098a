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
Command line entry point.

Exit codes: 0 on success, 1 for usage errors, 2 for runtime errors.
"""
import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import TRANSPORT_MODES, FederationConfig, TransportConfig, load_config
from .evalkit import (
    emit_report,
    evaluate,
    finish_run_dir,
    format_accuracy_summary,
    load_report,
    prepare_run_dir,
    render_markdown,
)
from .exceptions import ConfigError, FedGafError, RoundAbortError
from .fedcore import repeat_simulation, run_client, run_server, simulate
from .gaf import (
    DEFAULT_IMAGE_SIZE,
    GADF,
    GASF,
    RESIZE_BILINEAR,
    RESIZE_PAA,
    EncodeConfig,
    encode_manifest,
    image_arrays_from_bytes,
    write_images,
)
from .ingest import (
    DEFAULT_WINDOW,
    BeatLabel,
    ingest_directory,
    partition_clients,
    read_manifest,
    split_train_test,
    synth_dataset,
    write_manifest,
)
from .neuralkit import load_checkpoint
from .transport import TcpListener, parse_address, tcp_connect

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # Usage problems exit with 1, leaving 2 for runtime failures
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _csv(text):
    return [item.strip() for item in text.split(",") if item.strip()]


def _float_list(text):
    try:
        return [float(v) for v in _csv(text)]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma separated numbers, got {text!r}") from None


# Options whose values may start with a minus sign
_SIGNED_OPTIONS = ("--range",)


def _join_signed_values(argv):
    # argparse reads "--range -1,1" as two flags unless the value is attached
    out = []
    args = iter(argv)
    for arg in args:
        if arg in _SIGNED_OPTIONS:
            value = next(args, None)
            out.append(arg if value is None else f"{arg}={value}")
        else:
            out.append(arg)
    return out


def _load_images(path):
    pixels, labels = image_arrays_from_bytes(Path(path).read_bytes())
    return pixels[:, None, :, :], labels


def _load_config(args):
    config = load_config(args.config) if getattr(args, "config", None) else FederationConfig()
    if getattr(args, "seed", None) is not None:
        config = config.replace(seed=args.seed)
    return config


# Data preparation
def _cmd_ingest(args):
    manifest, stats = ingest_directory(
        args.data_dir,
        window=args.window,
        classes=BeatLabel.parse_list(args.classes),
        max_per_class=args.max_per_class,
        seed=args.seed,
        workers=args.workers,
    )
    write_manifest(args.out, manifest)
    print(
        f"{stats.records} records, {stats.beats} beats "
        f"{manifest.class_counts().tolist()}, {stats.dropped} dropped -> {args.out}"
    )


def _cmd_synth(args):
    manifest = synth_dataset(
        per_class=args.per_class, window=args.window, seed=args.seed,
        noise=args.noise, variation=args.variation,
    )
    write_manifest(args.out, manifest)
    print(f"{len(manifest)} synthetic beats -> {args.out}")


def _cmd_split(args):
    manifest = read_manifest(args.input)
    train, test = split_train_test(manifest, args.train_fraction, args.seed)
    write_manifest(args.train, train)
    write_manifest(args.test, test)
    print(f"train {len(train)} -> {args.train}, test {len(test)} -> {args.test}")


def _cmd_partition(args):
    train = read_manifest(args.input, split="train")
    if args.config:
        config = load_config(args.config)
        shares, ids = config.shares, config.client_ids
    elif args.shares:
        shares = args.shares
        ids = _csv(args.ids) if args.ids else [f"client{i}" for i in range(len(shares))]
    else:
        raise _UsageError("partition needs --shares or --config")

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for shard in partition_clients(train, shares, args.seed, ids):
        path = out_dir / f"{shard.shard}.fgds"
        write_manifest(path, shard)
        print(f"{shard.shard}: {len(shard)} beats -> {path}")


def _cmd_encode(args):
    manifest = read_manifest(args.input)
    cfg = EncodeConfig(
        method=args.method,
        rescale_range=tuple(args.range),
        resize=args.resize,
        output_size=args.size,
    )
    images = encode_manifest(manifest, cfg, workers=args.workers)
    write_images(args.out, images)
    print(f"{len(images)} {cfg.method} images of {cfg.output_size}x{cfg.output_size} -> {args.out}")


# Federation
def _cmd_server(args):
    config = _load_config(args)
    host, port = parse_address(args.bind)
    test = _load_images(args.test) if args.test else None
    train = _load_images(args.train) if args.train else None

    round_log = prepare_run_dir(args.out, config)
    listener = TcpListener(host, port, timeout=config.transport.timeout_sec)
    log.info("Listening on %s:%d for %d clients", *listener.address, len(config.clients))
    try:
        params, report = run_server(config, listener, test=test, train=train, on_round=round_log)
    except RoundAbortError as e:
        if e.report is not None:
            finish_run_dir(args.out, e.report)
        raise
    finally:
        listener.close()
    finish_run_dir(args.out, report, config.model, params)
    print(render_markdown(report))


def _cmd_client(args):
    config = _load_config(args)
    images, labels = _load_images(args.shard)
    channel = tcp_connect(parse_address(args.connect), timeout=2 * config.transport.timeout_sec)
    summary = run_client(args.id, channel, images, labels, config)
    rss = "n/a" if summary.peak_rss_bytes is None else f"{summary.peak_rss_bytes / 2**20:.1f} MiB"
    print(
        f"{summary.client_id}: sent {summary.updates_sent} updates, trained "
        f"{summary.train_time_sec:.2f} s ({summary.cpu_time_sec:.2f} s CPU), peak memory {rss}"
    )


def _cmd_simulate(args):
    if args.repeats < 1:
        raise _UsageError(f"--repeats must be at least 1, got {args.repeats}")
    config = _load_config(args)
    if args.transport:
        config = config.replace(
            transport=TransportConfig(args.transport, config.transport.timeout_sec)
        )
    paths = _csv(args.shards)
    if len(paths) != len(config.clients):
        raise ConfigError(f"{len(config.clients)} clients configured but {len(paths)} shards given")
    shards = [_load_images(p) for p in paths]

    if args.exclude:
        excluded = set(_csv(args.exclude))
        shards = [s for cid, s in zip(config.client_ids, shards) if cid not in excluded]
        config = config.without_clients(excluded)

    test = _load_images(args.test) if args.test else None
    round_log = prepare_run_dir(args.out, config)
    try:
        if args.repeats > 1:
            results, summary = repeat_simulation(
                config, shards, test=test, repeats=args.repeats, on_round=round_log
            )
            params, report = results[0]
            report.repeats = summary.as_dict()
        else:
            params, report = simulate(config, shards, test=test, on_round=round_log)
    except RoundAbortError as e:
        if e.report is not None:
            finish_run_dir(args.out, e.report)
        raise
    finish_run_dir(args.out, report, config.model, params)
    print(render_markdown(report))


# Results
def _cmd_eval(args):
    spec, params = load_checkpoint(args.model)
    images, labels = _load_images(args.test)
    matrix, _ = evaluate(params, spec, images, labels)
    print(format_accuracy_summary(matrix))


def _cmd_report(args):
    report = load_report(args.run_dir)
    emit_report(report, args.out or args.run_dir)
    print(render_markdown(report))


def build_parser():
    common = _Parser(add_help=False)
    common.add_argument(
        "--log-level",
        default=argparse.SUPPRESS,
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="logging level (default INFO)",
    )
    common.add_argument(
        "-v", "--verbose", action="store_true", default=argparse.SUPPRESS,
        help="shorthand for --log-level DEBUG",
    )

    parser = _Parser(
        prog="fedgaf",
        description="Federated ECG beat classification on Gramian Angular Field images.",
        parents=[common],
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("ingest", parents=[common], help="extract beats from WFDB records")
    p.add_argument("--data-dir", required=True, help="folder of .hea/.dat/.atr records")
    p.add_argument("--out", required=True, help="output FGDS manifest")
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--classes", default="N,L,R,A,V")
    p.add_argument("--max-per-class", type=int, default=None)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic beat set")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--variation", type=float, default=1.0, help="per beat spread, 0 to 1")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("split", parents=[common], help="stratified train/test split")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--train-fraction", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("partition", parents=[common], help="stratified client shards")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--shares", type=_float_list, default=None, help="e.g. 0.5,0.49,0.01")
    p.add_argument("--ids", default=None, help="shard ids, comma separated")
    p.add_argument("--config", default=None, help="take ids and shares from a config file")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_partition)

    p = sub.add_parser("encode", parents=[common], help="encode beats as GAF images")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--method", choices=[GASF, GADF], default=GASF)
    p.add_argument("--resize", choices=[RESIZE_BILINEAR, RESIZE_PAA], default=RESIZE_BILINEAR)
    p.add_argument("--size", type=int, default=DEFAULT_IMAGE_SIZE)
    p.add_argument("--range", type=_float_list, default=[-1.0, 1.0], help="-1,1 or 0,1")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=_cmd_encode)

    p = sub.add_parser("server", parents=[common], help="run the federation server over TCP")
    p.add_argument("--bind", required=True, help="HOST:PORT")
    p.add_argument("--config", default=None)
    p.add_argument("--test", default=None, help="FGIM test images")
    p.add_argument("--train", default=None, help="FGIM images for train accuracy")
    p.add_argument("--out", required=True, help="run directory")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_server)

    p = sub.add_parser("client", parents=[common], help="run one federation client over TCP")
    p.add_argument("--connect", required=True, help="HOST:PORT")
    p.add_argument("--shard", required=True, help="FGIM shard images")
    p.add_argument("--id", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_client)

    p = sub.add_parser("simulate", parents=[common], help="run server and clients in one process")
    p.add_argument("--config", default=None)
    p.add_argument("--shards", required=True, help="FGIM shards in client order, comma separated")
    p.add_argument("--test", default=None)
    p.add_argument("--out", default="run", help="run directory")
    p.add_argument("--repeats", type=int, default=1)
    p.add_argument("--exclude", default=None, help="client ids to leave out")
    p.add_argument("--transport", choices=TRANSPORT_MODES, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("eval", parents=[common], help="evaluate a model checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--test", required=True)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("report", parents=[common], help="re-render a run report")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out", default=None, help="write the reports here instead")
    p.set_defaults(func=_cmd_report)

    return parser


def _configure_logging(args):
    level = "DEBUG" if getattr(args, "verbose", False) else getattr(args, "log_level", "INFO")
    logging.basicConfig(
        level=level,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )


def main(argv=None):
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_help(sys.stderr)
        return EXIT_USAGE

    try:
        args = parser.parse_args(_join_signed_values(argv))
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    if getattr(args, "func", None) is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE

    _configure_logging(args)
    try:
        args.func(args)
    except _UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"fedgaf: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (FedGafError, OSError) as e:
        print(f"fedgaf: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK
