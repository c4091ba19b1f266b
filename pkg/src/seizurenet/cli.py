"""Command-line entry point: ``seizurenet {gen,train,eval,serve,stream,rtt}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import evaluation, netservice, pipeline
from .config import ConfigError, RunConfig
from .deepnet import TrainingDivergedError
from .dimred import RankDeficientError
from .signal_data import SegmentFormatError, generate_synthetic_dataset, read_dataset, write_dataset

log = logging.getLogger("seizurenet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
DIMRED_FILE = "dimred.bin"
MODEL_FILE = "model.bin"
REPORT_FILE = "report.txt"
METRICS_FILE = "metrics.kv"
FOLDS_FILE = "folds.tsv"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# --------------------------------------------------------------------------
# Commands; each is callable directly with a RunConfig
# --------------------------------------------------------------------------

def cmd_gen(config: RunConfig, out) -> Path:
    segments = generate_synthetic_dataset(config.gen_config())
    write_dataset(segments, out)
    print(f"wrote {len(segments)} segments and manifest to {out}")
    return Path(out)


def _load(dataset) -> list:
    try:
        return read_dataset(dataset)
    except (OSError, SegmentFormatError) as exc:
        raise DataError(str(exc)) from exc


def _require_both_classes(segments, what: str) -> None:
    if len(segments) < 2 or len({s.label for s in segments}) < 2:
        raise DataError(f"{what} needs at least two segments covering both classes")


def cmd_train(config: RunConfig, dataset, out) -> tuple[Path, Path]:
    segments = _load(dataset)
    _require_both_classes(segments, "training")
    cfg = config.pipeline_config().with_seed(config.seed)
    try:
        model = pipeline.fit_model(segments, cfg)
    except RankDeficientError as exc:
        raise DataError(str(exc)) from exc
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    model_path, dimred_path = out / MODEL_FILE, out / DIMRED_FILE
    pipeline.save_trained(model, model_path, dimred_path, config.to_text())
    acc = pipeline.window_accuracy(model, segments)
    print(f"training window accuracy {acc:.4f}")
    print(f"wrote {dimred_path} and {model_path}")
    return dimred_path, model_path


def cmd_eval(config: RunConfig, dataset, out) -> str:
    segments = _load(dataset)
    _require_both_classes(segments, "evaluation")
    cfg = config.pipeline_config()
    result = evaluation.run_loocv(segments, cfg, config.seed)
    sections = [evaluation.report_text("Proposed method (leave-one-out)", result)]
    kv = evaluation.report_kv("proposed", result)
    if config.baseline:
        base = evaluation.run_baseline(segments, config.baseline_config(), config.seed)
        sections.append(evaluation.report_text("Handcrafted-feature baseline (leave-one-out)", base))
        kv += evaluation.report_kv("baseline", base)
    text = "\n\n".join(sections) + "\n"
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / REPORT_FILE).write_text(text, encoding="utf-8")
    (out / METRICS_FILE).write_text("\n".join(kv) + "\n", encoding="utf-8")
    rows = ["fold\tsegment_id\ttruth\tpredicted\tprobability\tpreictal_votes\tn_windows"]
    rows += [f"{r.fold}\t{r.segment_id}\t{r.truth.name.lower()}\t{r.predicted.name.lower()}\t{r.probability!r}\t"
             f"{r.preictal_votes}\t{r.n_windows}" for r in result.folds]
    (out / FOLDS_FILE).write_text("\n".join(rows) + "\n", encoding="utf-8")
    print(text, end="")
    return text


def cmd_serve(listen: str, model: str, dimred: str, echo_delay_ms: float = 0.0) -> None:
    try:
        server = netservice.serve(listen, model, dimred, echo_delay_ms / 1000)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot start server: {exc}") from exc
    print(f"serving on {server.address}", flush=True)
    try:
        server.join()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()


def cmd_stream(server: str, files, timeout: float = 10.0) -> list:
    results = netservice.stream_client(server, files, timeout)
    for r in results:
        print(f"{r.segment_id}\t{r.label.name.lower()}\t{r.probability:.6f}\t{r.rtt_ms:.3f} ms")
    return results


def cmd_rtt(server: str, count: int, payload: int = netservice.ECHO_PAYLOAD_SIZE, timeout: float = 10.0):
    stats = netservice.rtt_bench(server, count, payload, timeout)
    for i, s in enumerate(stats.samples):
        print(f"sample {i}\t{s:.3f} ms")
    print(stats.report())
    return stats


# --------------------------------------------------------------------------
# Argument handling
# --------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _set_pair(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep or not key.strip():
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    return key.strip(), value


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config file)")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--set", metavar="KEY=VALUE", type=_set_pair, action="append", default=[],
                        help="override one config key; repeatable")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = _Parser(prog="seizurenet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("gen", parents=[common], help="write a synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="fit dimred and the network on a dataset")
    p.add_argument("dataset")
    p = sub.add_parser("eval", parents=[common], help="leave-one-out evaluation with the baseline")
    p.add_argument("dataset")

    p = sub.add_parser("serve", parents=[common], help="serve predictions over TCP")
    p.add_argument("--listen", required=True, metavar="HOST:PORT")
    p.add_argument("--model", required=True, metavar="PATH")
    p.add_argument("--dimred", required=True, metavar="PATH")
    p.add_argument("--echo-delay-ms", type=float, default=0.0, help="hold echo replies back (testing)")

    p = sub.add_parser("stream", parents=[common], help="send segment files to a server")
    p.add_argument("--server", required=True, metavar="HOST:PORT")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("files", nargs="+")

    p = sub.add_parser("rtt", parents=[common], help="echo round-trip benchmark")
    p.add_argument("--server", required=True, metavar="HOST:PORT")
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--payload", type=int, default=netservice.ECHO_PAYLOAD_SIZE, help="echo payload bytes")
    p.add_argument("--timeout", type=float, default=10.0)
    return parser


def resolve_config(args) -> RunConfig:
    """Defaults, then the config file, then ``--set`` pairs, then ``--seed``."""
    config = RunConfig()
    if args.config:
        config = RunConfig.load(args.config)
    config = config.with_overrides(dict(args.set))
    if args.seed is not None:
        config = config.with_overrides({"seed": str(args.seed)})
    return config.validate()


def _dispatch(args) -> None:
    if args.command in ("serve", "stream", "rtt"):
        if args.command == "serve":
            cmd_serve(args.listen, args.model, args.dimred, args.echo_delay_ms)
        elif args.command == "stream":
            cmd_stream(args.server, args.files, args.timeout)
        else:
            if args.count < 1:
                raise UsageError("--count must be >= 1")
            cmd_rtt(args.server, args.count, args.payload, args.timeout)
        return
    try:
        config = resolve_config(args)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    except OSError as exc:
        raise DataError(f"cannot read config: {exc}") from exc
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    out = Path(args.out or ("data" if args.command == "gen" else "out"))
    if args.command == "gen":
        cmd_gen(config, out)
    elif args.command == "train":
        cmd_train(config, args.dataset, out)
    else:
        cmd_eval(config, args.dataset, out)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        _dispatch(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        if isinstance(exc, (ConnectionError, TimeoutError)):
            print(f"runtime error: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDivergedError, netservice.ProtocolError, RuntimeError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
