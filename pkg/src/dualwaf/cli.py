"""Command-line entry point: parse, generate, train, evaluate, detect, explain, ablate.

Exit codes: 0 success, 1 I/O or checkpoint failure, 2 usage or config error,
3 non-finite loss.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import torch

from . import __version__
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, desk_scale, full_scale
from .data import (
    Dataset,
    DatasetError,
    EmptyDataset,
    IoFailure,
    generate_synthetic,
    load_dataset,
    read_requests,
    split,
)
from .trace import IoFailure as TraceIoFailure
from .trace import emit_heatmap, trace
from .training import (
    ABLATION_SUITES,
    NonFiniteLoss,
    TrainState,
    UnknownSuite,
    build_vocabs,
    evaluate,
    rows_to_csv,
    run_ablation,
    train,
)
from .detector import Detector

log = logging.getLogger("dualwaf")

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3
PRESETS = {"desk": desk_scale, "full": full_scale}


class UsageError(Exception):
    pass


# -- helpers ------------------------------------------------------------------

def _deep_update(base: dict, extra: dict) -> dict:
    for k, v in extra.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _deep_update(base[k], v)
        else:
            base[k] = v
    return base


def resolve_config(args) -> RunConfig:
    base = PRESETS[args.preset]().to_dict()
    if args.config:
        try:
            extra = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as e:
            raise IoFailure(f"cannot read config {args.config}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: invalid JSON ({e})") from e
        if not isinstance(extra, dict):
            raise ConfigError(f"{args.config}: config must be a JSON object")
        _deep_update(base, extra)
    run = RunConfig.from_dict(base).with_overrides(args.set or [])
    if args.seed is not None:
        run.train.seed = args.seed
    if args.threads is not None:
        run.train.threads = args.threads
    return run.validate()


def load_data(spec: str, seed: int, header_params=None, fmt: str | None = None) -> Dataset:
    """``synthetic:N[:url_attack_rate]`` or a dataset path."""
    if spec.startswith("synthetic:"):
        parts = spec.split(":")
        try:
            n = int(parts[1])
            rate = float(parts[2]) if len(parts) > 2 else 0.0
        except (IndexError, ValueError) as e:
            raise UsageError(f"bad synthetic data spec {spec!r}; expected synthetic:N[:url_attack_rate]") from e
        return generate_synthetic(n, seed, url_attack_rate=rate, header_params=header_params)
    return load_dataset(spec, fmt, header_params=header_params)


def run_dir(out: str, kind: str, seed: int) -> Path:
    """A fresh run-stamped subdirectory of ``out``."""
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = Path(out) / f"{kind}-seed{seed}-{stamp}"
    path, k = base, 1
    while path.exists():
        k += 1
        path = base.with_name(f"{base.name}-{k}")
    try:
        path.mkdir(parents=True)
    except OSError as e:
        raise IoFailure(f"cannot create {path}: {e}") from e
    return path


def _write(path: Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as e:
        raise IoFailure(f"cannot write {path}: {e}") from e


def _metrics_json(metrics) -> str:
    return json.dumps(metrics.to_dict(), indent=2, sort_keys=True) + "\n"


def _load_model(path: str):
    model, run, state = load_checkpoint(path, with_optimizer=False)
    torch.set_num_threads(run.train.threads)
    return model, run


def _read_input(path: str, model, fmt: str | None):
    reqs, _ = read_requests(path, fmt, header_params=model.cfg.header_params)
    return reqs


# -- subcommands ----------------------------------------------------------------

def cmd_parse(args) -> int:
    try:
        reqs, skipped = read_requests(args.input, args.format, strict=args.strict)
    except DatasetError as e:
        if args.strict:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_USAGE
        raise
    lines = "".join(json.dumps(r.to_dict(), ensure_ascii=False) + "\n" for r in reqs)
    if args.output:
        _write(Path(args.output), lines)
    else:
        sys.stdout.write(lines)
    log.info("parsed %d request(s), skipped %d", len(reqs), skipped)
    return EXIT_OK


def cmd_generate(args) -> int:
    ds = generate_synthetic(args.n, args.seed, url_attack_rate=args.url_attack_rate)
    lines = "".join(json.dumps(r.to_dict(), ensure_ascii=False) + "\n" for r in ds.records)
    if args.output:
        _write(Path(args.output), lines)
    else:
        sys.stdout.write(lines)
    return EXIT_OK


def cmd_train(args) -> int:
    state = None
    if args.resume:
        model, run, state = load_checkpoint(args.resume)
        run = run.with_overrides(args.set or [])
        if args.threads is not None:
            run.train.threads = args.threads
        run.validate()
        model.cfg = run.model
        if state.epochs_done >= run.train.epochs:
            log.info("checkpoint already trained for %d epoch(s); raise train.epochs to continue",
                     state.epochs_done)
    else:
        run = resolve_config(args)
    torch.set_num_threads(run.train.threads)
    ds = load_data(args.data, run.train.seed, run.model.header_params, args.format)
    train_set, test_set = split(ds, run.train.seed)
    log.info("data: %d train / %d test records (%s)", len(train_set), len(test_set), ds.provenance)
    if state is None:
        model = Detector(run.model, build_vocabs(train_set.records, run.model), seed=run.train.seed)
    out = run_dir(args.out, "train", run.train.seed)
    t0 = time.perf_counter()
    result = train(model, train_set.records, run.train, state=state)
    metrics = evaluate(model, test_set.records)
    save_checkpoint(out / "checkpoint", model, run, result.state)
    _write(out / "config.json", run.to_json() + "\n")
    _write(out / "loss.csv", result.history_csv())
    _write(out / "metrics.json", _metrics_json(metrics))
    _write(out / "metrics.txt", metrics.to_text())
    _write(out / "run.json", json.dumps({
        "data": args.data, "train_records": len(train_set), "test_records": len(test_set),
        "epoch_losses": result.epoch_losses, "seconds": round(time.perf_counter() - t0, 2),
        "resumed_from": args.resume, "version": __version__,
    }, indent=2) + "\n")
    log.info("test metrics: accuracy %.4f  f1 %.4f", metrics.accuracy, metrics.f1)
    print(out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, run = _load_model(args.checkpoint)
    ds = load_data(args.data, run.train.seed, run.model.header_params, args.format)
    records = ds.records if args.all else split(ds, run.train.seed)[1].records
    metrics = evaluate(model, records)
    if args.out:
        out = run_dir(args.out, "evaluate", run.train.seed)
        _write(out / "metrics.json", _metrics_json(metrics))
        _write(out / "metrics.txt", metrics.to_text())
    sys.stdout.write(_metrics_json(metrics))
    return EXIT_OK


def cmd_detect(args) -> int:
    model, _ = _load_model(args.checkpoint)
    reqs = _read_input(args.input, model, args.format)
    for req, pred in zip(reqs, model.predict(reqs) if reqs else []):
        sys.stdout.write(json.dumps({
            "url": req.url,
            "label": "malicious" if pred.label == 1 else "benign",
            "p_malicious": pred.p_malicious,
            "probs": [float(x) for x in pred.probs],
        }) + "\n")
    return EXIT_OK


def cmd_explain(args) -> int:
    model, run = _load_model(args.checkpoint)
    reqs = _read_input(args.input, model, args.format)
    out = run_dir(args.out, "explain", run.train.seed)
    preds = model.predict(reqs) if reqs else []
    summary = []
    for i, (req, pred) in enumerate(zip(reqs, preds)):
        report = trace(pred.attention)
        emit_heatmap(report, out / f"request-{i:04d}")
        summary.append({
            "index": i, "url": req.url,
            "label": "malicious" if pred.label == 1 else "benign",
            "p_malicious": pred.p_malicious,
            "top_parameter": None if report.top is None else req.params[report.top].key,
            "degrees": [float(x) for x in report.degrees],
        })
    _write(out / "summary.jsonl", "".join(json.dumps(s, ensure_ascii=False) + "\n" for s in summary))
    print(out)
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.suite not in ABLATION_SUITES:
        raise UnknownSuite(f"unknown ablation suite {args.suite!r}; choose from {sorted(ABLATION_SUITES)}")
    run = resolve_config(args)
    torch.set_num_threads(run.train.threads)
    ds = load_data(args.data, run.train.seed, run.model.header_params, args.format)
    train_set, test_set = split(ds, run.train.seed)
    rows = run_ablation(args.suite, run, train_set.records, test_set.records)
    out = run_dir(args.out, f"ablate-{args.suite}", run.train.seed)
    _write(out / f"{args.suite}.csv", rows_to_csv(rows))
    _write(out / "config.json", run.to_json() + "\n")
    sys.stdout.write(rows_to_csv(rows))
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------

def _add_run_flags(p: argparse.ArgumentParser, data_required: bool = True) -> None:
    p.add_argument("--config", help="JSON config merged over the preset")
    p.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override, repeatable")
    p.add_argument("--data", required=data_required, help="dataset path or synthetic:N[:url_attack_rate]")
    p.add_argument("--format", choices=["raw", "jsonl"], help="dataset format (default: from extension)")
    p.add_argument("--out", default="runs", help="output root; a run-stamped subdirectory is created")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dualwaf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    parser.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", help="raw requests -> JSON-lines of parsed requests")
    p.add_argument("input")
    p.add_argument("-o", "--output")
    p.add_argument("--format", choices=["raw", "jsonl"])
    p.add_argument("--strict", action="store_true", help="fail (exit 2) on the first malformed record")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("generate", help="write a synthetic labelled corpus as JSON-lines")
    p.add_argument("-n", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--url-attack-rate", type=float, default=0.0)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train on a 70/30 split and write checkpoint, loss and metrics")
    _add_run_flags(p)
    p.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics of a checkpoint on the held-out split (or all data)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--format", choices=["raw", "jsonl"])
    p.add_argument("--all", action="store_true", help="score every record instead of the test split")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    for name, func, help_ in (("detect", cmd_detect, "classify requests; JSON-lines on stdout"),
                              ("explain", cmd_explain, "per-parameter attention reports")):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("input", help="raw-request or JSON-lines file")
        p.add_argument("--format", choices=["raw", "jsonl"])
        if name == "explain":
            p.add_argument("--out", default="runs")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="train each variant of a suite and write a comparison CSV")
    p.add_argument("suite", help=f"one of {', '.join(sorted(ABLATION_SUITES))}")
    _add_run_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)
    threads = getattr(args, "threads", None)
    if threads is not None and threads < 1:
        parser.error("--threads must be >= 1")
    try:
        return args.func(args)
    except (ConfigError, UsageError, UnknownSuite) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (IoFailure, TraceIoFailure, CheckpointError, EmptyDataset, DatasetError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
