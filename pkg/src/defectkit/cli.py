"""Command-line interface.

Exit status: 0 success, 1 usage or validation error, 2 I/O error or
unreadable/corrupted input.  Machine output is JSON; diagnostics go to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .augment import MixEvent, MixParams, apply_bboxmixup
from .cgpc import CgpcConfig, ExternalFeatures, HistogramFeatures, run_cgpc, write_trace
from .core import DataFormatError, PseudoLabel, ValidationError, rng_stream
from .datio import (
    Dataset,
    DirectoryRasterStore,
    atomic_write_bytes,
    compute_stats,
    dump_json,
    load_dataset,
    save_dataset,
    save_raster,
    split_dataset,
)
from .sslsim import gen_synthetic_stream, load_scenario, run_labeled_baseline, run_ssl_simulation, stream_to_dict

logger = logging.getLogger("defectkit")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2

# knob -> (default, type); a --config file may set any of these, flags win
KNOBS: dict[str, tuple[Any, type]] = {
    "seed": (0, int),
    "jobs": (None, int),
    "train_fraction": (0.7, float),
    "alpha": (1.0, float),
    "beta": (1.0, float),
    "apply_prob": (0.5, float),
    "defects_only": (False, bool),
    "tau": (0.35, float),
    "sim_threshold": (0.85, float),
    "iou_threshold": (0.65, float),
    "momentum": (None, float),
    "update_buffers": (None, bool),
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # argparse would exit(2); 2 is reserved for I/O
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _probability(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"must be in [0, 1], got {text}")
    return v


def _positive(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {text}")
    return v


def _jobs(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="defectkit", description="Fruit-defect detection data tools.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more log output (repeatable)")
    p.add_argument("-q", "--quiet", action="store_true", help="only log errors")
    p.add_argument("--config", type=Path, help="JSON file with default values for any numeric knob")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    s = sub.add_parser("stats", help="dataset statistics")
    s.add_argument("dataset", type=Path)
    s.add_argument("-o", "--output", type=Path, help="write JSON here and print a table instead")

    s = sub.add_parser("split", help="random image-level train/test split")
    s.add_argument("dataset", type=Path)
    s.add_argument("--train", type=Path, required=True, help="output path of the train part")
    s.add_argument("--test", type=Path, required=True, help="output path of the test part")
    s.add_argument("--train-fraction", dest="train_fraction", type=float, help="default 0.7")
    s.add_argument("--seed", type=int)

    s = sub.add_parser("augment", help="BBoxMixUp over a dataset and its PPM rasters")
    s.add_argument("dataset", type=Path)
    s.add_argument("--images", type=Path, required=True, help="directory holding the input rasters")
    s.add_argument("--output-dir", type=Path, required=True)
    s.add_argument("--alpha", type=_positive, help="Beta shape a (default 1.0)")
    s.add_argument("--beta", type=_positive, help="Beta shape b (default 1.0)")
    s.add_argument("--apply-prob", dest="apply_prob", type=_probability, help="per-box mixing probability (default 0.5)")
    s.add_argument("--defects-only", dest="defects_only", action="store_const", const=True, help="never mix normal boxes")
    s.add_argument("--seed", type=int)
    s.add_argument("--jobs", type=_jobs)
    s.add_argument("--log", type=Path, help="write the mix events as JSON")

    s = sub.add_parser("calibrate", help="CGPC over scored predictions")
    s.add_argument("predictions", type=Path, help="dataset JSON whose annotations carry scores")
    s.add_argument("-o", "--output", type=Path, required=True)
    s.add_argument("--images", type=Path, help="raster directory for histogram features")
    s.add_argument("--features", type=Path, help="precomputed region embeddings (JSON)")
    s.add_argument("--trace", type=Path, help="write the per-stage audit trace (JSON lines)")
    s.add_argument("--tau", type=_probability, help="confidence threshold (default 0.35)")
    s.add_argument("--sim-threshold", dest="sim_threshold", type=float, help="cosine threshold (default 0.85)")
    s.add_argument("--iou-threshold", dest="iou_threshold", type=_probability, help="dedup IoU (default 0.65)")
    s.add_argument("--jobs", type=_jobs)

    s = sub.add_parser("simulate", help="run the toy mean-teacher simulation")
    s.add_argument("--scenario", type=Path, help="scenario JSON (defaults to the shipped scenario)")
    s.add_argument("-o", "--output", type=Path, required=True, help="per-iteration report (JSON lines)")
    s.add_argument("--summary", type=Path, help="summary JSON")
    s.add_argument("--seed", type=int)
    s.add_argument("--momentum", type=_probability)
    g = s.add_mutually_exclusive_group()
    g.add_argument("--buffer-ema", dest="update_buffers", action="store_const", const=True)
    g.add_argument("--no-buffer-ema", dest="update_buffers", action="store_const", const=False)
    s.add_argument("--tau", type=_probability)
    s.add_argument("--calibrate", action="store_const", const=True, help="pass pseudo-labels through CGPC")
    s.add_argument("--iterations", type=int)
    s.add_argument("--baseline", action="store_true", help="also run the labeled-only baseline")

    s = sub.add_parser("gen-synth", help="write a synthetic scenario and its streams")
    s.add_argument("--scenario", type=Path)
    s.add_argument("--output-dir", type=Path, required=True)
    s.add_argument("--seed", type=int)
    return p


def _read_json(path: Path) -> Any:
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: malformed JSON: {exc}") from exc


def _load_config(path: Path | None) -> dict[str, Any]:
    if path is None:
        return {}
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise ValidationError(f"{path}: config must be a JSON object")
    unknown = set(doc) - set(KNOBS)
    if unknown:
        raise ValidationError(f"{path}: unknown config keys {sorted(unknown)}")
    for key, value in doc.items():
        kind = KNOBS[key][1]
        ok = isinstance(value, bool) if kind is bool else isinstance(value, (int, float)) and not isinstance(value, bool)
        if kind is int and ok:
            ok = float(value).is_integer()
        if not ok and value is not None:
            raise ValidationError(f"{path}: config key {key!r} must be {kind.__name__}, got {value!r}")
    return doc


def _resolve(args: argparse.Namespace, config: dict[str, Any]) -> dict[str, Any]:
    out = {}
    for key, (default, kind) in KNOBS.items():
        flag = getattr(args, key, None)
        value = flag if flag is not None else config.get(key, default)
        out[key] = kind(value) if value is not None else None
    if out["jobs"] is None:
        out["jobs"] = os.cpu_count() or 1
    if out["jobs"] < 1:
        raise ValidationError(f"jobs must be >= 1, got {out['jobs']}")
    return out


def _ensure_parent(path: Path) -> None:
    if not path.parent.is_dir():
        raise FileNotFoundError(f"output directory {path.parent} does not exist")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_stats(args: argparse.Namespace, k: dict[str, Any]) -> int:
    stats = compute_stats(load_dataset(args.dataset))
    if args.output is None:
        sys.stdout.write(dump_json(stats.to_dict()).decode())
    else:
        _ensure_parent(args.output)
        atomic_write_bytes(args.output, dump_json(stats.to_dict()))
        print(stats.table())
    return EXIT_OK


def cmd_split(args: argparse.Namespace, k: dict[str, Any]) -> int:
    d = load_dataset(args.dataset)
    train, test = split_dataset(d, k["train_fraction"], rng_stream(k["seed"], "split"))
    for path in (args.train, args.test):
        _ensure_parent(path)
    save_dataset(train, args.train)
    save_dataset(test, args.test)
    print(f"train: {len(train.images)} images, {len(train.annotations)} annotations -> {args.train}")
    print(f"test:  {len(test.images)} images, {len(test.annotations)} annotations -> {args.test}")
    return EXIT_OK


def _event_to_dict(e: MixEvent) -> dict[str, Any]:
    return {"image_id": e.image_id, "annotation_id": e.annotation_id, "source": list(e.source), "ratio": e.ratio}


def cmd_augment(args: argparse.Namespace, k: dict[str, Any]) -> int:
    params = MixParams(k["alpha"], k["beta"], k["apply_prob"], k["seed"], k["defects_only"])
    d = load_dataset(args.dataset)
    if not args.output_dir.is_dir():
        raise FileNotFoundError(f"output directory {args.output_dir} does not exist")
    if args.log is not None:
        _ensure_parent(args.log)
    store = DirectoryRasterStore(args.images, d.images)
    events: list[MixEvent] = []
    out = apply_bboxmixup(d, store, params, jobs=k["jobs"], log=events)
    for im in d.images:
        save_raster(out[im.id], args.output_dir / im.file_name)
    if args.log is not None:
        atomic_write_bytes(args.log, dump_json([_event_to_dict(e) for e in events]))
    print(f"mixed {len(events)} boxes over {len(d.images)} images -> {args.output_dir}")
    return EXIT_OK


def cmd_calibrate(args: argparse.Namespace, k: dict[str, Any]) -> int:
    base = CgpcConfig(k["tau"], k["sim_threshold"], k["iou_threshold"])
    d = load_dataset(args.predictions)
    preds = d.pseudo_labels()
    if len(preds) != len(d.annotations):
        raise ValidationError(f"{args.predictions}: every annotation needs a 'score' to be calibrated")
    if args.features is not None:
        provider = ExternalFeatures(args.features)
    elif args.images is not None:
        provider = HistogramFeatures()
    else:
        raise ValidationError("calibrate needs --features or --images to compute region features")
    for path in (args.output, args.trace):
        if path is not None:
            _ensure_parent(path)
    cfg = CgpcConfig(base.confidence_threshold, base.similarity_threshold, base.iou_threshold, provider)
    rasters = DirectoryRasterStore(args.images, d.images) if args.images is not None else {}
    trace: list | None = [] if args.trace is not None else None
    result = run_cgpc(preds, rasters, cfg, d.registry, trace=trace, jobs=k["jobs"])
    kept: list[PseudoLabel] = [lab for image_id in sorted(result) for lab in result[image_id]]
    out = Dataset(d.images, tuple(kept), d.registry, d.extra)
    save_dataset(out, args.output)
    if trace is not None:
        atomic_write_bytes(args.trace, write_trace(trace))
    print(f"kept {len(kept)} of {len(preds)} pseudo-labels -> {args.output}")
    return EXIT_OK


def _scenario(args: argparse.Namespace, k: dict[str, Any], extra: dict[str, Any]) -> Any:
    doc = _read_json(args.scenario) if args.scenario is not None else {}
    if not isinstance(doc, dict):
        raise ValidationError(f"{args.scenario}: scenario must be a JSON object")
    over: dict[str, Any] = {key: v for key, v in extra.items() if v is not None}
    if getattr(args, "seed", None) is not None or "seed" not in doc:
        over["seed"] = k["seed"]
    ema = {}
    if k["momentum"] is not None:
        ema["momentum"] = k["momentum"]
    if k["update_buffers"] is not None:
        ema["update_buffers"] = k["update_buffers"]
    if ema:
        over["ema"] = ema
    return load_scenario(doc, **over)


def cmd_simulate(args: argparse.Namespace, k: dict[str, Any]) -> int:
    tau = args.tau  # the generic config knob does not override a scenario's own threshold
    cfg = _scenario(args, k, {"confidence_threshold": tau, "calibrate": args.calibrate, "iterations": args.iterations})
    for path in (args.output, args.summary):
        if path is not None:
            _ensure_parent(path)
    report = run_ssl_simulation(cfg)
    summary = report.summary()
    if args.baseline:
        base = run_labeled_baseline(cfg)
        summary["baseline_accuracy"] = base[-1] if base else None
    summary["scenario"] = cfg.to_dict()
    atomic_write_bytes(args.output, report.to_jsonl().encode())
    if args.summary is not None:
        atomic_write_bytes(args.summary, dump_json(summary))
    state = f"collapsed at iteration {report.first_collapse}" if report.collapsed else "no collapse"
    print(f"{len(report.records)} iterations, {state}, final accuracy {report.final_accuracy}")
    return EXIT_OK


def cmd_gen_synth(args: argparse.Namespace, k: dict[str, Any]) -> int:
    cfg = _scenario(args, k, {})
    if not args.output_dir.is_dir():
        raise FileNotFoundError(f"output directory {args.output_dir} does not exist")
    stream = gen_synthetic_stream(cfg.stream, cfg.shift, cfg.seed)
    atomic_write_bytes(args.output_dir / "scenario.json", dump_json(cfg.to_dict()))
    atomic_write_bytes(args.output_dir / "stream.json", dump_json(stream_to_dict(stream)))
    n = sum(len(s) for part in (stream.labeled, stream.unlabeled, stream.heldout) for s in part)
    print(f"wrote scenario and {n} regions -> {args.output_dir}")
    return EXIT_OK


COMMANDS: dict[str, Callable[[argparse.Namespace, dict[str, Any]], int]] = {
    "stats": cmd_stats,
    "split": cmd_split,
    "augment": cmd_augment,
    "calibrate": cmd_calibrate,
    "simulate": cmd_simulate,
    "gen-synth": cmd_gen_synth,
}


def _setup_logging(verbose: int, quiet: bool) -> None:
    level = logging.ERROR if quiet else logging.WARNING - 10 * min(verbose, 2)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("defectkit: %(levelname)s: %(message)s"))
    root = logging.getLogger("defectkit")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


def run_cli(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("defectkit: error: a command is required", file=sys.stderr)
        return EXIT_INVALID
    _setup_logging(args.verbose, args.quiet)
    try:
        knobs = _resolve(args, _load_config(args.config))
        return COMMANDS[args.command](args, knobs)
    except DataFormatError as exc:
        logger.error("%s", exc)
        return EXIT_IO
    except OSError as exc:
        logger.error("%s", exc)
        return EXIT_IO
    except ValueError as exc:  # ValidationError, CategoryError, GeometryError
        logger.error("%s", exc)
        return EXIT_INVALID


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
