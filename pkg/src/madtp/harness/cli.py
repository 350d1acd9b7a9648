"""Command-line entry point.

Exit codes: 0 success, 2 validation error, 3 calibration non-convergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from ..config import RunConfig, load_config
from ..errors import (CorruptFileError, FormatError, InvalidArgument, MadtpError,
                      NonConvergence, NonStochasticError)
from ..report import PruneReport
from . import dump as dumpfmt
from .export import export_report, text_summary
from .runs import run_calibrate, run_simulate, run_stp_baseline

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED = 0, 2, 3
DUMP_SAMPLES = 4


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    return replace(cfg, mode=args.command, out_dir=args.out or cfg.out_dir)


def _write_run(sim, config: RunConfig, dataset_images=None, fmt="json") -> Path:
    out = Path(config.out_dir)
    export_report(sim.report, out, fmt, images=dataset_images)
    for idx, result in sim.forwards:
        for b, instance in enumerate(idx):
            if instance >= DUMP_SAMPLES:
                continue
            (out / "dumps").mkdir(exist_ok=True)
            dumpfmt.write_dump(dumpfmt.from_forward(result, b),
                               out / "dumps" / f"pair{instance:05d}.madtpdmp")
    return out


def cmd_simulate(args) -> int:
    from .runs import dataset_for
    config = _config(args)
    dataset = dataset_for(config)
    sim = run_simulate(config, dataset=dataset)
    out = _write_run(sim, config, dataset.images)
    print(f"reduce ratio {sim.report.reduce_ratio:.4f}; "
          f"{sim.report.dataset_gflops:.6g} of {sim.report.baseline_gflops:.6g} GFLOPs -> {out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    config = _config(args)
    if args.target_ratio is not None:
        config = config.with_model(target_ratio=args.target_ratio)
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = run_calibrate(config)
    except NonConvergence as exc:
        (out / "calibration.json").write_text(json.dumps(
            {"converged": False, "message": str(exc),
             "trace": [list(t) for t in exc.trace]}, indent=2) + "\n")
        print(f"calibration failed: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    (out / "calibration.json").write_text(json.dumps(
        {"converged": True, "temperature": result.temperature, "iterations": result.iterations,
         "target_gflops": result.target_gflops, "trace": [list(t) for t in result.trace]},
        indent=2) + "\n")
    export_report(result.report, out, "json")
    print(f"T = {result.temperature!r} after {result.iterations} iterations")
    return EXIT_OK


def cmd_stp(args) -> int:
    config = _config(args)
    k = config.stp_k if args.k is None else args.k
    sim = run_stp_baseline(replace(config, stp_k=k))
    export_report(sim.report, config.out_dir, "json")
    print(f"static pruning k={k}: reduce ratio {sim.report.reduce_ratio:.4f}")
    return EXIT_OK


def cmd_ingest(args) -> int:
    dump = dumpfmt.ingest_attention_dump(args.dump)
    temperature = args.temperature
    if args.config:
        temperature = load_config(args.config).model.temperature if temperature is None else temperature
    temperature = 1.0 if temperature is None else temperature
    rows = []
    for modality in ("vision", "language"):
        for layer, dec in enumerate(dumpfmt.replay(dump, temperature, modality)):
            rows.append({"branch": modality, "layer": layer, "n_in": int(dec.keep.size),
                         "kept": int(dec.kept_count), "theta": dec.theta})
            print(f"{modality}\tlayer {layer}\ttheta={dec.theta:.6g}\t"
                  f"kept {dec.kept_count}/{dec.keep.size}")
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "replay.json").write_text(json.dumps(rows, indent=2) + "\n")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    from .train import run_train_toy, toy_config
    config = _config(args) if args.config else replace(toy_config(), out_dir=args.out or "out")
    result = run_train_toy(config, out_dir=config.out_dir)
    print(f"L_sim {result.initial.l_sim:.4f} -> {result.final.l_sim:.4f}; "
          f"L_task {result.initial.l_task:.4f} -> {result.final.l_task:.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    path = Path(args.input)
    if path.is_dir():
        path = path / "report.json"
    try:
        report = PruneReport.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise InvalidArgument(f"{path}: cannot read report ({exc})") from exc
    sys.stdout.write(text_summary(report) if args.format == "text" else report.dumps())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="madtp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="prune a synthetic dataset and write reports")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="tune the temperature to a target reduce ratio")
    p.add_argument("--config")
    p.add_argument("--target-ratio", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("stp", help="static pruning baseline: drop k tokens per layer")
    p.add_argument("--config")
    p.add_argument("--k", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_stp)

    p = sub.add_parser("ingest", help="replay pruning decisions on an attention dump")
    p.add_argument("--dump", required=True)
    p.add_argument("--config")
    p.add_argument("--temperature", type=float)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train-toy", help="train the guidance module on a tiny config")
    p.add_argument("--config")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train_toy)

    p = sub.add_parser("report", help="print a saved report")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--format", choices=("text", "json"), default="text")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InvalidArgument, FormatError, CorruptFileError, NonStochasticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except NonConvergence as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    except MadtpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
