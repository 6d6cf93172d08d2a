"""Command-line entry point.

Exit codes: 0 success, 1 invalid configuration or missing inputs,
2 runtime failure (simulation, training or assimilation).
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from ..da.forward import ForwardModelError
from ..gcsf import FormatError
from ..geomodel import GeomodelError
from ..simulator import SimulationError
from ..surrogate.fno import SurrogateError
from ..surrogate.training import TrainingError
from .config import ConfigError, load_config
from .pipeline import (METHODS, PipelineError, cmd_assimilate, cmd_generate, cmd_report,
                       cmd_simulate, cmd_train)

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("ccsda")


def _seed_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected K=V, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=default, help="INI experiment config")
    parser.add_argument("--out", type=Path, default=default,
                        help="output directory (overrides [paths] out)")
    parser.add_argument("--workers", type=int, default=argparse.SUPPRESS if suppress else 1,
                        help="worker processes for simulator runs")
    parser.add_argument("--seed-override", type=_seed_override, action="append",
                        default=argparse.SUPPRESS if suppress else [], metavar="K=V",
                        help="override a named seed, e.g. prior=3 (repeatable)")
    parser.add_argument("-v", "--verbose", action="store_true",
                        default=argparse.SUPPRESS if suppress else False, help="log progress")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccsda", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample prior, training set and synthetic truth")
    _global_flags(p, suppress=True)
    p = sub.add_parser("simulate", help="run the simulator on an ensemble (resumable)")
    _global_flags(p, suppress=True)
    p.add_argument("--ensemble", type=Path, help="ensemble directory (default OUT/train)")
    p = sub.add_parser("train", help="fit the surrogate")
    _global_flags(p, suppress=True)
    p.add_argument("--dataset", type=Path, help="simulated ensemble (default OUT/train)")
    p = sub.add_parser("assimilate", help="run one assimilation method")
    _global_flags(p, suppress=True)
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--checkpoint", type=Path, help="surrogate checkpoint (default OUT/surrogate)")
    p.add_argument("--name", help="run directory name under OUT/runs (default: method)")
    p = sub.add_parser("report", help="compare completed runs")
    _global_flags(p, suppress=True)
    p.add_argument("runs", nargs="*", type=Path, help="run directories (default OUT/runs/*)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = load_config(args.config, overrides=dict(args.seed_override))
        out = args.out or Path(cfg.out_dir)
        if args.command == "generate":
            result = cmd_generate(cfg, out)
        elif args.command == "simulate":
            result = cmd_simulate(cfg, out, args.ensemble, workers=args.workers)
        elif args.command == "train":
            result = cmd_train(cfg, out, args.dataset)
        elif args.command == "assimilate":
            result = cmd_assimilate(cfg, out, args.method, args.checkpoint, workers=args.workers,
                                    run_name=args.name)
        else:
            result = cmd_report(cfg, out, args.runs or None)
    except (ConfigError, PipelineError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SimulationError, TrainingError, ForwardModelError, SurrogateError, GeomodelError,
            OSError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime failure
        log.exception("unexpected failure")
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps(_summary(args.command, result), indent=2, sort_keys=True))
    if args.command == "simulate" and result["failures"]:
        return EXIT_RUNTIME
    return EXIT_OK


def _summary(command: str, result: dict) -> dict:
    if command == "assimilate":
        keys = ("method", "forward_calls", "prior", "posterior", "warnings", "flagged_members")
        out = {k: result.get(k) for k in keys}
        for stage in ("prior", "posterior"):
            if out[stage]:
                out[stage] = {"rmse": out[stage]["rmse"],
                              "median_abs_misfit": out[stage]["median_abs_misfit"]}
        return out
    if command == "report":
        return {"runs": sorted(result["methods"]),
                "hf_call_speedup_vs_esmda": result["hf_call_speedup_vs_esmda"]}
    return result


if __name__ == "__main__":
    sys.exit(main())
