"""
Command line entry point for the error diffusion quantization toolkit.

Subcommands:
    quantize     calibrate and quantize a model, write weights and a report
    formats      list the format registry or describe one format
    eval         recompute a report from saved artifacts and verify it
    gen-fixture  write a deterministic synthetic model

Exit codes: 0 ok, 1 unexpected, 2 config, 3 I/O, 4 shape, 5 numerical abort,
6 artifact mismatch.
"""
import argparse
import sys
from pathlib import Path
from typing import List, Optional

from src.managers.run_manager import RunConfig, RunManager
from src.services.diffusion_service import DiffusionService, ExecutionMode
from src.services.fixture_service import FixtureService
from src.utils.errors import ConfigError, ErrorDiffusionError
from src.utils.settings import ED_DEFAULT_FORMAT, ED_DEFAULT_SEED, get_logger

logger = get_logger()


def _sizes(text: str) -> List[int]:
    try:
        return [int(part) for part in text.split(",") if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"sizes must be comma separated integers, got '{text}'")


def _add_run_flags(parser: argparse.ArgumentParser):
    parser.add_argument("--format", default=ED_DEFAULT_FORMAT, help=f"format name or b<block>e<exp>m<man>s<scale> (default {ED_DEFAULT_FORMAT})")
    parser.add_argument("--block-size", type=int, default=None, help="override the format's block size")
    parser.add_argument("--mode", choices=DiffusionService.METHODS, default="ed", help="calibration method (default ed)")
    parser.add_argument("--calibrate-unquantized", action="store_true", help="run update-only diffusion on calibrate_only layers")
    parser.add_argument("--quantize-activations", action="store_true", help="quantize every linear layer input with the same format")
    parser.add_argument("--seed", type=int, default=ED_DEFAULT_SEED, help="seed recorded in the report")
    parser.add_argument("--strategy", choices=[m.value for m in ExecutionMode], default=None, help="accumulator strategy")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="error-diffusion", description="Error diffusion post-training quantization")
    commands = parser.add_subparsers(dest="command", required=True)

    quantize = commands.add_parser("quantize", help="calibrate and quantize a model")
    quantize.add_argument("--model", type=Path, required=True, help="model description (JSON)")
    quantize.add_argument("--weights", type=Path, required=True, help="weights container (.tct)")
    quantize.add_argument("--samples", type=Path, required=True, help="calibration samples container (.tct)")
    _add_run_flags(quantize)
    quantize.add_argument("--out-weights", type=Path, default=None, help="output prefix P, writes P.tcq and P.tct")
    quantize.add_argument("--out-report", type=Path, default=None, help="report JSON path; a .csv is written next to it")

    formats = commands.add_parser("formats", help="list formats or describe one")
    formats.add_argument("name", nargs="?", default=None)

    evaluate = commands.add_parser("eval", help="recompute and verify a report")
    evaluate.add_argument("--model", type=Path, required=True)
    evaluate.add_argument("--weights", type=Path, required=True, help="original weights (.tct)")
    evaluate.add_argument("--quantized", type=Path, required=True, help="prefix P of P.tcq and P.tct")
    evaluate.add_argument("--samples", type=Path, required=True)
    evaluate.add_argument("--report", type=Path, default=None, help="stored report to verify")
    evaluate.add_argument("--out-report", type=Path, default=None, help="where to save the recomputed report")
    _add_run_flags(evaluate)

    fixture = commands.add_parser("gen-fixture", help="write a synthetic model")
    fixture.add_argument("--kind", choices=FixtureService.KINDS, required=True)
    fixture.add_argument("--seed", type=int, default=ED_DEFAULT_SEED)
    fixture.add_argument("--sizes", type=_sizes, default=None, help="comma separated widths")
    fixture.add_argument("--num-samples", type=int, default=FixtureService.DEFAULT_SAMPLES)
    fixture.add_argument("--out-dir", type=Path, required=True)
    return parser


def _run_config(args) -> RunConfig:
    return RunConfig(
        model=args.model,
        weights=args.weights,
        samples=args.samples,
        format=args.format,
        block_size=args.block_size,
        mode=args.mode,
        calibrate_unquantized=args.calibrate_unquantized,
        quantize_activations=args.quantize_activations,
        seed=args.seed,
        out_weights=getattr(args, "out_weights", None),
        out_report=getattr(args, "out_report", None),
        strategy=args.strategy,
    )


def run(argv: Optional[List[str]] = None) -> int:
    """Parse ``argv``, run the command and return the process exit code."""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        # argparse exits with 2 on bad flags, which is already the config code
        return int(e.code or 0)

    manager = RunManager()
    try:
        if args.command == "quantize":
            report = manager.cmd_quantize(_run_config(args))
            logger.info(f"Done: {len(report.layers)} layers, end-to-end error {report.end_to_end_error:.6g}")
        elif args.command == "formats":
            print(manager.cmd_formats(args.name))
        elif args.command == "eval":
            manager.cmd_eval(
                args.model, args.weights, args.quantized, args.samples,
                report=args.report, out_report=args.out_report, config=_run_config(args),
            )
        elif args.command == "gen-fixture":
            paths = manager.cmd_gen_fixture(args.kind, args.out_dir, args.seed, args.sizes, args.num_samples)
            for path in paths.values():
                print(path)
        else:
            raise ConfigError(f"unknown command '{args.command}'")
    except ErrorDiffusionError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return e.exit_code
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
