"""Operator entry point.

Subcommands:
  attack            run a campaign file, write adversarial images + reports
  metrics           size metrics between two images
  sweep-alpha       rerun a campaign across alpha values, emit CSV
  serve-info-check  probe a remote oracle's /info endpoint

Exit codes: 0 completed (failed attacks included), 2 configuration error,
3 infrastructure/oracle error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .campaign import (
    ENDPOINT_ENV_VAR,
    CampaignSpec,
    dumps_report,
    run_alpha_sweep,
    run_campaign,
)
from .engine import ConfigError
from .metrics import REPORTING_PERCEPTUAL, PerceptualParams, perturbation_report
from .oracle import OracleError, RemoteOracle
from .tensors import Perturbation, ShapeError, TensorFormatError, load_image

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INFRASTRUCTURE = 3


def _csv_floats(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(",") if x.strip())


def _csv_ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


def _csv_paths(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


_ATTACK_FLAGS = [
    # (flag, dest, parser, help)
    ("--population-size", "population_size", int, "individuals per generation (even)"),
    ("--max-generations", "max_generations", int, "evaluated generations budget"),
    ("--crossover-prob", "crossover_prob", float, "per-pair crossover probability"),
    ("--mutation-prob", "mutation_prob", float, "per-child mutation probability"),
    ("--mutation-density", "mutation_density", float, "fraction of elements scaled when mutating"),
    ("--alpha", "alpha", float, "size-penalty weight"),
    ("--fitness-threshold", "fitness_threshold", float, "early stop once best fitness exceeds this"),
    ("--init-stddevs", "init_stddevs", _csv_floats, "comma list of init noise stddevs (0..1 units)"),
    ("--init-point-counts", "init_point_counts", _csv_ints, "comma list of init noise point counts"),
    ("--init-point-sizes", "init_point_sizes", _csv_ints, "comma list of init patch sizes"),
    ("--init-seeds", "init_seed_paths", _csv_paths, "comma list of seed perturbation files"),
    ("--mode", "mode", str, "untargeted | targeted | binary"),
    ("--target-label", "target_label", int, "target class for targeted mode"),
    ("--mc-samples", "mc_samples", int, "Monte-Carlo samples per evaluation (binary mode)"),
    ("--mc-sigma", "mc_sigma", float, "Monte-Carlo noise stddev (0..1 units)"),
    ("--size-baseline", "size_baseline", str, "first_success | initial"),
    ("--seed", "rng_seed", int, "base RNG seed"),
    ("--eval-workers", "eval_workers", int, "concurrent evaluations per generation"),
]


def _add_attack_flags(parser: argparse.ArgumentParser) -> None:
    for flag, dest, parser_fn, help_text in _ATTACK_FLAGS:
        parser.add_argument(flag, dest=dest, type=parser_fn, default=None, help=help_text)
    parser.add_argument("--perceptual-slope", dest="perceptual_slope", type=float, default=None,
                        help="sigmoid slope of the size metric")
    parser.add_argument("--perceptual-offset", dest="perceptual_offset", type=float, default=None,
                        help="sigmoid offset of the size metric")


def _attack_overrides(args: argparse.Namespace, base: dict | None = None) -> dict:
    overrides = dict(base or {})
    for _, dest, _, _ in _ATTACK_FLAGS:
        value = getattr(args, dest, None)
        if value is not None:
            overrides[dest] = value
    if args.perceptual_slope is not None or args.perceptual_offset is not None:
        slope = args.perceptual_slope if args.perceptual_slope is not None else 15.0
        offset = args.perceptual_offset if args.perceptual_offset is not None else 3.0
        overrides["perceptual"] = PerceptualParams(slope=slope, offset=offset)
    return overrides


def _load_spec(args: argparse.Namespace) -> CampaignSpec:
    return CampaignSpec.from_file(
        args.campaign,
        attack_overrides=_attack_overrides(args),
        output_dir=args.output_dir,
        verify=False if args.no_verify else None,
        parallel=args.parallel,
    )


def cmd_attack(args: argparse.Namespace) -> int:
    spec = _load_spec(args)
    summary = run_campaign(spec)
    print(dumps_report(summary), end="")
    if summary["n_infrastructure_errors"] > 0:
        return EXIT_INFRASTRUCTURE
    return EXIT_OK


def cmd_metrics(args: argparse.Namespace) -> int:
    image_a = load_image(args.image_a)
    image_b = load_image(args.image_b)
    if image_a.shape != image_b.shape:
        raise ShapeError(f"shapes differ: {image_a.shape} vs {image_b.shape}")
    params = PerceptualParams(slope=args.slope, offset=args.offset)
    diff = Perturbation(image_a.data - image_b.data)
    report = perturbation_report(diff, params)
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_sweep_alpha(args: argparse.Namespace) -> int:
    spec = _load_spec(args)
    alphas = list(_csv_floats(args.alphas))
    if not alphas:
        raise ConfigError("--alphas needs at least one value")
    rows = run_alpha_sweep(spec, alphas)
    for row in rows:
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def cmd_serve_info_check(args: argparse.Namespace) -> int:
    url = args.url or os.environ.get(ENDPOINT_ENV_VAR)
    if not url:
        raise ConfigError(f"need --url or {ENDPOINT_ENV_VAR}")
    oracle = RemoteOracle(url, retries=args.retries, timeout=args.timeout)
    info = {"classes": oracle.num_classes, "shape": list(oracle.input_shape),
            "binary_only": oracle.binary_only}
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evoattack", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_attack = sub.add_parser("attack", help="run an attack campaign")
    p_attack.add_argument("--campaign", required=True, help="campaign JSON file")
    p_attack.add_argument("--output-dir", default=None, help="overrides the campaign output_dir")
    p_attack.add_argument("--no-verify", action="store_true",
                          help="skip the uncounted re-query of saved adversarial images")
    p_attack.add_argument("--parallel", type=int, default=None,
                          help="campaign examples to run concurrently")
    _add_attack_flags(p_attack)
    p_attack.set_defaults(func=cmd_attack)

    p_metrics = sub.add_parser("metrics", help="size metrics between two images")
    p_metrics.add_argument("image_a")
    p_metrics.add_argument("image_b")
    p_metrics.add_argument("--slope", type=float, default=REPORTING_PERCEPTUAL.slope)
    p_metrics.add_argument("--offset", type=float, default=REPORTING_PERCEPTUAL.offset)
    p_metrics.set_defaults(func=cmd_metrics)

    p_sweep = sub.add_parser("sweep-alpha", help="campaign across alpha values")
    p_sweep.add_argument("--campaign", required=True)
    p_sweep.add_argument("--alphas", required=True, help="comma list, e.g. 0,1,3,10")
    p_sweep.add_argument("--output-dir", default=None)
    p_sweep.add_argument("--no-verify", action="store_true")
    p_sweep.add_argument("--parallel", type=int, default=None)
    _add_attack_flags(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep_alpha)

    p_info = sub.add_parser("serve-info-check", help="probe a remote oracle /info")
    p_info.add_argument("--url", default=None)
    p_info.add_argument("--retries", type=int, default=2)
    p_info.add_argument("--timeout", type=float, default=10.0)
    p_info.set_defaults(func=cmd_serve_info_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError, TensorFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OracleError as exc:
        print(f"oracle error: {exc}", file=sys.stderr)
        return EXIT_INFRASTRUCTURE


if __name__ == "__main__":
    sys.exit(main())
