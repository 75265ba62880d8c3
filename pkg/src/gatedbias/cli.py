"""Command line interface: run / synth / compare / eval subcommands."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import METHODS, load_config
from .errors import CheckpointError, ConfigError, PipelineError, TripleParseError
from .pipeline import format_comparison, run_compare, run_eval, run_pipeline
from .synth import SynthParams, generate


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip() != ""]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _add_eval_overrides(p: argparse.ArgumentParser) -> None:
    p.add_argument("--method", choices=METHODS, help="override the configured method")
    p.add_argument("--ks", type=_int_list, metavar="K1,K2,...",
                   help="override eval.ks (comma separated)")
    p.add_argument("--percentile-p", type=int, help="override eval.percentile_p")
    p.add_argument("--epsilon", type=float, help="override eval.epsilon")
    p.add_argument("--n-shuffles", type=int, help="override eval.n_shuffles")
    p.add_argument("--seeds", type=_int_list, metavar="S1,S2,...",
                   help="override eval.seeds (comma separated)")


def _apply_overrides(cfg, args) -> None:
    if args.method is not None:
        cfg.method = args.method
    if args.ks is not None:
        if not args.ks or any(k < 1 for k in args.ks):
            raise ConfigError("--ks entries must be >= 1")
        cfg.eval.ks = args.ks
    if args.percentile_p is not None:
        if not 0 < args.percentile_p <= 100:
            raise ConfigError("--percentile-p must be in (0, 100]")
        cfg.eval.percentile_p = args.percentile_p
    if args.epsilon is not None:
        if args.epsilon < 0:
            raise ConfigError("--epsilon must be >= 0")
        cfg.eval.epsilon = args.epsilon
    if args.n_shuffles is not None:
        if args.n_shuffles < 1:
            raise ConfigError("--n-shuffles must be >= 1")
        cfg.eval.n_shuffles = args.n_shuffles
    if args.seeds is not None:
        if not args.seeds:
            raise ConfigError("--seeds must list at least one seed")
        cfg.eval.seeds = args.seeds


def _print_aggregate(report: dict) -> None:
    print(f"method: {report['method']}")
    print(f"parameters added: {report['param_count']}")
    agg = report["report"]["aggregate"]
    for key, entry in agg.items():
        if entry["mean"] is None:
            print(f"{key}: absent")
        elif entry["stderr"] is None:
            print(f"{key}: {entry['mean']:.6g}")
        else:
            print(f"{key}: {entry['mean']:.6g} ± {entry['stderr']:.6g}")


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    report = run_pipeline(cfg, args.out)
    _print_aggregate(report)
    print(f"report written to {args.out}/report.json")
    return 0


def cmd_synth(args) -> int:
    params = SynthParams(
        n_items=args.n_items,
        n_attrs_per_group=args.n_attrs_per_group,
        n_users=args.n_users,
        preference_skew=args.preference_skew,
        seed=args.seed,
    )
    manifest = generate(params, args.out)
    counts = manifest["counts"]
    print(f"dataset written to {args.out}")
    print(f"train likes: {counts['train_likes']}, valid: {counts['valid']}, "
          f"test: {counts['test']}")
    print(f"planted items: {len(manifest['planted_items'])}, "
          f"planted attrs: {len(manifest['planted_attrs'])}")
    return 0


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    comparison = run_compare(cfg, args.out)
    print(format_comparison(comparison), end="")
    print(f"comparison written to {args.out}/compare.json")
    return 0


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    _apply_overrides(cfg, args)
    report = run_eval(cfg, args.out)
    _print_aggregate(report)
    print(f"report written to {args.out}/report.json")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gatedbias",
        description="Structure-gated inference-time personalization over a frozen "
                    "knowledge-graph scorer.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the full pipeline from a config file")
    p_run.add_argument("config", help="path to the YAML config")
    p_run.add_argument("--out", default="out", help="output directory (default: out)")
    _add_eval_overrides(p_run)
    p_run.set_defaults(func=cmd_run)

    p_synth = sub.add_parser("synth", help="generate a synthetic planted-signal dataset")
    p_synth.add_argument("--out", required=True, help="dataset output directory")
    p_synth.add_argument("--n-items", type=int, default=200)
    p_synth.add_argument("--n-attrs-per-group", type=int, default=20)
    p_synth.add_argument("--n-users", type=int, default=100)
    p_synth.add_argument("--preference-skew", type=float, default=1.0)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.set_defaults(func=cmd_synth)

    p_cmp = sub.add_parser("compare", help="run base, patientnode and gatedbias side by side")
    p_cmp.add_argument("config", help="path to the YAML config")
    p_cmp.add_argument("--out", default="out", help="output directory (default: out)")
    _add_eval_overrides(p_cmp)
    p_cmp.set_defaults(func=cmd_compare)

    p_eval = sub.add_parser("eval", help="re-evaluate from checkpoints without retraining")
    p_eval.add_argument("config", help="path to the YAML config")
    p_eval.add_argument("--out", default="out",
                        help="run directory holding the checkpoints (default: out)")
    _add_eval_overrides(p_eval)
    p_eval.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ConfigError, TripleParseError, CheckpointError, PipelineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
