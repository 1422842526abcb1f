"""Command line entry point: ``permland <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 numeric divergence,
4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .experiments import (TASKS, ConfigError, ExperimentConfig, run_count_tables, run_exchange_demo,
                          run_merge_path, run_probe, run_width_sweep, train_teacher)
from .idx import IdxError
from .optimize import DivergenceError

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_IO = 0, 2, 3, 4

# flag name -> (config field, type)
_CONFIG_FLAGS = {
    "task": str, "seed": int, "activation": str, "loss_kind": str, "n_samples": int, "layer": int,
    "n_delta_steps": int, "delta_floor_ratio": float, "equalization_steps": int, "max_iters": int,
    "grad_tolerance": float, "method": str, "images": str, "labels": str, "downsample": str,
    "target_i": int, "cycle_j": int, "steps_per_stage": int, "order_K": int, "n_probes": int,
    "radius": float, "generator_width": int, "teacher_max_iters": int, "output_dir": str,
}


class _ArgError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _ArgError(message)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from exc


def _add_verbose(p: argparse.ArgumentParser) -> None:
    p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    _add_verbose(p)
    p.add_argument("--config", help="JSON file with ExperimentConfig fields; flags override it")
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--widths", type=_int_list, help="layer widths n0,...,nd")
    p.add_argument("--pair", type=_int_list, help="explicit pair l,m (default: most cosine-similar)")
    p.add_argument("--no-spectrum", action="store_true", help="skip the Hessian analysis")
    for name, typ in _CONFIG_FLAGS.items():
        if name in ("task",):
            continue
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="permland", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name, text in [("teacher", "build and save a teacher network"),
                       ("merge-path", "construct a permutation path and analyze its midpoint"),
                       ("exchange", "equal-loss neuron exchanges at a permutation point"),
                       ("probe", "probe the equal-loss hyperplane of a K-th order point")]:
        _add_config_flags(sub.add_parser(name, help=text))
    sw = sub.add_parser("sweep", help="plateau loss versus hidden width")
    _add_config_flags(sw)
    sw.add_argument("--hidden", type=_int_list, default=[4, 8, 12], help="hidden widths H")
    sw.add_argument("--seeds", type=_int_list, default=[0, 1, 2])
    cnt = sub.add_parser("count", help="write the counting table as CSV")
    _add_verbose(cnt)
    cnt.add_argument("--max-n", type=int, default=8)
    cnt.add_argument("--max-K", dest="max_K", type=int, default=4)
    cnt.add_argument("--out", help="CSV path (default: stdout)")
    return parser


def config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    base: dict = {}
    if getattr(args, "config", None):
        try:
            with open(args.config) as fh:
                base = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file is not valid JSON: {exc}") from exc
        if not isinstance(base, dict):
            raise ConfigError("config file must hold a JSON object")
    for name in list(_CONFIG_FLAGS) + ["widths", "pair"]:
        v = getattr(args, name, None)
        if v is not None:
            base[name] = v
    if getattr(args, "no_spectrum", False):
        base["spectrum"] = False
    try:
        return ExperimentConfig.from_dict(base).resolved()
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _print(obj) -> None:
    print(json.dumps({k: v for k, v in obj.items() if k not in ("trace", "paths")}, indent=2, sort_keys=True))


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _ArgError as exc:
        print(f"permland: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "count":
            if args.max_n < 2 or args.max_K < 1:
                raise ConfigError("need --max-n >= 2 and --max-K >= 1")
            rows = run_count_tables(args.max_n, args.max_K, args.out)
            if args.out is None:
                cols = list(rows[0])
                print(",".join(cols))
                for r in rows:
                    print(",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols))
            return EXIT_OK
        cfg = config_from_args(args)
        if args.command == "teacher":
            _, _, meta = train_teacher(cfg)
            _print(meta)
        elif args.command == "merge-path":
            _print(run_merge_path(cfg))
        elif args.command == "exchange":
            _print(run_exchange_demo(cfg))
        elif args.command == "probe":
            _print(run_probe(cfg))
        elif args.command == "sweep":
            res = run_width_sweep(cfg, args.hidden, args.seeds)
            _print({"means": res["means"]})
    except ConfigError as exc:
        print(f"permland: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"permland: numeric divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, IdxError) as exc:
        print(f"permland: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
