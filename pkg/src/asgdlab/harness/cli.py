"""Command-line front end.

Subcommands: ``gen-data``, ``run``, ``bench-scaling``, ``bench-comm`` and
``compare-aggregation``. Exit status is 0 on success, 1 when a run fails at
runtime (unreadable or corrupt dataset, worker crash) and 2 for usage or
configuration errors.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..core import ContractViolation
from ..datagen import DatasetFormatError, GenerationError, GenSpec, generate, load, save
from ..metrics import MetricsError
from ..parallel import BACKENDS, WorkerError
from . import experiments
from .config import OPTIMIZERS, ConfigError, build_config, load_config_file, output_path, resolve_output_dir

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not values or min(values) < 1:
        raise argparse.ArgumentTypeError("values must be positive integers")
    return values


def _str_list(text: str) -> list[str]:
    values = [v.strip() for v in text.split(",") if v.strip()]
    bad = [v for v in values if v not in OPTIMIZERS]
    if not values or bad:
        raise argparse.ArgumentTypeError(f"optimizers must be drawn from {', '.join(OPTIMIZERS)}")
    return values


def _add_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--output-dir", help="artifact directory (default: $ASGDLAB_OUTPUT_DIR, then the config file)")


def _add_experiment(p: argparse.ArgumentParser) -> None:
    _add_output(p)
    p.add_argument("--config", help="flat 'key = value' file; flags override it")
    p.add_argument("--data", dest="dataset", help="dataset file written by gen-data")
    p.add_argument("--optimizer", choices=OPTIMIZERS)
    p.add_argument("--T", type=int, help="iterations per worker")
    p.add_argument("--epsilon", type=float, help="step size")
    p.add_argument("--b", type=int, help="mini-batch size")
    p.add_argument("--n", type=int, help="worker count")
    p.add_argument("--seed", type=int)
    p.add_argument("--repetitions", type=int)
    p.add_argument("--k", type=int, help="prototype count (default: the dataset's)")
    p.add_argument("--backend", choices=BACKENDS)
    p.add_argument("--fanout", type=int)
    p.add_argument("--partial-fraction", type=float)
    p.add_argument("--buffers", type=int, help="mailbox slots per worker")
    p.add_argument("--silent", action=argparse.BooleanOptionalAction, default=None)
    p.add_argument("--final-aggregation", choices=("first-worker", "mean-reduce"))
    p.add_argument("--race-probability", type=float)
    p.add_argument("--objective", action=argparse.BooleanOptionalAction, default=None,
                   help="evaluate the quantization error along the trace")
    p.add_argument("--name", help="prefix for artifact names")


EXPERIMENT_KEYS = ("dataset", "optimizer", "T", "epsilon", "b", "n", "seed", "repetitions", "k", "backend",
                   "fanout", "partial_fraction", "buffers", "silent", "final_aggregation", "race_probability",
                   "objective", "name")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asgdlab", description="Asynchronous parallel SGD experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic clustered dataset")
    _add_output(g)
    g.add_argument("--m", type=int, required=True)
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--k", type=int, required=True)
    g.add_argument("--min-center-distance", type=float, default=1.0)
    g.add_argument("--stddev", type=float, default=0.1, help="per-cluster standard deviation")
    g.add_argument("--box", type=float, default=None, help="side of the center hypercube")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True, help="file name inside the output directory")

    r = sub.add_parser("run", help="run one optimizer for several repetitions")
    _add_experiment(r)

    s = sub.add_parser("bench-scaling", help="runtime against worker count at fixed touched samples")
    _add_experiment(s)
    s.add_argument("--workers", type=_int_list, default=[1, 2, 4, 8])
    s.add_argument("--optimizers", type=_str_list, default=["asgd", "simuparallel"])
    s.add_argument("--touched", type=int, help="total touched samples (default T*b)")

    c = sub.add_parser("bench-comm", help="ASGD against silent mode across mini-batch sizes")
    _add_experiment(c)
    c.add_argument("--b-values", type=_int_list, default=[100, 500, 2000, 100000])
    c.add_argument("--touched", type=int, help="total touched samples (default T*b*n)")

    a = sub.add_parser("compare-aggregation", help="first-worker versus mean-reduce final aggregation")
    _add_experiment(a)
    return parser


def _experiment(args, **forced):
    file_values = load_config_file(args.config) if getattr(args, "config", None) else {}
    overrides = {k: getattr(args, k) for k in EXPERIMENT_KEYS}
    for key, value in forced.items():
        if overrides.get(key) is None and key not in file_values:
            overrides[key] = value
    cfg = build_config(file_values, overrides)
    out_dir = resolve_output_dir(args.output_dir, cfg.output_dir)
    return cfg, out_dir


def _dataset(cfg, out_dir: Path):
    path = Path(cfg.dataset)
    if not path.exists() and not path.is_absolute() and (out_dir / path).exists():
        path = out_dir / path
    if not path.exists():
        raise ConfigError(f"dataset file not found: {cfg.dataset}")
    return load(path)


def cmd_gen_data(args) -> int:
    spec = GenSpec(args.m, args.d, args.k, min_center_distance=args.min_center_distance,
                   cluster_stddev=args.stddev, seed=args.seed, box=args.box)
    out_dir = resolve_output_dir(args.output_dir)
    path = output_path(out_dir, args.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    size = save(generate(spec), path)
    print(f"wrote {path}: m={spec.m} d={spec.d} k={spec.k}, {size} bytes")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg, out_dir = _experiment(args)
    summary = experiments.run_experiment(cfg, _dataset(cfg, out_dir), out_dir)
    wall = summary["wall_nanos_mean"] / 1e9
    if summary["gt_error_mean"] is None:
        print(f"{cfg.label}: {cfg.repetitions} runs, mean wall time {wall:.4f} s (no ground truth)")
    else:
        print(f"{cfg.label}: gt_error {summary['gt_error_mean']:.6g} ± {summary['gt_error_std']:.6g} "
              f"over {cfg.repetitions} runs, mean wall time {wall:.4f} s")
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_bench_scaling(args) -> int:
    cfg, out_dir = _experiment(args, backend="processes", repetitions=1)
    touched = args.touched or cfg.T * cfg.b
    rows = experiments.bench_scaling(cfg, _dataset(cfg, out_dir), out_dir, workers=args.workers,
                                     optimizers=args.optimizers, touched=touched)
    print(f"{'optimizer':<14}{'workers':>8}{'T':>8}{'wall [s]':>12}{'reduce [us]':>13}{'gt_error':>12}")
    for r in rows:
        gt = "" if r["gt_error"] is None else f"{r['gt_error']:.5g}"
        print(f"{r['optimizer']:<14}{r['workers']:>8}{r['T']:>8}{r['wall_nanos'] / 1e9:>12.4f}"
              f"{r['reduce_nanos'] / 1e3:>13.1f}{gt:>12}")
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_bench_comm(args) -> int:
    cfg, out_dir = _experiment(args, optimizer="asgd")
    touched = args.touched or cfg.T * cfg.b * cfg.n
    rows = experiments.bench_comm(cfg, _dataset(cfg, out_dir), out_dir, b_values=args.b_values, touched=touched)
    print(f"{'b':>8}{'T':>6}{'asgd [us/it]':>14}{'silent [us/it]':>16}{'overhead':>10}{'received':>10}{'good':>8}")
    for r in rows:
        print(f"{r['b']:>8}{r['T']:>6}{r['asgd_iter_nanos'] / 1e3:>14.1f}{r['silent_iter_nanos'] / 1e3:>16.1f}"
              f"{100 * r['overhead']:>9.1f}%{r['received']:>10}{r['good']:>8}")
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_compare_aggregation(args) -> int:
    cfg, out_dir = _experiment(args, optimizer="asgd", objective=False)
    summary = experiments.compare_aggregation(cfg, _dataset(cfg, out_dir), out_dir)
    for mode, s in summary.items():
        print(f"{mode:<14} median gt_error {s['gt_error_median']:.6g}")
    print(f"artifacts in {out_dir}")
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "run": cmd_run,
    "bench-scaling": cmd_bench_scaling,
    "bench-comm": cmd_bench_comm,
    "compare-aggregation": cmd_compare_aggregation,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    try:
        return COMMANDS[args.command](args)
    except (DatasetFormatError, GenerationError, MetricsError, WorkerError, OSError) as exc:
        print(f"asgdlab: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ConfigError, ContractViolation) as exc:
        print(f"asgdlab: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
