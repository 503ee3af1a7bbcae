"""Experiment drivers behind the CLI subcommands.

Each driver runs its optimizers sequentially (parallelism lives inside the
optimizers), writes CSV/JSON/SVG artifacts under one output directory and
returns a plain-dict summary for printing.
"""

from __future__ import annotations

import json
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from ..asgd import AsgdConfig, asgd_optimize
from ..core import STREAM_INIT, ModelState, seeded_rng
from ..datagen import Dataset, ground_truth_error
from ..kmeans import quantization_error
from ..metrics import RunMetrics, aggregate, aggregate_to_csv, build_metrics, to_csv
from ..optimizers import OptimizeResult, RunConfig, batch_optimize, minibatch_sgd_optimize, sgd_optimize, simuparallel_sgd
from . import plots
from .config import ConfigError, ExperimentConfig, output_path


def init_prototypes(X: np.ndarray, k: int, seed: int) -> ModelState:
    """``k`` distinct samples chosen uniformly; every optimizer starts from these."""
    if k > X.shape[0]:
        raise ConfigError(f"cannot draw {k} initial prototypes from {X.shape[0]} samples")
    return ModelState(X[seeded_rng(seed, STREAM_INIT).choice(X.shape[0], k, replace=False)])


def model_k(cfg: ExperimentConfig, ds: Dataset) -> int:
    k = cfg.k or ds.k
    if k is None:
        raise ConfigError("the dataset carries no ground truth, so k must be given")
    return k


def run_once(cfg: ExperimentConfig, ds: Dataset, seed: int) -> OptimizeResult:
    X = ds.samples
    w0 = init_prototypes(X, model_k(cfg, ds), seed)
    opt = cfg.optimizer
    if opt == "batch":
        return batch_optimize(X, RunConfig(cfg.T, cfg.epsilon, n=cfg.n, seed=seed), w0, backend=cfg.backend)
    if opt == "sgd":
        return sgd_optimize(X, RunConfig(cfg.T, cfg.epsilon, seed=seed), w0)
    if opt == "minibatch":
        return minibatch_sgd_optimize(X, RunConfig(cfg.T, cfg.epsilon, b=cfg.b, seed=seed), w0)
    if opt == "simuparallel":
        return simuparallel_sgd(X, RunConfig(cfg.T, cfg.epsilon, b=cfg.b, n=cfg.n, seed=seed), w0,
                                backend=cfg.backend)
    acfg = AsgdConfig(cfg.T, cfg.epsilon, b=cfg.b, n=cfg.n, seed=seed, fanout=cfg.fanout,
                      partial_fraction=cfg.partial_fraction, buffers=cfg.buffers, silent=cfg.silent,
                      final_aggregation=cfg.final_aggregation, race_probability=cfg.race_probability)
    return asgd_optimize(X, acfg, w0, backend=cfg.backend)


def _final_gt(result: OptimizeResult, ds: Dataset) -> float | None:
    return ground_truth_error(result.state, ds.ground_truth) if ds.ground_truth is not None else None


def _write(out_dir: Path, name: str, data: bytes | str) -> Path:
    path = output_path(out_dir, name)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode()
    path.write_bytes(data)
    return path


def _mean_std(values) -> tuple[float | None, float | None]:
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    a = np.asarray(vals, dtype=np.float64)
    return float(a.mean()), float(a.std())


def run_experiment(cfg: ExperimentConfig, ds: Dataset, out_dir: Path) -> dict:
    """Repetitions with seeds ``seed + rep``; per-rep CSVs, an aggregate CSV and a JSON summary."""
    series: list[RunMetrics] = []
    runs = []
    for rep in range(cfg.repetitions):
        seed = cfg.seed + rep
        result = run_once(cfg, ds, seed)
        metrics = build_metrics(result, ds.samples, ds.ground_truth, objective=cfg.objective,
                                meta={"rep": rep, "seed": seed})
        _write(out_dir, f"{cfg.label}-rep{rep}.csv", to_csv(metrics))
        series.append(metrics)
        runs.append({
            "rep": rep,
            "seed": seed,
            "gt_error": _final_gt(result, ds),
            "objective": quantization_error(result.state, ds.samples) if cfg.objective else None,
            "wall_nanos": result.wall_nanos,
            "reduce_nanos": result.reduce_nanos,
            "touched_samples": result.touched_samples,
            "completed": result.completed,
            "fabric": result.fabric.as_dict() if result.fabric is not None else None,
            "final_state": result.state.prototypes.tolist(),
        })
    _write(out_dir, f"{cfg.label}-aggregate.csv", aggregate_to_csv(aggregate(series)))
    gt_mean, gt_std = _mean_std(r["gt_error"] for r in runs)
    wall_mean, _ = _mean_std(r["wall_nanos"] for r in runs)
    summary = {
        "config": asdict(cfg),
        "gt_error_mean": gt_mean,
        "gt_error_std": gt_std,
        "wall_nanos_mean": wall_mean,
        "runs": runs,
    }
    _write(out_dir, f"{cfg.label}-summary.json", json.dumps(summary, indent=2) + "\n")
    return summary


def _iterations(touched: int, per_iteration: int, what: str) -> int:
    T = touched // per_iteration
    if T < 1:
        raise ConfigError(f"touched-sample budget {touched} is below one iteration of {what} ({per_iteration})")
    return T


def _csv(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join("" if row[h] is None else (format(row[h], ".17g") if isinstance(row[h], float)
                                                      else str(row[h])) for h in header))
    return "\n".join(lines) + "\n"


SCALING_HEADER = ("optimizer", "workers", "T", "b", "touched_samples", "wall_nanos", "reduce_nanos", "gt_error")


def bench_scaling(base: ExperimentConfig, ds: Dataset, out_dir: Path, *, workers: list[int],
                  optimizers: list[str], touched: int) -> list[dict]:
    """Strong scaling: the same total touched samples split over more and more workers."""
    rows = []
    for opt in optimizers:
        for n in workers:
            if opt == "batch":
                T = _iterations(touched, ds.m, "batch")
            else:
                T = _iterations(touched, base.b * n, f"{n} workers x b={base.b}")
            cfg = replace(base, optimizer=opt, n=n, T=T).validate()
            walls, reduces, gts, done = [], [], [], 0
            for rep in range(cfg.repetitions):
                result = run_once(cfg, ds, cfg.seed + rep)
                walls.append(result.wall_nanos)
                reduces.append(result.reduce_nanos)
                gts.append(_final_gt(result, ds))
                done = result.touched_samples
            rows.append({
                "optimizer": opt, "workers": n, "T": T, "b": base.b if opt != "batch" else ds.m,
                "touched_samples": done, "wall_nanos": int(np.median(walls)),
                "reduce_nanos": int(np.median(reduces)),
                "gt_error": float(np.median(gts)) if None not in gts else None,
            })
    _write(out_dir, "scaling.csv", _csv(SCALING_HEADER, rows))
    chart = plots.Chart("Strong scaling", "workers", "wall time [s]", logx=True, logy=True)
    for i, opt in enumerate(optimizers):
        mine = [r for r in rows if r["optimizer"] == opt]
        color = plots.PALETTE[i % len(plots.PALETTE)]
        xs = [r["workers"] for r in mine]
        ys = [r["wall_nanos"] / 1e9 for r in mine]
        chart.add(opt, xs, ys, color=color)
        # Ideal linear scaling projected from the smallest worker count.
        chart.add(f"{opt} linear", xs, [ys[0] * xs[0] / x for x in xs], dotted=True, color=color)
    _write(out_dir, "scaling.svg", plots.render(chart))
    return rows


COMM_HEADER = ("b", "T", "touched_samples", "asgd_iter_nanos", "silent_iter_nanos", "overhead",
               "asgd_gt_error", "silent_gt_error", "sent", "received", "lost_overwritten", "good", "torn", "contended")


def bench_comm(base: ExperimentConfig, ds: Dataset, out_dir: Path, *, b_values: list[int], touched: int) -> list[dict]:
    """Communication frequency sweep: ASGD against its silent ablation at each mini-batch size.

    Iteration cost is the fastest repetition's wall time divided by ``T``;
    overhead is the relative extra cost of ASGD over silent mode.
    """
    rows = []
    chart = plots.Chart("Convergence per mini-batch size", "touched samples", "ground-truth error",
                        logx=True, logy=True)
    for i, b in enumerate(b_values):
        T = _iterations(touched, b * base.n, f"{base.n} workers x b={b}")
        cfg = replace(base, optimizer="asgd", b=b, T=T, silent=False).validate()
        quiet = replace(cfg, silent=True)
        curves = {"asgd": [], "silent": []}
        walls = {"asgd": [], "silent": []}
        gts = {"asgd": [], "silent": []}
        stats = None
        for rep in range(cfg.repetitions):
            seed = cfg.seed + rep
            for tag, c in (("silent", quiet), ("asgd", cfg)):
                result = run_once(c, ds, seed)
                walls[tag].append(result.wall_nanos)
                gts[tag].append(_final_gt(result, ds))
                curves[tag].append(build_metrics(result, ds.samples, ds.ground_truth, objective=False))
                if tag == "asgd":
                    stats = result.fabric if stats is None else stats + result.fabric
        color = plots.PALETTE[i % len(plots.PALETTE)]
        for tag in ("asgd", "silent"):
            agg = aggregate(curves[tag])
            _write(out_dir, f"comm-b{b}-{tag}.csv", aggregate_to_csv(agg))
            if ds.ground_truth is not None:
                chart.add(f"b={b} {tag}", [p.touched_samples for p in agg], [p.gt_error_mean for p in agg],
                          dotted=tag == "silent", color=color)
        a_cost = min(walls["asgd"]) / T
        s_cost = min(walls["silent"]) / T
        row = {
            "b": b, "T": T, "touched_samples": T * b * cfg.n,
            "asgd_iter_nanos": float(a_cost), "silent_iter_nanos": float(s_cost),
            "overhead": float(a_cost / s_cost - 1.0),
            "asgd_gt_error": float(np.median(gts["asgd"])) if None not in gts["asgd"] else None,
            "silent_gt_error": float(np.median(gts["silent"])) if None not in gts["silent"] else None,
        }
        row.update(stats.as_dict())
        rows.append(row)
    _write(out_dir, "comm.csv", _csv(COMM_HEADER, rows))
    _write(out_dir, "comm.svg", plots.render(chart))
    return rows


AGGREGATION_HEADER = ("touched_samples", "first_worker_gt_mean", "first_worker_gt_var",
                      "mean_reduce_gt_mean", "mean_reduce_gt_var")


def compare_aggregation(base: ExperimentConfig, ds: Dataset, out_dir: Path) -> dict:
    """ASGD with first-worker versus mean-reduce final aggregation, same seeds."""
    if ds.ground_truth is None:
        raise ConfigError("compare-aggregation needs a dataset with ground truth")
    agg, finals = {}, {}
    for mode in ("first-worker", "mean-reduce"):
        cfg = replace(base, optimizer="asgd", final_aggregation=mode).validate()
        curves, gts = [], []
        for rep in range(cfg.repetitions):
            result = run_once(cfg, ds, cfg.seed + rep)
            curves.append(build_metrics(result, ds.samples, ds.ground_truth, objective=False))
            gts.append(_final_gt(result, ds))
        agg[mode] = aggregate(curves)
        finals[mode] = gts
    fw, mr = agg["first-worker"], agg["mean-reduce"]
    rows = [{"touched_samples": a.touched_samples, "first_worker_gt_mean": a.gt_error_mean,
             "first_worker_gt_var": a.gt_error_var, "mean_reduce_gt_mean": m.gt_error_mean,
             "mean_reduce_gt_var": m.gt_error_var} for a, m in zip(fw, mr)]
    _write(out_dir, "aggregation.csv", _csv(AGGREGATION_HEADER, rows))
    chart = plots.Chart("Final aggregation", "touched samples", "ground-truth error", logx=True, logy=True)
    chart.add("first-worker", [p.touched_samples for p in fw], [p.gt_error_mean for p in fw])
    chart.add("mean-reduce", [p.touched_samples for p in mr], [p.gt_error_mean for p in mr])
    _write(out_dir, "aggregation.svg", plots.render(chart))
    summary = {mode: {"gt_error_median": float(np.median(v)), "gt_error_mean": float(np.mean(v)),
                      "gt_errors": v} for mode, v in finals.items()}
    _write(out_dir, "aggregation-summary.json", json.dumps(summary, indent=2) + "\n")
    return summary
