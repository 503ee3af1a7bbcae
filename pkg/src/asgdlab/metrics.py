"""Run instrumentation: convergence time series, CSV I/O and repetition aggregates."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .core import ModelState
from .datagen import ground_truth_error
from .fabric import FabricStats
from .kmeans import quantization_error

CSV_HEADER = ("touched_samples", "wall_nanos", "objective", "gt_error")
AGGREGATE_HEADER = ("touched_samples", "wall_nanos_mean", "objective_mean", "objective_var",
                    "gt_error_mean", "gt_error_var")


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class RunPoint:
    touched_samples: int
    wall_nanos: int
    objective: float | None = None
    gt_error: float | None = None


@dataclass
class RunMetrics:
    points: list[RunPoint] = field(default_factory=list)
    fabric: FabricStats | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.points)

    def record(self, point: RunPoint) -> "RunMetrics":
        if self.points:
            last = self.points[-1]
            if point.touched_samples <= last.touched_samples:
                raise MetricsError(
                    f"touched_samples must increase strictly: {point.touched_samples} after {last.touched_samples}"
                )
            if point.wall_nanos < last.wall_nanos:
                raise MetricsError(f"wall_nanos went backwards: {point.wall_nanos} after {last.wall_nanos}")
        self.points.append(point)
        return self

    @property
    def final(self) -> RunPoint | None:
        return self.points[-1] if self.points else None


def record(series: RunMetrics, point: RunPoint) -> RunMetrics:
    return series.record(point)


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _opt_float(s: str) -> float | None:
    return None if s == "" else float(s)


def to_csv(series: RunMetrics) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for p in series.points:
        w.writerow([_fmt(p.touched_samples), _fmt(p.wall_nanos), _fmt(p.objective), _fmt(p.gt_error)])
    return buf.getvalue().encode("ascii")


def from_csv(data: bytes | str) -> RunMetrics:
    text = data.decode("ascii") if isinstance(data, bytes) else data
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise MetricsError(f"expected CSV header {','.join(CSV_HEADER)}")
    series = RunMetrics()
    for row in rows[1:]:
        if len(row) != len(CSV_HEADER):
            raise MetricsError(f"malformed CSV row: {row!r}")
        series.record(RunPoint(int(row[0]), int(row[1]), _opt_float(row[2]), _opt_float(row[3])))
    return series


def build_metrics(result, X: np.ndarray, truth: np.ndarray | None = None, *, objective: bool = True,
                  meta: dict | None = None) -> RunMetrics:
    """Evaluate an optimizer's snapshot trace into a :class:`RunMetrics` series.

    Evaluation happens after the run, so it never perturbs the timings.
    """
    X = getattr(X, "samples", X)
    series = RunMetrics(fabric=result.fabric, meta=dict(meta or {}, optimizer=result.name))
    for tp in result.trace:
        state = ModelState(tp.prototypes)
        series.record(RunPoint(
            tp.touched_samples,
            tp.wall_nanos,
            quantization_error(state, X) if objective else None,
            ground_truth_error(state, truth) if truth is not None else None,
        ))
    return series


def _shifted_moments(values: list[float]) -> tuple[float, float]:
    # Shift by the first value so identical inputs reproduce it exactly.
    a = np.asarray(values, dtype=np.float64)
    dev = a - a[0]
    mean_dev = dev.mean()
    return float(a[0] + mean_dev), float(((dev - mean_dev) ** 2).mean())


@dataclass(frozen=True)
class AggregatePoint:
    touched_samples: int
    wall_nanos_mean: float
    objective_mean: float | None
    objective_var: float | None
    gt_error_mean: float | None
    gt_error_var: float | None


def aggregate(runs: list[RunMetrics]) -> list[AggregatePoint]:
    """Per-point mean and (population) variance across repetitions.

    Runs are aligned by position; only the common prefix with matching touched
    counts is kept.
    """
    if not runs:
        return []
    out = []
    for i in range(min(len(r) for r in runs)):
        pts = [r.points[i] for r in runs]
        touched = pts[0].touched_samples
        if any(p.touched_samples != touched for p in pts):
            break
        wall, _ = _shifted_moments([p.wall_nanos for p in pts])
        obj = gt = (None, None)
        if all(p.objective is not None for p in pts):
            obj = _shifted_moments([p.objective for p in pts])
        if all(p.gt_error is not None for p in pts):
            gt = _shifted_moments([p.gt_error for p in pts])
        out.append(AggregatePoint(touched, wall, obj[0], obj[1], gt[0], gt[1]))
    return out


def aggregate_to_csv(points: list[AggregatePoint]) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGGREGATE_HEADER)
    for p in points:
        w.writerow([_fmt(p.touched_samples), _fmt(p.wall_nanos_mean), _fmt(p.objective_mean), _fmt(p.objective_var),
                    _fmt(p.gt_error_mean), _fmt(p.gt_error_var)])
    return buf.getvalue().encode("ascii")
