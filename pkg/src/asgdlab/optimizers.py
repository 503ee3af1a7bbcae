"""Baseline optimizers: BATCH, SGD, mini-batch SGD and SimuParallelSGD.

Every optimizer returns an :class:`OptimizeResult` carrying the final state,
the per-worker states, and a trace of ``(touched_samples, wall_nanos, state)``
snapshots that :mod:`asgdlab.metrics` turns into a :class:`RunMetrics` series.
Touched samples follow the global-sum convention: ``T*m`` for BATCH, ``T*b*n``
for the parallel methods (``b = 1`` for plain SGD).
"""

from __future__ import annotations

import multiprocessing as mp
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .core import (
    STREAM_DRAWS,
    STREAM_PARTITION,
    STREAM_WORKER_SHUFFLE,
    ContractViolation,
    GradientObjective,
    ModelState,
    apply_step,
    seeded_rng,
    worker_stream,
)
from .fabric import FabricStats
from .kmeans import KMeansObjective, batch_partial
from .parallel import BACKENDS, RunOutcome, run_workers, snapshot_iterations

KMEANS = KMeansObjective()


@dataclass(frozen=True)
class RunConfig:
    T: int
    epsilon: float
    b: int = 1
    n: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.T < 0:
            raise ContractViolation(f"T must be >= 0, got {self.T}")
        if not (self.epsilon > 0 and np.isfinite(self.epsilon)):
            raise ContractViolation(f"epsilon must be a finite positive number, got {self.epsilon}")
        if self.b < 1:
            raise ContractViolation(f"mini-batch size b must be >= 1, got {self.b}")
        if self.n < 1:
            raise ContractViolation(f"worker count n must be >= 1, got {self.n}")


@dataclass
class TracePoint:
    touched_samples: int
    wall_nanos: int
    prototypes: np.ndarray


@dataclass
class OptimizeResult:
    name: str
    state: ModelState
    worker_states: list[ModelState]
    trace: list[TracePoint]
    touched_samples: int
    wall_nanos: int
    reduce_nanos: int = 0
    fabric: FabricStats | None = None
    completed: list[int] = field(default_factory=list)
    # Per-worker counters, in worker order; empty when there is no fabric.
    worker_fabric: list[FabricStats] = field(default_factory=list)


def _samples(X) -> np.ndarray:
    X = getattr(X, "samples", X)
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ContractViolation(f"dataset must be a non-empty (m, d) array, got shape {X.shape}")
    return X


def _check_model(X: np.ndarray, w0: ModelState) -> None:
    if X.shape[1] != w0.d:
        raise ContractViolation(f"dataset dimension {X.shape[1]} does not match model dimension {w0.d}")


def average_states(states: list[ModelState]) -> ModelState:
    """Elementwise mean, accumulated in worker order.

    Deviations from the first state are averaged and added back, so a set of
    identical states averages to exactly that state.
    """
    if not states:
        raise ContractViolation("cannot average zero states")
    base = states[0].prototypes
    acc = np.zeros_like(base)
    for s in states[1:]:
        acc += s.prototypes - base
    return ModelState(base + acc / len(states))


def partition_shards(m: int, n: int, seed: int) -> np.ndarray:
    """Random disjoint shards of ``H = m // n`` sample indices, shuffled per worker.

    Returns an ``(n, H)`` index array. The ``m - n*H`` leftover samples are dropped.
    """
    H = m // n
    if H < 1:
        raise ContractViolation(f"cannot give {n} workers at least one of {m} samples each")
    perm = seeded_rng(seed, STREAM_PARTITION).permutation(m)[: n * H].reshape(n, H)
    return np.stack([seeded_rng(seed, worker_stream(STREAM_WORKER_SHUFFLE, i)).permutation(perm[i])
                     for i in range(n)])


def sample_draws(m: int, count: int, seed: int) -> np.ndarray:
    """Uniform draws with replacement from ``range(m)``, the SGD sampling stream."""
    return seeded_rng(seed, STREAM_DRAWS).integers(0, m, size=count)


def _serial_trace(T: int, per_iter: int):
    marks = set(snapshot_iterations(T))
    rows: list[TracePoint] = []

    def mark(t: int, start: int, w: ModelState):
        if t in marks:
            rows.append(TracePoint(t * per_iter, time.perf_counter_ns() - start, w.prototypes))

    return rows, mark


def _merged_trace(outcome: RunOutcome, per_iter: int, mean: bool) -> list[TracePoint]:
    lead = outcome.traces[0]
    points = []
    for j, it in enumerate(lead.iterations):
        if mean:
            stack = [tr.states[j] for tr in outcome.traces]
            proto = average_states([ModelState(s) for s in stack]).prototypes
        else:
            proto = lead.states[j]
        points.append(TracePoint(it * per_iter, lead.wall_nanos[j], proto))
    return points


def batch_optimize(X, cfg: RunConfig, w0: ModelState, *, objective: GradientObjective = KMEANS,
                   backend: str = "deterministic") -> OptimizeResult:
    """Full-dataset gradient descent, ``T`` mean-gradient steps.

    With ``cfg.n > 1`` and a parallel backend the gradient is computed
    map-reduce style: each worker sums its contiguous slice of the data, and
    the partial sums are reduced in worker order.
    """
    X = _samples(X)
    _check_model(X, w0)
    m = X.shape[0]
    if backend not in BACKENDS:
        raise ContractViolation(f"unknown backend {backend!r}")
    if cfg.n == 1 or backend == "deterministic" or not isinstance(objective, KMeansObjective):
        return _batch_serial(X, cfg, w0, objective)
    return _batch_mapreduce(X, cfg, w0, backend)


def _batch_serial(X, cfg, w0, objective) -> OptimizeResult:
    m = X.shape[0]
    trace, mark = _serial_trace(cfg.T, m)
    w = w0
    start = time.perf_counter_ns()
    for t in range(cfg.T):
        w = apply_step(w, objective.batch_descent_step(w, X), cfg.epsilon)
        mark(t + 1, start, w)
    wall = time.perf_counter_ns() - start
    return OptimizeResult("batch", w, [w], trace, cfg.T * m, wall, completed=[cfg.T])


def _batch_mapreduce(X, cfg, w0, backend) -> OptimizeResult:
    n, m, k, d = cfg.n, X.shape[0], w0.k, w0.d
    bounds = np.linspace(0, m, n + 1).astype(int)
    if backend == "processes":
        ctx = mp.get_context("fork")
        partial = np.frombuffer(ctx.RawArray("d", n * k * d), dtype=np.float64).reshape(n, k, d)
        barrier = ctx.Barrier(n)
    else:
        partial = np.zeros((n, k, d))
        barrier = threading.Barrier(n)

    def worker(i):
        chunk = X[bounds[i]:bounds[i + 1]]
        w = w0
        for _ in range(cfg.T):
            partial[i] = batch_partial(w.prototypes, chunk)
            barrier.wait()
            total = np.zeros((k, d))
            for j in range(n):
                total += partial[j]
            barrier.wait()
            w = apply_step(w, total / m, cfg.epsilon)
            yield w
        return w

    outcome = run_workers(worker, n, cfg.T, k=k, d=d, backend=backend, seed=cfg.seed,
                          every=1)
    trace = _merged_trace(outcome, m, mean=False)
    return OptimizeResult("batch", outcome.finals[0], outcome.finals, trace, cfg.T * m,
                          outcome.wall_nanos, completed=outcome.completed)


def sgd_optimize(X, cfg: RunConfig, w0: ModelState, *, draws=None,
                 objective: GradientObjective = KMEANS) -> OptimizeResult:
    """``T`` single-sample steps on uniformly drawn samples.

    ``draws`` forces the sample index sequence; by default it comes from the
    seeded draw stream.
    """
    X = _samples(X)
    _check_model(X, w0)
    m = X.shape[0]
    draws = sample_draws(m, cfg.T, cfg.seed) if draws is None else np.asarray(draws)
    if draws.shape[0] < cfg.T:
        raise ContractViolation(f"need {cfg.T} draws, got {draws.shape[0]}")
    trace, mark = _serial_trace(cfg.T, 1)
    w = w0
    start = time.perf_counter_ns()
    for t in range(cfg.T):
        w = apply_step(w, objective.descent_step(w, X[draws[t]]), cfg.epsilon)
        mark(t + 1, start, w)
    wall = time.perf_counter_ns() - start
    return OptimizeResult("sgd", w, [w], trace, cfg.T, wall, completed=[cfg.T])


def minibatch_sgd_optimize(X, cfg: RunConfig, w0: ModelState, *, batches=None,
                           objective: GradientObjective = KMEANS) -> OptimizeResult:
    """``T`` steps, each on the mean delta of ``b`` uniformly drawn samples.

    ``batches`` forces the ``(T, b)`` index array. With ``b = 1`` the default
    draws are the same stream :func:`sgd_optimize` uses.
    """
    X = _samples(X)
    _check_model(X, w0)
    m = X.shape[0]
    b = cfg.b
    if b > m:
        raise ContractViolation(f"mini-batch size {b} exceeds the dataset size {m}")
    if batches is None:
        batches = sample_draws(m, cfg.T * b, cfg.seed).reshape(cfg.T, b)
    batches = np.asarray(batches)
    if batches.shape[0] < cfg.T:
        raise ContractViolation(f"need {cfg.T} mini-batches, got {batches.shape[0]}")
    trace, mark = _serial_trace(cfg.T, b)
    w = w0
    start = time.perf_counter_ns()
    for t in range(cfg.T):
        w = apply_step(w, objective.batch_descent_step(w, X[batches[t]]), cfg.epsilon)
        mark(t + 1, start, w)
    wall = time.perf_counter_ns() - start
    return OptimizeResult("minibatch", w, [w], trace, cfg.T * b, wall, completed=[cfg.T])


def simuparallel_sgd(X, cfg: RunConfig, w0: ModelState, *, backend: str = "deterministic",
                     objective: GradientObjective = KMEANS, on_iteration=None) -> OptimizeResult:
    """Communication-free parallel SGD with one final averaging step.

    Each of the ``n`` workers walks sequentially through its own shuffled
    shard: one sample per step for ``b = 1``, otherwise consecutive blocks of
    ``b`` samples through the mini-batch delta.
    """
    X = _samples(X)
    _check_model(X, w0)
    n, b, T = cfg.n, cfg.b, cfg.T
    shards = partition_shards(X.shape[0], n, cfg.seed)
    H = shards.shape[1]
    if H < T * b:
        raise ContractViolation(f"shard size {H} is smaller than T*b = {T * b}; a worker would run out of samples")

    def worker(i):
        shard = shards[i]
        w = w0
        for t in range(T):
            if b == 1:
                delta = objective.descent_step(w, X[shard[t]])
            else:
                delta = objective.batch_descent_step(w, X[shard[t * b:(t + 1) * b]])
            w = apply_step(w, delta, cfg.epsilon)
            yield w
        return w

    outcome = run_workers(worker, n, T, k=w0.k, d=w0.d, backend=backend, seed=cfg.seed,
                          on_iteration=on_iteration)
    t0 = time.perf_counter_ns()
    state = average_states(outcome.finals)
    reduce_nanos = time.perf_counter_ns() - t0
    if backend != "deterministic":
        # Barrier cost as seen by the reducer: from the last worker's finish to the averaged state.
        reduce_nanos = time.perf_counter_ns() - max(outcome.end_ns)
    trace = _merged_trace(outcome, b * n, mean=True)
    return OptimizeResult("simuparallel", state, outcome.finals, trace, T * b * n,
                          outcome.wall_nanos + reduce_nanos, reduce_nanos, completed=outcome.completed)
