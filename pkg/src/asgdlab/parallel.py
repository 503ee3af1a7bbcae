"""Execution backends for multi-worker optimizers.

A worker is a generator: it yields its :class:`~asgdlab.core.ModelState` after
every local iteration and returns the final state. That one shape runs under
three backends:

``deterministic``
    Single thread. A seeded round-robin scheduler advances the workers one
    iteration at a time, visiting them in a fresh random order each round.
    Bit-reproducible; used by the tests.
``threads``
    One ``threading.Thread`` per worker. Shares in-process mailboxes.
``processes``
    One forked process per worker, with results and snapshots returned through
    shared memory. The only backend that runs Python workers truly in parallel.
"""

from __future__ import annotations

import math
import multiprocessing as mp
import threading
import time
import traceback
from dataclasses import dataclass, field
from typing import Callable, Generator

import numpy as np

from .core import STREAM_SCHEDULE, ContractViolation, ModelState, seeded_rng

BACKENDS = ("deterministic", "threads", "processes")

Worker = Generator[ModelState, None, ModelState]
WorkerFactory = Callable[[int], Worker]
IterationHook = Callable[[int, int], None]


class WorkerError(RuntimeError):
    """A worker raised; the message carries the worker id and traceback."""


def snapshot_every(T: int) -> int:
    return max(1, math.ceil(T / 1000))


def snapshot_iterations(T: int, every: int | None = None) -> list[int]:
    """Iteration counts (1-based) after which a worker records its state."""
    every = every or snapshot_every(T)
    its = list(range(every, T + 1, every))
    if T >= 1 and (not its or its[-1] != T):
        its.append(T)
    return its


@dataclass
class WorkerTrace:
    iterations: list[int] = field(default_factory=list)
    wall_nanos: list[int] = field(default_factory=list)
    states: list[np.ndarray] = field(default_factory=list)


@dataclass
class RunOutcome:
    finals: list[ModelState]
    traces: list[WorkerTrace]
    completed: list[int]
    wall_nanos: int
    start_ns: list[int]
    end_ns: list[int]


def run_workers(factory: WorkerFactory, n: int, T: int, *, k: int, d: int, backend: str = "deterministic",
                seed: int = 0, every: int | None = None, on_iteration: IterationHook | None = None) -> RunOutcome:
    if backend not in BACKENDS:
        raise ContractViolation(f"unknown backend {backend!r}; expected one of {BACKENDS}")
    marks = set(snapshot_iterations(T, every))
    if backend == "deterministic":
        return _run_deterministic(factory, n, marks, seed, on_iteration)
    if backend == "threads":
        return _run_threads(factory, n, marks, on_iteration)
    return _run_processes(factory, n, T, marks, k, d, on_iteration)


def _drive(gen: Worker, worker: int, marks: set[int], trace: WorkerTrace, hook: IterationHook | None) -> tuple[ModelState, int]:
    t = 0
    while True:
        if hook is not None:
            hook(worker, t)
        try:
            state = next(gen)
        except StopIteration as stop:
            return stop.value, t
        t += 1
        if t in marks:
            trace.iterations.append(t)
            trace.wall_nanos.append(time.perf_counter_ns())
            trace.states.append(state.prototypes)


def _relative(outcome_traces: list[WorkerTrace], origin: int) -> None:
    for tr in outcome_traces:
        tr.wall_nanos = [w - origin for w in tr.wall_nanos]


def _run_deterministic(factory, n, marks, seed, hook) -> RunOutcome:
    gens = [factory(i) for i in range(n)]
    traces = [WorkerTrace() for _ in range(n)]
    finals: list[ModelState | None] = [None] * n
    completed = [0] * n
    sched = seeded_rng(seed, STREAM_SCHEDULE)
    start = time.perf_counter_ns()
    ends = [start] * n
    live = set(range(n))
    while live:
        for i in sched.permutation(n):
            i = int(i)
            if i not in live:
                continue
            if hook is not None:
                hook(i, completed[i])
            try:
                state = next(gens[i])
            except StopIteration as stop:
                finals[i] = stop.value
                ends[i] = time.perf_counter_ns()
                live.discard(i)
                continue
            completed[i] += 1
            if completed[i] in marks:
                tr = traces[i]
                tr.iterations.append(completed[i])
                tr.wall_nanos.append(time.perf_counter_ns())
                tr.states.append(state.prototypes)
    _relative(traces, start)
    return RunOutcome(finals, traces, completed, max(ends) - start, [start] * n, ends)


def _run_threads(factory, n, marks, hook) -> RunOutcome:
    traces = [WorkerTrace() for _ in range(n)]
    finals: list[ModelState | None] = [None] * n
    completed = [0] * n
    starts = [0] * n
    ends = [0] * n
    errors: list[str] = []
    barrier = threading.Barrier(n)

    def body(i):
        try:
            gen = factory(i)
            barrier.wait()
            starts[i] = time.perf_counter_ns()
            finals[i], completed[i] = _drive(gen, i, marks, traces[i], hook)
            ends[i] = time.perf_counter_ns()
        except BaseException:
            errors.append(f"worker {i}:\n{traceback.format_exc()}")
            barrier.abort()

    threads = [threading.Thread(target=body, args=(i,), name=f"worker-{i}") for i in range(n)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    if errors:
        raise WorkerError(errors[0])
    origin = min(starts)
    _relative(traces, origin)
    return RunOutcome(finals, traces, completed, max(ends) - origin, starts, ends)


def _run_processes(factory, n, T, marks, k, d, hook) -> RunOutcome:
    ctx = mp.get_context("fork")
    its = sorted(marks)
    P = len(its)
    finals = np.frombuffer(ctx.RawArray("d", n * k * d), dtype=np.float64).reshape(n, k, d)
    versions = np.frombuffer(ctx.RawArray("q", n), dtype=np.int64)
    snaps = np.frombuffer(ctx.RawArray("d", max(1, n * P * k * d)), dtype=np.float64)
    snaps = snaps[: n * P * k * d].reshape(n, P, k, d)
    snap_wall = np.frombuffer(ctx.RawArray("q", max(1, n * P)), dtype=np.int64)[: n * P].reshape(n, P)
    snap_count = np.frombuffer(ctx.RawArray("q", n), dtype=np.int64)
    timing = np.frombuffer(ctx.RawArray("q", n * 3), dtype=np.int64).reshape(n, 3)
    errq = ctx.SimpleQueue()
    barrier = ctx.Barrier(n)
    slot_of = {t: j for j, t in enumerate(its)}

    def body(i):
        try:
            gen = factory(i)
            barrier.wait()
            timing[i, 0] = time.perf_counter_ns()
            t = 0
            while True:
                if hook is not None:
                    hook(i, t)
                try:
                    state = next(gen)
                except StopIteration as stop:
                    final = stop.value
                    break
                t += 1
                j = slot_of.get(t)
                if j is not None:
                    snaps[i, j] = state.prototypes
                    snap_wall[i, j] = time.perf_counter_ns()
                    snap_count[i] = j + 1
            timing[i, 1] = time.perf_counter_ns()
            timing[i, 2] = t
            finals[i] = final.prototypes
            versions[i] = final.version
        except BaseException:
            errq.put(f"worker {i}:\n{traceback.format_exc()}")
            barrier.abort()
            raise SystemExit(1)

    procs = [ctx.Process(target=body, args=(i,), name=f"worker-{i}") for i in range(n)]
    for p in procs:
        p.start()
    for p in procs:
        p.join()
    if not errq.empty():
        raise WorkerError(errq.get())
    bad = [p.exitcode for p in procs if p.exitcode != 0]
    if bad:
        raise WorkerError(f"worker process exited with code {bad[0]}")

    origin = int(timing[:, 0].min())
    traces = []
    for i in range(n):
        c = int(snap_count[i])
        traces.append(WorkerTrace(its[:c], [int(w) - origin for w in snap_wall[i, :c]],
                                  [snaps[i, j].copy() for j in range(c)]))
    out_finals = [ModelState(finals[i], int(versions[i])) for i in range(n)]
    return RunOutcome(out_finals, traces, [int(c) for c in timing[:, 2]],
                      int(timing[:, 1].max()) - origin, [int(s) for s in timing[:, 0]],
                      [int(e) for e in timing[:, 1]])
