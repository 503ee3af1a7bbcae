"""Asynchronous parallel SGD.

Each worker runs mini-batch descent on its own shard. Between computing its
mini-batch delta and applying it, a worker drains its mailbox, keeps the peer
states that pass the Parzen-window test, and pulls its step towards their
average. After the step it writes (part of) its new state into the mailboxes
of ``fanout`` random peers. Nothing ever waits for a peer.

With communication switched off (``silent``) or a single worker, the method
is exactly mini-batch SimuParallelSGD.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .core import STREAM_WORKER_COMM, ContractViolation, GradientObjective, ModelState, apply_step, seeded_rng, worker_stream
from .fabric import FabricStats, LocalFabric, SharedFabric, UpdateMessage, plan_recipients, plan_rows
from .parallel import BACKENDS, run_workers
from .optimizers import KMEANS, OptimizeResult, RunConfig, _check_model, _merged_trace, _samples, average_states, partition_shards

AGGREGATIONS = ("first-worker", "mean-reduce")


@dataclass(frozen=True)
class AsgdConfig(RunConfig):
    """``b`` between 500 and 2000 tends to be stable; it is a hint, not a bound."""

    fanout: int = 1
    partial_fraction: float = 0.5
    buffers: int | None = None
    silent: bool = False
    final_aggregation: str = "first-worker"
    race_probability: float = 0.0

    def __post_init__(self):
        super().__post_init__()
        if self.final_aggregation not in AGGREGATIONS:
            raise ContractViolation(f"final_aggregation must be one of {AGGREGATIONS}, got {self.final_aggregation!r}")
        if self.fanout < 0:
            raise ContractViolation("fanout must be >= 0")
        if self.n > 1 and not self.silent and self.fanout >= self.n:
            raise ContractViolation(f"fanout {self.fanout} must be smaller than the worker count {self.n}")
        if self.buffers is not None and self.buffers < 1:
            raise ContractViolation("buffers must be >= 1")
        if not 0 <= self.race_probability <= 1:
            raise ContractViolation("race_probability must be in [0, 1]")
        if not 0 < self.partial_fraction <= 1:
            raise ContractViolation(f"partial_fraction must be in (0, 1], got {self.partial_fraction}")


def _payload(payload) -> tuple[np.ndarray | None, np.ndarray]:
    """Normalise a payload into ``(row indices or None for all rows, rows)``."""
    if isinstance(payload, UpdateMessage):
        return payload.indices, payload.rows
    if isinstance(payload, ModelState):
        return None, payload.prototypes
    if isinstance(payload, tuple):
        idx, rows = payload
        return np.asarray(idx), np.atleast_2d(np.asarray(rows, dtype=np.float64))
    return None, np.atleast_2d(np.asarray(payload, dtype=np.float64))


def parzen_accept(w_i: ModelState, delta: np.ndarray, epsilon: float, w_j) -> int:
    """1 if the local step moves towards ``w_j``, else 0.

    Compares ``||(w_i - epsilon*delta) - w_j||^2`` with ``||w_i - w_j||^2`` over
    the rows ``w_j`` carries; the inequality is strict.
    """
    idx, rows = _payload(w_j)
    P = w_i.prototypes
    return int(_closer(P - epsilon * np.asarray(delta, dtype=np.float64), P, idx, rows))


def _closer(stepped: np.ndarray, P: np.ndarray, idx, rows: np.ndarray) -> bool:
    """Strict ``||stepped - rows||^2 < ||P - rows||^2`` over the rows in ``idx``."""
    if idx is None:
        after, before = stepped - rows, P - rows
    else:
        after, before = stepped.take(idx, 0), P.take(idx, 0)
        after -= rows
        before -= rows
    return np.vdot(after, after) < np.vdot(before, before)


def merge_external(w_i: ModelState, delta_M: np.ndarray, accepted) -> np.ndarray:
    """Pull the mini-batch delta towards the average of accepted peer states.

    Row by row: ``w_i - (sum of accepted rows + w_i) / (A + 1) + delta_M``,
    where ``A`` counts the accepted payloads carrying that row. Rows no payload
    carries keep ``delta_M`` unchanged. Zero-norm payloads are ignored.
    """
    P = w_i.prototypes
    delta_M = np.asarray(delta_M, dtype=np.float64)
    sums = np.zeros_like(P)
    counts = np.zeros(P.shape[0])
    for payload in accepted:
        idx, rows = _payload(payload)
        if not rows.any():
            continue
        if idx is None:
            sums += rows
            counts += 1
        else:
            sums[idx] += rows
            counts[idx] += 1
    if not counts.any():
        return delta_M.copy()
    pulled = P - (sums + P) / (counts + 1)[:, None] + delta_M
    return np.where((counts > 0)[:, None], pulled, delta_M)


def filter_messages(w_i: ModelState, delta_M: np.ndarray, epsilon: float, msgs: list[UpdateMessage]) -> list[UpdateMessage]:
    """Drop malformed, non-finite and zero-norm messages, then apply the Parzen test."""
    keep = []
    for msg in msgs:
        if not msg.is_well_formed(w_i.k) or msg.rows.shape[1] != w_i.d:
            continue
        if not msg.rows.any():
            continue
        if parzen_accept(w_i, delta_M, epsilon, msg):
            keep.append(msg)
    return keep


def _indices_ok(idx: list[int], k: int) -> bool:
    return bool(idx) and idx[0] >= 0 and idx[-1] < k and all(a < b for a, b in zip(idx, idx[1:]))


def absorb(w_i: ModelState, delta_M: np.ndarray, epsilon: float,
           msgs: list[UpdateMessage]) -> tuple[np.ndarray, int]:
    """:func:`filter_messages` followed by :func:`merge_external` in one pass.

    Returns the merged delta and the number of accepted messages. Bit-identical
    to the two-step path; it only avoids recomputing shared intermediates.
    """
    P = w_i.prototypes
    k, d = P.shape
    stepped = P - epsilon * delta_M
    sums = counts = first = None
    accepted = 0
    for msg in msgs:
        idx, rows = msg.indices, msg.rows
        if idx.ndim != 1 or rows.shape != (idx.shape[0], d) or not _indices_ok(idx.tolist(), k):
            continue
        if not np.count_nonzero(rows):
            continue
        # Non-finite rows need no separate check: their squared distances are
        # inf or nan, and the strict comparison below rejects both.
        if not _closer(stepped, P, idx, rows):
            continue
        accepted += 1
        if accepted == 1:
            first = (idx, rows)
            continue
        if sums is None:
            sums = np.zeros_like(P)
            counts = np.zeros(k)
            sums[first[0]] += first[1]
            counts[first[0]] += 1
        sums[idx] += rows
        counts[idx] += 1
    if not accepted:
        return delta_M, 0
    if accepted == 1:
        # Same arithmetic as the general formula with A = 1 on the carried rows;
        # "+ 0.0" reproduces the zero-initialised accumulator (it turns -0.0 into 0.0).
        idx, rows = first
        Pi = P.take(idx, 0)
        out = delta_M.copy()
        out[idx] = Pi - ((rows + 0.0) + Pi) / 2.0 + delta_M.take(idx, 0)
        return out, 1
    pulled = P - (sums + P) / (counts + 1)[:, None] + delta_M
    return np.where((counts > 0)[:, None], pulled, delta_M), accepted


def final_aggregate(states: list[ModelState], mode: str = "first-worker") -> ModelState:
    if not states:
        raise ContractViolation("no worker states to aggregate")
    if mode == "first-worker":
        return states[0]
    if mode == "mean-reduce":
        return average_states(states)
    raise ContractViolation(f"unknown aggregation mode {mode!r}")


def asgd_optimize(X, cfg: AsgdConfig, w0: ModelState, *, backend: str = "deterministic",
                  objective: GradientObjective = KMEANS, on_iteration=None, every: int | None = None) -> OptimizeResult:
    X = _samples(X)
    _check_model(X, w0)
    if backend not in BACKENDS:
        raise ContractViolation(f"unknown backend {backend!r}")
    n, b, T, eps = cfg.n, cfg.b, cfg.T, cfg.epsilon
    shards = partition_shards(X.shape[0], n, cfg.seed)
    H = shards.shape[1]
    if H < T * b:
        raise ContractViolation(f"shard size {H} is smaller than T*b = {T * b}; a worker would run out of samples")

    fabric = None
    if not cfg.silent and n > 1:
        kind = SharedFabric if backend == "processes" else LocalFabric
        fabric = kind(n, w0.k, w0.d, slots=cfg.buffers, partial_fraction=cfg.partial_fraction,
                      race_probability=cfg.race_probability, seed=cfg.seed)

    def worker(i):
        shard = shards[i]
        w = w0
        if fabric is not None:
            # The worker's random communication choices, drawn up front from its own stream.
            rng = seeded_rng(cfg.seed, worker_stream(STREAM_WORKER_COMM, i))
            recipients = plan_recipients(i, n, cfg.fanout, rng, T).tolist()
            picks = plan_rows(w0.k, fabric.rows, rng, T * cfg.fanout).reshape(T, cfg.fanout, -1)
        for t in range(T):
            delta = objective.batch_descent_step(w, X[shard[t * b:(t + 1) * b]])
            if fabric is not None:
                msgs = fabric.drain(i)
                if msgs:
                    delta, good = absorb(w, delta, eps, msgs)
                    fabric.record_good(i, good)
            w = apply_step(w, delta, eps)
            if fabric is not None:
                for j, peer in enumerate(recipients[t]):
                    fabric.post(peer, fabric.message(w, i, indices=picks[t, j]))
            yield w
        return w

    outcome = run_workers(worker, n, T, k=w0.k, d=w0.d, backend=backend, seed=cfg.seed,
                          every=every, on_iteration=on_iteration)
    mean = cfg.final_aggregation == "mean-reduce"
    t0 = time.perf_counter_ns()
    state = final_aggregate(outcome.finals, cfg.final_aggregation)
    reduce_nanos = time.perf_counter_ns() - t0 if mean else 0
    if mean and backend != "deterministic":
        reduce_nanos = time.perf_counter_ns() - max(outcome.end_ns)
    if fabric is not None:
        fabric.quiesce()
    trace = _merged_trace(outcome, b * n, mean=mean)
    per_worker = [fabric.worker_stats(i) for i in range(n)] if fabric is not None else []
    return OptimizeResult("asgd", state, outcome.finals, trace, T * b * n, outcome.wall_nanos + reduce_nanos,
                          reduce_nanos, fabric.stats() if fabric is not None else FabricStats(), outcome.completed,
                          per_worker)
