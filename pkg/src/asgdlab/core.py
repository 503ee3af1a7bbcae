"""Shared numeric types, seeded random streams and the objective protocol.

All arithmetic is float64. Model states are immutable: every update returns a
new :class:`ModelState` with its version bumped, so states can be handed to
other workers without copying.

Random streams use numpy's ``Philox`` counter-based generator keyed by
``SeedSequence(seed, spawn_key=(stream_id,))``. The same ``(seed, stream_id)``
pair yields the same bit stream on every platform numpy supports.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

_U64 = (1 << 64) - 1

# Stream ids. Per-worker streams are offset by the worker index.
STREAM_PARTITION = 0
STREAM_INIT = 1
STREAM_DRAWS = 2
STREAM_SCHEDULE = 3
STREAM_RACE = 4
STREAM_WORKER_SHUFFLE = 1_000
STREAM_WORKER_COMM = 100_000


class ContractViolation(ValueError):
    """An operation was called with arguments outside its contract."""


def seeded_rng(seed: int, stream_id: int = 0) -> np.random.Generator:
    """Return the deterministic random stream for ``(seed, stream_id)``.

    Negative seeds are folded into the unsigned 64-bit range.
    """
    if stream_id < 0:
        raise ContractViolation(f"stream_id must be >= 0, got {stream_id}")
    ss = np.random.SeedSequence(int(seed) & _U64, spawn_key=(int(stream_id),))
    return np.random.Generator(np.random.Philox(ss))


def worker_stream(base: int, worker: int) -> int:
    return base + worker


def as_vector(values) -> np.ndarray:
    """Coerce to a finite 1-D float64 array."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ContractViolation(f"vector must be 1-D and non-empty, got shape {v.shape}")
    if not np.isfinite(v).all():
        raise ContractViolation("vector contains NaN or Inf")
    return v


@dataclass(frozen=True, eq=False)
class ModelState:
    """``k`` prototypes of dimension ``d`` plus the owner's update counter."""

    prototypes: np.ndarray
    version: int = 0

    def __post_init__(self):
        p = np.array(self.prototypes, dtype=np.float64, copy=True)
        if p.ndim != 2 or p.shape[0] < 1 or p.shape[1] < 1:
            raise ContractViolation(f"prototypes must be a non-empty k x d array, got shape {p.shape}")
        if not np.isfinite(p).all():
            raise ContractViolation("model state contains NaN or Inf")
        p.flags.writeable = False
        object.__setattr__(self, "prototypes", p)

    @property
    def k(self) -> int:
        return self.prototypes.shape[0]

    @property
    def d(self) -> int:
        return self.prototypes.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.prototypes.shape

    @classmethod
    def zeros(cls, k: int, d: int) -> "ModelState":
        return cls(np.zeros((k, d)))

    def with_version(self, version: int) -> "ModelState":
        return ModelState(self.prototypes, version)

    def bitwise_equal(self, other: "ModelState") -> bool:
        return self.shape == other.shape and self.prototypes.tobytes() == other.prototypes.tobytes()

    def __repr__(self):
        return f"ModelState(k={self.k}, d={self.d}, version={self.version})"


@dataclass(frozen=True)
class StepSchedule:
    """Constant learning rate for a whole run."""

    epsilon: float

    def __post_init__(self):
        if not (self.epsilon > 0 and np.isfinite(self.epsilon)):
            raise ContractViolation(f"epsilon must be a finite positive number, got {self.epsilon}")


def apply_step(w: ModelState, delta: np.ndarray, epsilon: float) -> ModelState:
    """Return ``w - epsilon * delta`` with the version incremented.

    ``delta`` is a true gradient (descent direction is its negative).
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != w.shape:
        raise ContractViolation(f"delta shape {delta.shape} does not match state shape {w.shape}")
    if not epsilon > 0:
        raise ContractViolation(f"epsilon must be > 0, got {epsilon}")
    return ModelState(w.prototypes - epsilon * delta, w.version + 1)


class GradientObjective(Protocol):
    """What an optimizer needs from a learning problem.

    Deltas returned by the step methods have the same ``(k, d)`` shape as the
    state and are partial derivatives of the loss, so :func:`apply_step`
    subtracts them.
    """

    def loss(self, w: ModelState, X: np.ndarray) -> float: ...

    def descent_step(self, w: ModelState, x: np.ndarray) -> np.ndarray: ...

    def batch_descent_step(self, w: ModelState, X: np.ndarray) -> np.ndarray: ...
