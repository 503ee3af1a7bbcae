"""Simulated one-sided communication between workers.

Every worker owns a mailbox of ``N`` slots that any peer may write into. A
write picks a slot from a hash of ``(sender, message counter)`` and replaces
whatever is there; the previous message is lost. Neither side ever waits for
the other: each slot is guarded by a lock that is only ever *tried*, and a
failed try means the write is dropped (for a writer) or the slot is skipped
until the next drain (for the reader).

Counters are kept in single-writer cells. ``sent`` and ``lost_overwritten``
belong to the sending worker, ``received``, ``good`` and ``torn`` to the
reading worker, so no cell is ever updated by two workers.

Two storage backends share the protocol:

* :class:`LocalFabric` keeps Python objects and ``threading`` locks; it serves
  the deterministic scheduler and the thread backend.
* :class:`SharedFabric` keeps the slots in ``multiprocessing`` shared memory so
  forked worker processes can write into each other's mailboxes.

Race injection (``race_probability > 0``) turns a fraction of writes into
partial writes: the message header and its first few rows land, the rest of
the slot keeps the rows of the message it was overwriting (or uninitialised
NaNs if the slot was empty). The reader sees a message flagged ``torn``.
"""

from __future__ import annotations

import enum
import math
import multiprocessing as mp
import threading
from dataclasses import dataclass, fields

import numpy as np

from .core import STREAM_RACE, ContractViolation, ModelState, seeded_rng, worker_stream

_MASK64 = (1 << 64) - 1


class PostResult(enum.Enum):
    POSTED = "posted"
    OVERWROTE = "overwrote"
    # The slot was busy; the new message was discarded instead of waiting.
    DROPPED = "dropped"


@dataclass(frozen=True, eq=False)
class UpdateMessage:
    """A (possibly partial) model state written into a peer's mailbox.

    ``indices`` are the carried prototype rows in ascending order.
    """

    indices: np.ndarray
    rows: np.ndarray
    sender: int
    sender_version: int
    torn: bool = False

    def bitwise_equal(self, other: "UpdateMessage") -> bool:
        return (
            self.sender == other.sender
            and self.sender_version == other.sender_version
            and self.indices.tobytes() == other.indices.tobytes()
            and self.rows.tobytes() == other.rows.tobytes()
        )

    def is_well_formed(self, k: int) -> bool:
        """Indices strictly ascending within ``[0, k)``, one finite row per index."""
        idx = self.indices
        if idx.ndim != 1 or self.rows.ndim != 2 or self.rows.shape[0] != idx.size or idx.size == 0:
            return False
        if idx[0] < 0 or idx[-1] >= k or (idx.size > 1 and not (idx[1:] > idx[:-1]).all()):
            return False
        return bool(np.isfinite(self.rows).all())


@dataclass
class FabricStats:
    sent: int = 0
    received: int = 0
    lost_overwritten: int = 0
    good: int = 0
    torn: int = 0
    contended: int = 0

    def __add__(self, other: "FabricStats") -> "FabricStats":
        return FabricStats(**{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)})

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def default_slots(n_workers: int) -> int:
    return max(1, min(n_workers - 1, 8))


def rows_per_message(k: int, fraction: float) -> int:
    if not 0 < fraction <= 1:
        raise ContractViolation(f"partial fraction must be in (0, 1], got {fraction}")
    # Round away float noise first: ceil(0.3 * 10) must be 3, not 4.
    r = math.ceil(round(fraction * k, 9))
    if r < 1:
        raise ContractViolation(f"fraction * k must be >= 1, got {fraction} * {k}")
    return r


def plan_recipients(self_id: int, n_workers: int, fanout: int, rng: np.random.Generator, size: int) -> np.ndarray:
    """``(size, fanout)`` recipient ids: each row holds distinct peers drawn uniformly, never ``self_id``."""
    if fanout >= n_workers:
        raise ContractViolation(f"fanout {fanout} must be smaller than the worker count {n_workers}")
    if fanout < 0:
        raise ContractViolation("fanout must be >= 0")
    if fanout == 0:
        return np.empty((size, 0), dtype=np.int64)
    if fanout == 1:
        picks = rng.integers(n_workers - 1, size=(size, 1))
    else:
        picks = np.argsort(rng.random((size, n_workers - 1)), axis=1)[:, :fanout]
    return picks + (picks >= self_id)


def choose_recipients(self_id: int, n_workers: int, fanout: int, rng: np.random.Generator) -> list[int]:
    """Draw ``fanout`` distinct peers uniformly at random, never ``self_id``."""
    return plan_recipients(self_id, n_workers, fanout, rng, 1)[0].tolist()


def plan_rows(k: int, r: int, rng: np.random.Generator, size: int) -> np.ndarray:
    """``(size, r)`` row selections, each ``r`` distinct indices of ``range(k)`` in ascending order."""
    if not 1 <= r <= k:
        raise ContractViolation(f"need 1 <= rows <= k, got {r} of {k}")
    if r == k:
        return np.broadcast_to(np.arange(k), (size, k))
    return np.sort(np.argsort(rng.random((size, k)), axis=1)[:, :r], axis=1)


def partial_rows(w: ModelState, fraction: float, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Pick ``ceil(fraction * k)`` distinct prototype rows; returns ``(indices, rows)``."""
    idx = plan_rows(w.k, rows_per_message(w.k, fraction), rng, 1)[0]
    return idx, w.prototypes[idx]


class Fabric:
    """Mailbox protocol over an abstract slot store."""

    def __init__(self, n_workers: int, k: int, d: int, *, slots: int | None = None,
                 partial_fraction: float = 1.0, race_probability: float = 0.0, seed: int = 0):
        if n_workers < 1:
            raise ContractViolation("need at least one worker")
        if not 0 <= race_probability <= 1:
            raise ContractViolation(f"race probability must be in [0, 1], got {race_probability}")
        self.n_workers = n_workers
        self.n_slots = default_slots(n_workers) if slots is None else int(slots)
        if self.n_slots < 1:
            raise ContractViolation("mailboxes need at least one slot")
        self.k = k
        self.d = d
        self.partial_fraction = float(partial_fraction)
        self.rows = rows_per_message(k, partial_fraction)
        self.race_probability = float(race_probability)
        # One race stream per sender: random streams are never shared between workers.
        self._race_rngs = [seeded_rng(seed, worker_stream(STREAM_RACE, i)) for i in range(n_workers)]

    # --- slot store, provided by subclasses ---------------------------------
    def _try_lock(self, owner: int, slot: int) -> bool:
        raise NotImplementedError

    def _unlock(self, owner: int, slot: int) -> None:
        raise NotImplementedError

    def _load(self, owner: int, slot: int) -> UpdateMessage | None:
        raise NotImplementedError

    def _occupied(self, owner: int) -> list[int]:
        """Unlocked occupancy hint: slots that look full. A stale answer only delays a message to the next drain."""
        raise NotImplementedError

    def _store(self, owner: int, slot: int, msg: UpdateMessage | None) -> None:
        raise NotImplementedError

    def _bump(self, worker: int, counter: str, by: int = 1) -> None:
        raise NotImplementedError

    def _get(self, worker: int, counter: str) -> int:
        raise NotImplementedError

    # --- protocol -------------------------------------------------------------
    def slot_for(self, sender: int, counter: int) -> int:
        return _splitmix64((sender << 32) ^ counter) % self.n_slots

    def message(self, w: ModelState, sender: int, rng: np.random.Generator | None = None, *,
                indices: np.ndarray | None = None) -> UpdateMessage:
        """Wrap (part of) ``w`` for posting; ``indices`` overrides the random row pick."""
        if indices is None:
            if rng is None:
                raise ContractViolation("need an rng or explicit row indices")
            indices, rows = partial_rows(w, self.partial_fraction, rng)
        else:
            rows = w.prototypes.take(indices, 0)
        return UpdateMessage(indices, rows, sender, w.version)

    def post(self, to: int, msg: UpdateMessage, slot: int | None = None) -> PostResult:
        if not 0 <= to < self.n_workers:
            raise ContractViolation(f"no such worker: {to}")
        sender = msg.sender
        counter = self._get(sender, "sent")
        self._bump(sender, "sent")
        if slot is None:
            slot = self.slot_for(sender, counter)
        if not self._try_lock(to, slot):
            self._bump(sender, "lost_overwritten")
            self._bump(sender, "contended")
            return PostResult.DROPPED
        try:
            old = self._load(to, slot)
            if self.race_probability > 0:
                rng = self._race_rngs[sender]
                if rng.random() < self.race_probability:
                    msg = self._tear(msg, old, rng)
            self._store(to, slot, msg)
        finally:
            self._unlock(to, slot)
        if old is not None:
            self._bump(sender, "lost_overwritten")
            return PostResult.OVERWROTE
        return PostResult.POSTED

    def drain(self, owner: int) -> list[UpdateMessage]:
        """Take every visible message out of ``owner``'s mailbox, in slot order."""
        out = []
        for slot in self._occupied(owner):
            if not self._try_lock(owner, slot):
                self._bump(owner, "contended")
                continue
            try:
                msg = self._load(owner, slot)
                if msg is not None:
                    self._store(owner, slot, None)
            finally:
                self._unlock(owner, slot)
            if msg is not None:
                out.append(msg)
        if out:
            self._bump(owner, "received", len(out))
            torn = sum(m.torn for m in out)
            if torn:
                self._bump(owner, "torn", torn)
        return out

    def record_good(self, owner: int, count: int) -> None:
        if count:
            self._bump(owner, "good", count)

    def quiesce(self) -> None:
        """Drain every mailbox; call once all workers have stopped."""
        for owner in range(self.n_workers):
            self.drain(owner)

    def worker_stats(self, worker: int) -> FabricStats:
        return FabricStats(**{f.name: self._get(worker, f.name) for f in fields(FabricStats)})

    def stats(self) -> FabricStats:
        total = FabricStats()
        for i in range(self.n_workers):
            total = total + self.worker_stats(i)
        return total

    def _tear(self, new: UpdateMessage, old: UpdateMessage | None, rng: np.random.Generator) -> UpdateMessage:
        r = new.rows.shape[0]
        cut = int(rng.integers(0, r))
        if old is not None and old.rows.shape == new.rows.shape:
            tail = old.rows[cut:]
        else:
            tail = np.full((r - cut, new.rows.shape[1]), np.nan)
        rows = np.concatenate([new.rows[:cut], tail])
        return UpdateMessage(new.indices, rows, new.sender, new.sender_version, torn=True)


_COUNTERS = [f.name for f in fields(FabricStats)]


class LocalFabric(Fabric):
    """In-process mailboxes for the deterministic scheduler and worker threads."""

    def __init__(self, n_workers: int, k: int, d: int, **kw):
        super().__init__(n_workers, k, d, **kw)
        self._slots: list[list[UpdateMessage | None]] = [[None] * self.n_slots for _ in range(n_workers)]
        self._locks = [[threading.Lock() for _ in range(self.n_slots)] for _ in range(n_workers)]
        self._counters = [dict.fromkeys(_COUNTERS, 0) for _ in range(n_workers)]

    def _try_lock(self, owner, slot):
        return self._locks[owner][slot].acquire(blocking=False)

    def _unlock(self, owner, slot):
        self._locks[owner][slot].release()

    def _load(self, owner, slot):
        return self._slots[owner][slot]

    def _occupied(self, owner):
        return [s for s, m in enumerate(self._slots[owner]) if m is not None]

    def _store(self, owner, slot, msg):
        self._slots[owner][slot] = msg

    def _bump(self, worker, counter, by=1):
        self._counters[worker][counter] += by

    def _get(self, worker, counter):
        return self._counters[worker][counter]


class SharedFabric(Fabric):
    """Mailboxes in shared memory, usable from ``fork``-ed worker processes.

    Must be constructed in the parent before the workers are forked.
    """

    def __init__(self, n_workers: int, k: int, d: int, *, ctx=None, **kw):
        super().__init__(n_workers, k, d, **kw)
        ctx = ctx or mp.get_context("fork")
        n, N, r = n_workers, self.n_slots, self.rows
        self._occ = np.frombuffer(ctx.RawArray("q", n * N), dtype=np.int64).reshape(n, N)
        # header: sender, sender_version, torn
        self._hdr = np.frombuffer(ctx.RawArray("q", n * N * 3), dtype=np.int64).reshape(n, N, 3)
        self._idx = np.frombuffer(ctx.RawArray("q", n * N * r), dtype=np.int64).reshape(n, N, r)
        self._rows = np.frombuffer(ctx.RawArray("d", n * N * r * d), dtype=np.float64).reshape(n, N, r, d)
        self._ctr = np.frombuffer(ctx.RawArray("q", n * len(_COUNTERS)), dtype=np.int64).reshape(n, -1)
        self._locks = [[ctx.Lock() for _ in range(N)] for _ in range(n)]

    def _try_lock(self, owner, slot):
        return self._locks[owner][slot].acquire(False)

    def _unlock(self, owner, slot):
        self._locks[owner][slot].release()

    def _occupied(self, owner):
        return np.flatnonzero(self._occ[owner]).tolist()

    def _load(self, owner, slot):
        if not self._occ[owner, slot]:
            return None
        sender, version, torn = (int(v) for v in self._hdr[owner, slot])
        return UpdateMessage(self._idx[owner, slot].copy(), self._rows[owner, slot].copy(),
                             sender, version, bool(torn))

    def _store(self, owner, slot, msg):
        if msg is None:
            self._occ[owner, slot] = 0
            return
        if msg.rows.shape != (self.rows, self.d):
            raise ContractViolation(f"shared mailboxes carry {self.rows} rows per message")
        self._hdr[owner, slot] = (msg.sender, msg.sender_version, int(msg.torn))
        self._idx[owner, slot] = msg.indices
        self._rows[owner, slot] = msg.rows
        self._occ[owner, slot] = 1

    def _bump(self, worker, counter, by=1):
        self._ctr[worker, _COUNTERS.index(counter)] += by

    def _get(self, worker, counter):
        return int(self._ctr[worker, _COUNTERS.index(counter)])
