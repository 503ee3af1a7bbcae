"""K-Means quantization objective and its gradient steps.

The loss is ``E(w) = sum_i 0.5 * ||x_i - w_{s_i(w)}||^2`` where ``s_i(w)`` is
the index of the nearest prototype (ties go to the lowest index).

Deltas follow the package-wide convention of returning the gradient, so the
row for prototype ``k`` is ``w_k - x`` rather than ``x - w_k``.
:func:`batch_step` normalises by the batch size ``m'`` (not by the number of
samples assigned to each prototype), which makes it the gradient of ``E / m'``.
"""

from __future__ import annotations

import numpy as np

from .core import ContractViolation, ModelState

_CHUNK = 65_536


def _check_samples(X: np.ndarray, d: int) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X.reshape(1, -1)
    if X.ndim != 2 or X.shape[1] != d:
        raise ContractViolation(f"samples must have shape (m, {d}), got {X.shape}")
    return X


def squared_distances(P: np.ndarray, X: np.ndarray) -> np.ndarray:
    """``(m, k)`` matrix of squared Euclidean distances between samples and prototypes."""
    diff = X[:, None, :] - P[None, :, :]
    return np.einsum("mkd,mkd->mk", diff, diff)


def assign_rows(P: np.ndarray, X: np.ndarray) -> np.ndarray:
    # ||x||^2 is constant per row, so ||w||^2 - 2 x.w ranks prototypes like the
    # full distance. argmin returns the first minimum: lowest-index tie-break.
    score = np.einsum("kd,kd->k", P, P) - 2.0 * (X @ P.T)
    return np.argmin(score, axis=1)


def assign(x, w: ModelState) -> int:
    """Index of the prototype closest to ``x``."""
    X = _check_samples(x, w.d)
    if X.shape[0] != 1:
        raise ContractViolation("assign takes a single sample")
    return int(assign_rows(w.prototypes, X)[0])


def assign_all(w: ModelState, X: np.ndarray) -> np.ndarray:
    X = _check_samples(X, w.d)
    out = np.empty(X.shape[0], dtype=np.intp)
    for start in range(0, X.shape[0], _CHUNK):
        out[start:start + _CHUNK] = assign_rows(w.prototypes, X[start:start + _CHUNK])
    return out


def quantization_error(w: ModelState, X: np.ndarray) -> float:
    """Summed half squared distance of every sample to its nearest prototype."""
    X = _check_samples(X, w.d)
    if X.shape[0] == 0:
        raise ContractViolation("quantization error of an empty sample set is undefined")
    P = w.prototypes
    total = 0.0
    for start in range(0, X.shape[0], _CHUNK):
        chunk = X[start:start + _CHUNK]
        diff = chunk - P[assign_rows(P, chunk)]
        total += 0.5 * float(np.einsum("md,md->", diff, diff))
    return total


def online_step(w: ModelState, x) -> np.ndarray:
    """Single-sample delta: ``w_s - x`` on the nearest row ``s``, zero elsewhere."""
    X = _check_samples(x, w.d)
    if X.shape[0] != 1:
        raise ContractViolation("online_step takes a single sample")
    return online_delta(w.prototypes, X[0])


def online_delta(P: np.ndarray, x: np.ndarray) -> np.ndarray:
    # Same distance kernel as the batch path so b=1 batches reproduce it bit for bit.
    s = int(assign_rows(P, x.reshape(1, -1))[0])
    delta = np.zeros_like(P)
    delta[s] = P[s] - x
    return delta


def batch_step(w: ModelState, X: np.ndarray) -> np.ndarray:
    """Mini-batch / full-batch delta ``(1/m') * sum_i (w_k - x_i)`` over samples assigned to ``k``.

    Prototypes without assigned samples get a zero row.
    """
    X = _check_samples(X, w.d)
    if X.shape[0] == 0:
        raise ContractViolation("batch_step needs at least one sample")
    return batch_delta(w.prototypes, X)


def batch_delta(P: np.ndarray, X: np.ndarray) -> np.ndarray:
    return batch_partial(P, X) / X.shape[0]


def batch_partial(P: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Un-normalised per-prototype sums of ``w_k - x_i`` (the map side of a map-reduce step)."""
    k, d = P.shape
    cols = np.arange(d)
    sums = np.zeros(k * d)
    for start in range(0, X.shape[0], _CHUNK):
        chunk = X[start:start + _CHUNK]
        labels = assign_rows(P, chunk)
        # Sequential accumulation in sample order; a single sample reproduces its own delta exactly.
        sums += np.bincount((labels[:, None] * d + cols).ravel(), weights=(P[labels] - chunk).ravel(),
                            minlength=k * d)
    return sums.reshape(k, d)


class KMeansObjective:
    """:class:`~asgdlab.core.GradientObjective` for K-Means."""

    name = "kmeans"

    def loss(self, w: ModelState, X: np.ndarray) -> float:
        return quantization_error(w, X)

    def descent_step(self, w: ModelState, x: np.ndarray) -> np.ndarray:
        return online_delta(w.prototypes, x)

    def batch_descent_step(self, w: ModelState, X: np.ndarray) -> np.ndarray:
        return batch_delta(w.prototypes, X)
