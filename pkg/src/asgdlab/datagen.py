"""Synthetic clustered datasets and the binary dataset file format.

File layout, all little-endian::

    offset  size  field
    0       4     magic b"ASGD"
    4       4     format version (u32, currently 1)
    8       8     m, sample count (u64)
    16      4     d, dimension (u32)
    20      4     k, cluster count (u32)
    24      4     flags (u32); bit 0 set = ground truth follows the samples
    28      8*m*d samples, float64, row-major
    ...     8*k*d ground-truth centers, float64, row-major (only if flag bit 0)
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .core import ContractViolation, ModelState, seeded_rng

MAGIC = b"ASGD"
FORMAT_VERSION = 1
HEADER = struct.Struct("<4sIQIII")
FLAG_GROUND_TRUTH = 1


class DatasetFormatError(ValueError):
    """A dataset file is malformed, truncated, or of an unknown version."""


class GenerationError(RuntimeError):
    """Cluster centers could not be placed with the requested separation."""


@dataclass(frozen=True)
class GenSpec:
    m: int
    d: int
    k: int
    min_center_distance: float = 1.0
    cluster_stddev: float = 0.1
    seed: int = 0
    # Side length of the hypercube centers are drawn from; default 10 * min_center_distance.
    box: float | None = None
    max_attempts: int = 100_000

    def __post_init__(self):
        if self.k < 1 or self.m < self.k:
            raise ContractViolation(f"need m >= k >= 1, got m={self.m}, k={self.k}")
        if self.d < 1:
            raise ContractViolation(f"need d >= 1, got {self.d}")
        if not self.min_center_distance > 0:
            raise ContractViolation("min_center_distance must be > 0")
        if not self.cluster_stddev > 0:
            raise ContractViolation("cluster_stddev must be > 0")
        if self.box is not None and not self.box > 0:
            raise ContractViolation("box must be > 0")

    @property
    def side(self) -> float:
        return self.box if self.box is not None else 10.0 * self.min_center_distance


@dataclass(frozen=True, eq=False)
class Dataset:
    samples: np.ndarray
    ground_truth: np.ndarray | None = None
    k: int | None = None

    def __post_init__(self):
        X = np.ascontiguousarray(self.samples, dtype=np.float64)
        if X.ndim != 2:
            raise ContractViolation(f"samples must be (m, d), got shape {X.shape}")
        X.flags.writeable = False
        object.__setattr__(self, "samples", X)
        if self.ground_truth is not None:
            G = np.ascontiguousarray(self.ground_truth, dtype=np.float64)
            if G.ndim != 2 or G.shape[1] != X.shape[1]:
                raise ContractViolation("ground truth must be (k, d) with the samples' d")
            G.flags.writeable = False
            object.__setattr__(self, "ground_truth", G)
            object.__setattr__(self, "k", G.shape[0])

    @property
    def m(self) -> int:
        return self.samples.shape[0]

    @property
    def d(self) -> int:
        return self.samples.shape[1]

    def bitwise_equal(self, other: "Dataset") -> bool:
        if self.samples.tobytes() != other.samples.tobytes():
            return False
        if (self.ground_truth is None) != (other.ground_truth is None):
            return False
        return self.ground_truth is None or self.ground_truth.tobytes() == other.ground_truth.tobytes()


def sample_centers(spec: GenSpec, rng: np.random.Generator) -> np.ndarray:
    centers = np.empty((spec.k, spec.d))
    placed = 0
    attempts = 0
    min_sq = spec.min_center_distance ** 2
    while placed < spec.k:
        if attempts >= spec.max_attempts:
            raise GenerationError(
                f"placed only {placed} of {spec.k} centers with separation {spec.min_center_distance} "
                f"in a box of side {spec.side} after {attempts} attempts"
            )
        attempts += 1
        c = rng.uniform(0.0, spec.side, size=spec.d)
        if placed and (((centers[:placed] - c) ** 2).sum(axis=1) < min_sq).any():
            continue
        centers[placed] = c
        placed += 1
    return centers


def generate(spec: GenSpec) -> Dataset:
    """Draw ``k`` separated centers, then ``m`` isotropic Gaussian samples around random centers."""
    rng = seeded_rng(spec.seed, 0)
    centers = sample_centers(spec, rng)
    labels = rng.integers(0, spec.k, size=spec.m)
    X = centers[labels] + spec.cluster_stddev * rng.standard_normal((spec.m, spec.d))
    return Dataset(X, centers)


def ground_truth_error(w: ModelState | np.ndarray, truth: np.ndarray) -> float:
    """Sum over true centers of the Euclidean distance to the nearest learned prototype."""
    P = w.prototypes if isinstance(w, ModelState) else np.asarray(w, dtype=np.float64)
    G = np.asarray(truth, dtype=np.float64)
    if G.ndim != 2 or P.ndim != 2 or G.shape[1] != P.shape[1]:
        raise ContractViolation(f"dimension mismatch: truth {G.shape} vs prototypes {P.shape}")
    diff = G[:, None, :] - P[None, :, :]
    return float(np.sqrt(np.einsum("ckd,ckd->ck", diff, diff).min(axis=1)).sum())


def encode(ds: Dataset) -> bytes:
    flags = FLAG_GROUND_TRUTH if ds.ground_truth is not None else 0
    k = ds.k or 0
    parts = [HEADER.pack(MAGIC, FORMAT_VERSION, ds.m, ds.d, k, flags), ds.samples.astype("<f8").tobytes()]
    if ds.ground_truth is not None:
        parts.append(ds.ground_truth.astype("<f8").tobytes())
    return b"".join(parts)


def decode(buf: bytes) -> Dataset:
    if len(buf) < HEADER.size:
        raise DatasetFormatError(f"file too short for a dataset header ({len(buf)} < {HEADER.size} bytes)")
    magic, version, m, d, k, flags = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic bytes {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {version}, expected {FORMAT_VERSION}")
    if flags & ~FLAG_GROUND_TRUTH:
        raise DatasetFormatError(f"unknown flag bits {flags:#x}")
    has_truth = bool(flags & FLAG_GROUND_TRUTH)
    expected = HEADER.size + 8 * m * d + (8 * k * d if has_truth else 0)
    if len(buf) != expected:
        raise DatasetFormatError(f"file size {len(buf)} does not match header (expected {expected} bytes)")
    off = HEADER.size
    X = np.frombuffer(buf, dtype="<f8", count=m * d, offset=off).reshape(m, d).astype(np.float64)
    G = None
    if has_truth:
        off += 8 * m * d
        G = np.frombuffer(buf, dtype="<f8", count=k * d, offset=off).reshape(k, d).astype(np.float64)
    return Dataset(X, G, k or None)


def save(ds: Dataset, path: str | os.PathLike) -> int:
    data = encode(ds)
    with open(path, "wb") as fh:
        fh.write(data)
    return len(data)


def load(path: str | os.PathLike) -> Dataset:
    with open(path, "rb") as fh:
        return decode(fh.read())
