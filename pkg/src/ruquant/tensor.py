"""Matrices, seeded random streams and permutation vectors.

Matrices are plain 2-D ``float64`` numpy arrays.  Activations are stored
``dims x samples`` (one token per column) and weights ``out x in``, so a
linear layer is ``W @ X``.

Every stochastic operation takes an explicit :class:`Seed`.  A seed keys a
Philox counter-based generator with ``(value, stream_id)``; sub-streams are
derived with :meth:`Seed.derive`, which folds a path of integers into the
stream id with the splitmix64 finalizer.  Two equal seeds always produce the
same samples within one build of numpy.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError

_MASK64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    z = (z + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


@dataclass(frozen=True)
class Seed:
    """A reproducible random stream identifier."""

    value: int = 0
    stream_id: int = 0

    def __post_init__(self):
        for name in ("value", "stream_id"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or not 0 <= int(v) <= _MASK64:
                raise InputError(f"seed {name} must be an unsigned 64-bit integer, got {v!r}")

    def derive(self, *path: int) -> "Seed":
        """Return the sub-stream reached by following ``path`` from this seed."""
        sid = int(self.stream_id)
        for p in path:
            sid = _splitmix64(sid ^ _splitmix64(int(p) & _MASK64))
        return Seed(int(self.value), sid)

    def generator(self) -> np.random.Generator:
        key = np.array([int(self.value), int(self.stream_id)], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=key))


def as_seed(seed) -> Seed:
    """Coerce an int, a ``(value, stream_id)`` pair or a :class:`Seed`."""
    if isinstance(seed, Seed):
        return seed
    if seed is None:
        return Seed()
    if isinstance(seed, (tuple, list)):
        return Seed(*seed)
    return Seed(int(seed))


def check_matrix(X, name="X", min_cols=0, min_rows=1) -> np.ndarray:
    """Validate a finite 2-D matrix and return it as a ``float64`` array."""
    try:
        arr = np.asarray(X, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise InputError(f"{name} is not numeric: {exc}") from None
    if arr.ndim != 2:
        raise InputError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < min_rows:
        raise InputError(f"{name} has no rows")
    if arr.shape[1] < min_cols:
        raise InputError(f"{name} needs at least {min_cols} column(s), got {arr.shape[1]}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains NaN or Inf")
    return arr


def check_vector(x, name="x") -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InputError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains NaN or Inf")
    return arr


def sample_uniform_vector(d: int, seed) -> np.ndarray:
    """Draw ``d`` i.i.d. samples from U[-1, 1)."""
    if d < 1:
        raise InputError("empty dimension: d must be >= 1")
    return as_seed(seed).generator().uniform(-1.0, 1.0, size=int(d))


def random_permutation(d: int, seed) -> np.ndarray:
    """Uniform random permutation of ``range(d)`` (Fisher-Yates)."""
    if d < 1:
        raise InputError("empty dimension: d must be >= 1")
    return as_seed(seed).generator().permutation(int(d))


def column_sample(X: np.ndarray, seed) -> np.ndarray:
    """Return a copy of one uniformly chosen column of ``X``."""
    X = np.asarray(X)
    if X.ndim != 2 or X.shape[1] < 1:
        raise InputError("empty sample: X has no columns")
    j = as_seed(seed).generator().integers(X.shape[1])
    return np.array(X[:, j], dtype=np.float64)


def check_permutation(perm) -> np.ndarray:
    perm = np.asarray(perm)
    if perm.ndim != 1 or perm.size == 0 or not np.issubdtype(perm.dtype, np.integer):
        raise InputError("permutation must be a non-empty 1-D integer vector")
    seen = np.zeros(perm.size, dtype=bool)
    if perm.min() < 0 or perm.max() >= perm.size:
        raise InputError("permutation index out of range")
    seen[perm] = True
    if not seen.all():
        raise InputError("permutation is not a bijection")
    return perm.astype(np.int64)


def invert_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return inv


def apply_permutation(perm: np.ndarray, X: np.ndarray) -> np.ndarray:
    """Row gather ``P @ X`` where ``(P @ X)[i] = X[perm[i]]``."""
    return X[perm]


def apply_permutation_transpose(perm: np.ndarray, X: np.ndarray) -> np.ndarray:
    """``P.T @ X``, the exact inverse of :func:`apply_permutation`."""
    return X[invert_permutation(perm)]


def permutation_matrix(perm: np.ndarray) -> np.ndarray:
    P = np.zeros((perm.size, perm.size))
    P[np.arange(perm.size), perm] = 1.0
    return P
