"""Householder reflections, paired Givens rotations and their composition.

Factors are stored compactly and applied in O(d N); dense matrices are only
built on request (:func:`materialize`) for checks.  A :class:`CompositeRotation`
lists its factors in application order, so ``rot.apply(X)`` is
``F_n @ ... @ F_1 @ X``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import io
from .errors import InputError, LoadError, NumericError
from .tensor import (Seed, apply_permutation, apply_permutation_transpose, as_seed,
                     check_permutation, check_vector, column_sample, permutation_matrix,
                     random_permutation, sample_uniform_vector)

MAX_MATERIALIZE = 4096
_NORM_RTOL = 1e-9
_DEGENERATE = 1e-12


def _as_2d(X):
    X = np.asarray(X, dtype=np.float64)
    return (X[:, None], True) if X.ndim == 1 else (X, False)


@dataclass
class HouseholderFactor:
    """``H = I - 2 w w^T / (w^T w)``; ``omega=None`` is the identity."""

    omega: np.ndarray | None

    @property
    def identity(self) -> bool:
        return self.omega is None

    @property
    def dim(self):
        return None if self.omega is None else self.omega.size

    def apply(self, X):
        if self.omega is None:
            return X
        X2, vec = _as_2d(X)
        if X2.shape[0] != self.omega.size:
            raise InputError(f"dimension mismatch: omega has {self.omega.size}, X has {X2.shape[0]} rows")
        w = self.omega
        out = X2 - np.outer(w, (2.0 / (w @ w)) * (w @ X2))
        return out[:, 0] if vec else out

    apply_transpose = apply

    def matrix(self, d=None):
        if self.omega is None:
            return np.eye(d)
        w = self.omega
        return np.eye(w.size) - (2.0 / (w @ w)) * np.outer(w, w)


@dataclass
class GivensFactor:
    """Block-diagonal rotation acting on coordinate pairs ``(2i, 2i + 1)``.

    Each 2x2 block is ``[[c, s], [-s, c]]``.
    """

    cos: np.ndarray
    sin: np.ndarray

    @property
    def dim(self):
        return 2 * self.cos.size

    def _rotate(self, X, sign):
        X2, vec = _as_2d(X)
        if X2.shape[0] != self.dim:
            raise InputError(f"dimension mismatch: rotation has {self.dim}, X has {X2.shape[0]} rows")
        c = self.cos[:, None]
        s = sign * self.sin[:, None]
        a, b = X2[0::2], X2[1::2]
        out = np.empty_like(X2)
        out[0::2] = c * a + s * b
        out[1::2] = c * b - s * a
        return out[:, 0] if vec else out

    def apply(self, X):
        return self._rotate(X, 1.0)

    def apply_transpose(self, X):
        return self._rotate(X, -1.0)

    def matrix(self, d=None):
        G = np.zeros((self.dim, self.dim))
        i = np.arange(self.cos.size)
        G[2 * i, 2 * i] = self.cos
        G[2 * i, 2 * i + 1] = self.sin
        G[2 * i + 1, 2 * i] = -self.sin
        G[2 * i + 1, 2 * i + 1] = self.cos
        return G


@dataclass
class PermutationFactor:
    """``(P @ X)[i] = X[perm[i]]``."""

    perm: np.ndarray

    @property
    def dim(self):
        return self.perm.size

    def apply(self, X):
        X2, vec = _as_2d(X)
        out = apply_permutation(self.perm, X2)
        return out[:, 0] if vec else out

    def apply_transpose(self, X):
        X2, vec = _as_2d(X)
        out = apply_permutation_transpose(self.perm, X2)
        return out[:, 0] if vec else out

    def matrix(self, d=None):
        return permutation_matrix(self.perm)


@dataclass
class CompositeRotation:
    dim: int
    factors: list = field(default_factory=list)

    def apply(self, X):
        for f in self.factors:
            X = f.apply(X)
        return X

    def apply_transpose(self, X):
        for f in reversed(self.factors):
            X = f.apply_transpose(X)
        return X

    def extend(self, other: "CompositeRotation") -> "CompositeRotation":
        self.factors.extend(other.factors)
        return self

    def n_parameters(self) -> int:
        """Stored scalars; independent of how many blocks share the rotation."""
        total = 0
        for f in self.factors:
            if isinstance(f, HouseholderFactor):
                total += 0 if f.identity else f.omega.size
            elif isinstance(f, GivensFactor):
                total += 2 * f.cos.size
            else:
                total += f.perm.size
        return total


def materialize(rot, check=True) -> np.ndarray:
    """Dense ``d x d`` matrix of a rotation or single factor."""
    d = rot.dim
    if d is None:
        raise InputError("identity factor has no intrinsic dimension")
    if d > MAX_MATERIALIZE:
        raise InputError(f"refusing to materialize a {d} x {d} matrix (limit {MAX_MATERIALIZE})")
    if isinstance(rot, CompositeRotation):
        Q = rot.apply(np.eye(d))
    else:
        Q = rot.matrix(d)
    if check:
        defect = orthogonality_defect(Q)
        if defect > 1e-10:
            raise NumericError(f"materialized matrix is not orthogonal (defect {defect:.3g})")
    return Q


def orthogonality_defect(Q) -> float:
    return float(np.max(np.abs(Q.T @ Q - np.eye(Q.shape[0]))))


def householder_from_pair(x, u) -> HouseholderFactor:
    """Reflection mapping ``x`` onto ``u`` (equal norms), with ``w = x - u``."""
    x = check_vector(x, "x")
    u = check_vector(u, "u")
    if x.shape != u.shape:
        raise InputError(f"dimension mismatch: {x.size} vs {u.size}")
    nx, nu = np.linalg.norm(x), np.linalg.norm(u)
    if nx == 0 or nu == 0:
        raise InputError("zero vector has no reflection target")
    if abs(nx - nu) > _NORM_RTOL * max(nx, nu):
        raise InputError(f"norm mismatch: |x| = {nx:.12g}, |u| = {nu:.12g}")
    omega = x - u
    if np.linalg.norm(omega) <= _DEGENERATE * nx:
        return HouseholderFactor(None)
    return HouseholderFactor(omega)


def householder_toward_uniform(x, seed):
    """Reflect ``x`` onto a random uniform direction of the same norm.

    Returns ``(factor, u)`` where ``u = |x| * v / |v|`` and ``v ~ U(-1, 1)^d``.
    """
    x = check_vector(x, "x")
    gamma = np.linalg.norm(x)
    if gamma == 0:
        raise InputError("zero-norm vector cannot be reflected onto a target")
    if not np.isfinite(gamma):
        raise NumericError("norm overflow while building a reflection")
    v = sample_uniform_vector(x.size, seed)
    u = gamma * v / np.linalg.norm(v)
    return householder_from_pair(x, u), u


def apply_householder(f: HouseholderFactor, X):
    return f.apply(X)


def givens_angles(p: np.ndarray, v: np.ndarray):
    """Vectorized pair angles: rows of ``p`` and ``v`` are 2-vectors.

    ``v`` is rescaled to the norm of ``p``; zero pairs get the identity.
    """
    pn2 = np.einsum("ij,ij->i", p, p)
    vn = np.linalg.norm(v, axis=1)
    ok = (pn2 > 0) & (vn > 0)
    scale = np.where(ok, np.sqrt(pn2) / np.where(vn > 0, vn, 1.0), 0.0)
    v = v * scale[:, None]
    denom = np.where(ok, pn2, 1.0)
    c = np.where(ok, (v[:, 0] * p[:, 0] + v[:, 1] * p[:, 1]) / denom, 1.0)
    s = np.where(ok, (v[:, 0] * p[:, 1] - v[:, 1] * p[:, 0]) / denom, 0.0)
    r = np.hypot(c, s)
    return c / r, s / r


def givens_pair_angles(p, v):
    """``(cos a, sin a)`` such that ``[[c, s], [-s, c]] @ p`` points along ``v``."""
    p = check_vector(p, "p")
    v = check_vector(v, "v")
    if p.size != 2 or v.size != 2:
        raise InputError("Givens angles need 2-vectors")
    c, s = givens_angles(p[None, :], v[None, :])
    return float(c[0]), float(s[0])


def givens_permute_rounds(x, rounds: int, seed, permute=True):
    """``rounds`` alternations of a random permutation and a paired Givens
    rotation aligning each pair of ``x`` with a fresh uniform target.

    Returns ``(CompositeRotation, x_out)``.
    """
    x = check_vector(x, "x")
    d = x.size
    if d % 2:
        raise InputError(f"Givens pairing needs an even dimension, got {d}")
    if rounds < 1:
        raise InputError("need at least one round")
    seed = as_seed(seed)
    rot = CompositeRotation(d)
    for r in range(rounds):
        if permute:
            P = PermutationFactor(random_permutation(d, seed.derive(r, 0)))
            x = P.apply(x)
            rot.factors.append(P)
        u = sample_uniform_vector(d, seed.derive(r, 1))
        c, s = givens_angles(x.reshape(-1, 2), u.reshape(-1, 2))
        G = GivensFactor(c, s)
        x = G.apply(x)
        rot.factors.append(G)
    return rot, x


def compose_rotation(X, K: int, rounds: int, seed, householder=True, givens=True):
    """Build the rotation shared by all columns of ``X`` (``B x M``).

    Each of the ``K`` iterations samples a column of the current ``X``,
    reflects it onto a uniform target, applies the reflection to ``X``, then
    samples again and applies Givens/permutation rounds built the same way.
    Returns ``(rotation, rotation.apply(X))``.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] < 1:
        raise InputError("compose_rotation needs a non-empty 2-D matrix")
    if K < 1:
        raise InputError("K must be >= 1")
    if givens and X.shape[0] % 2:
        raise InputError(f"block size must be even, got {X.shape[0]}")
    seed = as_seed(seed)
    rot = CompositeRotation(X.shape[0])
    for k in range(K):
        if householder:
            x = column_sample(X, seed.derive(k, 0))
            if np.linalg.norm(x) > 0:
                H, _ = householder_toward_uniform(x, seed.derive(k, 1))
                X = H.apply(X)
                rot.factors.append(H)
        if givens:
            x = column_sample(X, seed.derive(k, 2))
            R, _ = givens_permute_rounds(x, rounds, seed.derive(k, 3))
            X = R.apply(X)
            rot.extend(R)
    if not np.all(np.isfinite(X)):
        raise NumericError("non-finite values after rotation")
    return rot, X


# -- serialization ----------------------------------------------------------

_TAG_HOUSEHOLDER, _TAG_GIVENS, _TAG_PERMUTATION = 0, 1, 2


def encode_rotation(rot: CompositeRotation) -> bytes:
    parts = [struct.pack("<QQ", rot.dim, len(rot.factors))]
    for f in rot.factors:
        if isinstance(f, HouseholderFactor):
            parts.append(struct.pack("<BB", _TAG_HOUSEHOLDER, int(f.identity)))
            w = np.zeros(rot.dim) if f.identity else f.omega
            parts.append(w.astype("<f8").tobytes())
        elif isinstance(f, GivensFactor):
            parts.append(struct.pack("<B", _TAG_GIVENS))
            parts.append(f.cos.astype("<f8").tobytes() + f.sin.astype("<f8").tobytes())
        elif isinstance(f, PermutationFactor):
            parts.append(struct.pack("<B", _TAG_PERMUTATION))
            parts.append(f.perm.astype("<u8").tobytes())
        else:
            raise InputError(f"cannot serialize factor {type(f).__name__}")
    return b"".join(parts)


def decode_rotation(buf: bytes) -> CompositeRotation:
    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise LoadError("truncated rotation", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    pos = 0
    d, count = struct.unpack("<QQ", take(16))
    rot = CompositeRotation(int(d))
    for _ in range(count):
        at = pos
        (tag,) = struct.unpack("<B", take(1))
        if tag == _TAG_HOUSEHOLDER:
            (ident,) = struct.unpack("<B", take(1))
            w = np.frombuffer(take(8 * d), "<f8").astype(np.float64)
            rot.factors.append(HouseholderFactor(None if ident else w))
        elif tag == _TAG_GIVENS:
            cs = np.frombuffer(take(8 * d), "<f8").astype(np.float64)
            rot.factors.append(GivensFactor(cs[:d // 2].copy(), cs[d // 2:].copy()))
        elif tag == _TAG_PERMUTATION:
            perm = np.frombuffer(take(8 * d), "<u8").astype(np.int64)
            try:
                rot.factors.append(PermutationFactor(check_permutation(perm)))
            except InputError as exc:
                raise LoadError(str(exc), at) from None
        else:
            raise LoadError(f"unknown factor tag {tag}", at)
    if pos != len(buf):
        raise LoadError("trailing bytes after rotation", pos)
    return rot


def save_rotation(path, rot: CompositeRotation) -> None:
    io.write_container(path, np.zeros((0, 0)), [("ROTN", encode_rotation(rot))])


def load_rotation(path) -> CompositeRotation:
    _, sections = io.read_container(path)
    return decode_rotation(io.section_map(sections, ("ROTN",))["ROTN"][0])


__all__ = [
    "CompositeRotation", "GivensFactor", "HouseholderFactor", "PermutationFactor", "Seed",
    "apply_householder", "compose_rotation", "givens_pair_angles", "givens_permute_rounds",
    "householder_from_pair", "householder_toward_uniform", "materialize", "orthogonality_defect",
]
