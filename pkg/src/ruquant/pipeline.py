"""Step one of RUQuant: smoothing, block-wise rotation and zigzag permutation.

All transforms keep the layer output unchanged: for activations ``X``
(``d x N``) and weights ``W`` (``m x d``) every stage maps
``(W, X) -> (W A^-1, A X)``, so ``W' @ X' == W @ X`` up to round-off.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import io
from .errors import InputError, LoadError
from .orthogonal import (CompositeRotation, compose_rotation, decode_rotation, encode_rotation,
                         orthogonality_defect)
from .tensor import (Seed, apply_permutation, apply_permutation_transpose, as_seed,
                     check_matrix, check_permutation, invert_permutation, permutation_matrix)

SCALE_FLOOR, SCALE_CEIL = 1e-5, 1e5


def equivalence_residual(W, X, W2, X2) -> float:
    """``|W2 X2 - W X|_F / |W X|_F``."""
    ref = W @ X
    return float(np.linalg.norm(W2 @ X2 - ref) / np.linalg.norm(ref))


def _check_pair(X, W):
    X = check_matrix(X, "X", min_cols=1)
    W = check_matrix(W, "W", min_cols=1)
    if W.shape[1] != X.shape[0]:
        raise InputError(f"W has {W.shape[1]} input features but X has {X.shape[0]} dims")
    return X, W


def smooth_channels(X, W, alpha: float):
    """Migrate per-channel magnitude from activations to weights.

    ``s_j = max|X_j|^alpha / max|W_:,j|^(1 - alpha)``, clamped to
    ``[1e-5, 1e5]``; channels whose activations or weights are all zero keep
    ``s_j = 1``.  Returns ``(X / s, W * s, s)``.
    """
    X, W = _check_pair(X, W)
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha must be in [0, 1], got {alpha}")
    xmax = np.max(np.abs(X), axis=1)
    wmax = np.max(np.abs(W), axis=0)
    ok = (xmax > 0) & (wmax > 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        s = np.where(ok, xmax ** alpha / wmax ** (1.0 - alpha), 1.0)
    s = np.clip(s, SCALE_FLOOR, SCALE_CEIL)
    return X / s[:, None], W * s[None, :], s


def zigzag_permutation(X, B: int):
    """Deal channels to blocks in serpentine order of their max magnitude.

    Channels are ranked by ``max_i |X_ji|`` (descending, ties by index) and
    dealt to blocks ``0, 1, ..., nb-1, nb-1, ..., 0, 0, 1, ...``.  Returns
    ``(X[perm], perm)``.
    """
    X = np.asarray(X, dtype=np.float64)
    d = X.shape[0]
    if B < 1 or d % B:
        raise InputError(f"{d} dims are not divisible into blocks of {B}")
    nb = d // B
    order = np.argsort(-np.max(np.abs(X), axis=1), kind="stable")
    rank = np.arange(d)
    pos = rank % nb
    block = np.where((rank // nb) % 2 == 0, pos, nb - 1 - pos)
    perm = np.concatenate([order[block == b] for b in range(nb)])
    return X[perm], perm


@dataclass
class BlockRotationPlan:
    """One ``B x B`` rotation shared by the ``d / B`` diagonal blocks."""

    B: int
    d: int
    rotation: CompositeRotation

    @property
    def n_blocks(self):
        return self.d // self.B

    def _view(self, X):
        N = X.shape[1]
        return X.reshape(self.n_blocks, self.B, N).transpose(1, 0, 2).reshape(self.B, -1)

    def _unview(self, V, N):
        return V.reshape(self.B, self.n_blocks, N).transpose(1, 0, 2).reshape(self.d, N)

    def _check(self, X, axis_len):
        if axis_len != self.d:
            raise InputError(f"plan is for {self.d} dims, got {axis_len}")

    def apply_activations(self, X):
        X = np.asarray(X, dtype=np.float64)
        self._check(X, X.shape[0])
        return self._unview(self.rotation.apply(self._view(X)), X.shape[1])

    def invert_activations(self, X):
        X = np.asarray(X, dtype=np.float64)
        self._check(X, X.shape[0])
        return self._unview(self.rotation.apply_transpose(self._view(X)), X.shape[1])

    def apply_weights(self, W):
        """``W @ Qhat.T``."""
        return self.apply_activations(np.asarray(W).T).T

    def invert_weights(self, W):
        return self.invert_activations(np.asarray(W).T).T

    def block_matrix(self):
        from .orthogonal import materialize
        return materialize(self.rotation)

    def materialize(self):
        return np.kron(np.eye(self.n_blocks), self.block_matrix())

    def n_parameters(self) -> int:
        return self.rotation.n_parameters()


def blockwise_rotate(X, W, B: int, K: int, rounds: int, seed, householder=True, givens=True):
    """Build one rotation from the ``B x (dN/B)`` view of ``X`` and apply it
    to every block of ``X`` (from the left) and ``W`` (transposed, from the
    right).  Returns ``(X', W', plan)``."""
    X = np.asarray(X, dtype=np.float64)
    d = X.shape[0]
    if B < 1 or d % B:
        raise InputError(f"{d} dims are not divisible into blocks of {B} (padding is not supported)")
    plan = BlockRotationPlan(B, d, CompositeRotation(B))
    rot, V = compose_rotation(plan._view(X), K, rounds, seed, householder, givens)
    plan.rotation = rot
    Xr = plan._unview(V, X.shape[1])
    Wr = plan.apply_weights(W) if W is not None else None
    return Xr, Wr, plan


@dataclass
class Step1Config:
    B: int = 128
    K: int = 16
    rounds: int = 1
    T: int = 1
    alpha: float | None = 0.6
    seed: Seed = field(default_factory=Seed)
    householder: bool = True
    givens: bool = True

    def __post_init__(self):
        self.seed = as_seed(self.seed)
        if self.T < 0 or self.K < 1 or self.rounds < 1 or self.B < 1:
            raise InputError("need T >= 0, K >= 1, rounds >= 1 and B >= 1")


@dataclass
class Step1Transform:
    """Smoothing scales followed by rotation and zigzag stages, in order.

    ``stages`` holds :class:`BlockRotationPlan` and permutation-vector
    entries; T zigzag rounds give ``rotate, permute, ..., rotate``.
    """

    d: int
    smooth_scales: np.ndarray
    stages: list = field(default_factory=list)

    @property
    def plans(self):
        return [s for s in self.stages if isinstance(s, BlockRotationPlan)]

    @property
    def zigzags(self):
        return [s for s in self.stages if not isinstance(s, BlockRotationPlan)]

    @property
    def plan1(self):
        return self.plans[0]

    @property
    def plan2(self):
        return self.plans[-1]

    @property
    def zigzag(self):
        return self.zigzags[0] if self.zigzags else None

    def transform_activations(self, X):
        X = np.asarray(X, dtype=np.float64) / self.smooth_scales[:, None]
        for st in self.stages:
            X = st.apply_activations(X) if isinstance(st, BlockRotationPlan) else apply_permutation(st, X)
        return X

    def transform_weights(self, W):
        W = np.asarray(W, dtype=np.float64) * self.smooth_scales[None, :]
        for st in self.stages:
            W = st.apply_weights(W) if isinstance(st, BlockRotationPlan) else W[:, st]
        return W

    def inverse_activations(self, X):
        X = np.asarray(X, dtype=np.float64)
        for st in reversed(self.stages):
            X = st.invert_activations(X) if isinstance(st, BlockRotationPlan) \
                else apply_permutation_transpose(st, X)
        return X * self.smooth_scales[:, None]

    def inverse_weights(self, W):
        W = np.asarray(W, dtype=np.float64)
        for st in reversed(self.stages):
            W = st.invert_weights(W) if isinstance(st, BlockRotationPlan) else W[:, invert_permutation(st)]
        return W / self.smooth_scales[None, :]

    def rotation_matrix(self):
        """Dense orthogonal part, so ``X' = Q @ (X / s)``."""
        Q = np.eye(self.d)
        for st in self.stages:
            Q = (st.materialize() if isinstance(st, BlockRotationPlan) else permutation_matrix(st)) @ Q
        return Q

    def save(self, path):
        sections = [("META", io.pack_json({"d": self.d, "stages": len(self.stages)}))]
        for st in self.stages:
            if isinstance(st, BlockRotationPlan):
                sections.append(("ROTN", encode_rotation(st.rotation)))
            else:
                sections.append(("PERM", np.asarray(st).astype("<u8").tobytes()))
        io.write_container(path, self.smooth_scales.reshape(1, -1), sections)

    @classmethod
    def load(cls, path):
        scales, sections = io.read_container(path)
        meta = io.unpack_json(io.section_map(sections, ("META",))["META"][0])
        d = int(meta["d"])
        if scales.shape != (1, d):
            raise LoadError(f"smoothing scales must be 1 x {d}")
        t = cls(d, scales.ravel().copy())
        for tag, payload in sections:
            if tag == "ROTN":
                rot = decode_rotation(payload)
                t.stages.append(BlockRotationPlan(rot.dim, d, rot))
            elif tag == "PERM":
                t.stages.append(check_permutation(np.frombuffer(payload, "<u8").astype(np.int64)))
        if len(t.stages) != meta["stages"]:
            raise LoadError("stage count does not match header")
        return t


def ruquant_step1(X, W, cfg: Step1Config | None = None, **overrides):
    """Smooth, then ``T`` rounds of (block rotation, zigzag), then a final
    block rotation.  Returns ``(X', W', Step1Transform)``.

    ``alpha=None`` skips smoothing.
    """
    cfg = cfg or Step1Config(**overrides)
    X, W = _check_pair(X, W)
    d = X.shape[0]
    if d % cfg.B:
        raise InputError(f"{d} dims are not divisible into blocks of {cfg.B} (padding is not supported)")
    if cfg.alpha is None:
        scales = np.ones(d)
    else:
        X, W, scales = smooth_channels(X, W, cfg.alpha)
    t = Step1Transform(d, scales)
    for i in range(cfg.T + 1):
        X, W, plan = blockwise_rotate(X, W, cfg.B, cfg.K, cfg.rounds, cfg.seed.derive(i),
                                      cfg.householder, cfg.givens)
        t.stages.append(plan)
        if i < cfg.T:
            X, perm = zigzag_permutation(X, cfg.B)
            W = W[:, perm]
            t.stages.append(perm)
    return X, W, t


def plan_orthogonality(plan: BlockRotationPlan) -> float:
    return orthogonality_defect(plan.materialize())
