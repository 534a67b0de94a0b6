"""Distribution statistics, isotropy checks and the quantization benchmark."""

from __future__ import annotations

import csv
import io as _io
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import InputError, NumericError
from .learnable import BlockObjective, FinetuneConfig, ToyBlock, finetune, init_theta, reflect_left, reflect_right
from .lloyd import lloyd_max_fit
from .orthogonal import compose_rotation, materialize
from .pipeline import Step1Config, equivalence_residual, ruquant_step1
from .quantizer import QuantConfig, fake_quantize, rtn_levels
from .tensor import Seed, as_seed, check_matrix

ORACLE_SLACK = 1e-12
RESIDUAL_LIMIT = 1e-8


@dataclass
class StatsReport:
    means: np.ndarray
    cov_diag: np.ndarray
    cov_offdiag_max: float
    mean_spread: float
    absmax: np.ndarray
    absmax_spread: float

    @property
    def d(self):
        return self.means.size

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf)
        w.writerow(["# cov_offdiag_max", f"{self.cov_offdiag_max:.12g}"])
        w.writerow(["# mean_spread", f"{self.mean_spread:.12g}"])
        w.writerow(["# absmax_spread", f"{self.absmax_spread:.12g}"])
        w.writerow(["dim", "mean", "var", "absmax"])
        for j in range(self.d):
            w.writerow([j, f"{self.means[j]:.12g}", f"{self.cov_diag[j]:.12g}", f"{self.absmax[j]:.12g}"])
        return buf.getvalue()


def activation_stats(X) -> StatsReport:
    """Per-dimension mean, unbiased covariance summary and magnitude of ``X`` (``d x N``)."""
    X = check_matrix(X, "X")
    if X.shape[1] < 2:
        raise InputError("variance undefined: need at least two samples")
    means = X.mean(axis=1)
    C = np.cov(X, ddof=1) if X.shape[0] > 1 else np.array([[X.var(ddof=1)]])
    C = np.atleast_2d(C)
    off = C - np.diag(np.diag(C))
    absmax = np.max(np.abs(X), axis=1)
    return StatsReport(means, np.diag(C).copy(), float(np.max(np.abs(off))),
                       float(np.ptp(means)), absmax, float(np.ptp(absmax)))


@dataclass
class IsotropyReport:
    trials: int
    level: float  # tr(Sigma) / d
    offdiag_max: float
    diag_max_deviation: float  # max |diag / level - 1|
    mean: np.ndarray = field(repr=False)

    @property
    def offdiag_ratio(self):
        return self.offdiag_max / self.level

    def passes(self, offdiag_tol=0.1, diag_tol=0.25) -> bool:
        return self.offdiag_ratio <= offdiag_tol and self.diag_max_deviation <= diag_tol


def _check_sigma(Sigma):
    S = check_matrix(Sigma, "Sigma")
    if S.shape[0] != S.shape[1]:
        raise InputError("Sigma must be square")
    if not np.allclose(S, S.T, rtol=0, atol=1e-12 * max(1.0, np.abs(S).max())):
        raise InputError("Sigma must be symmetric")
    if S.shape[0] > 256:
        raise InputError("isotropy check is limited to d <= 256")
    if np.linalg.eigvalsh(S).min() < -1e-10 * max(1.0, np.abs(S).max()):
        raise InputError("Sigma must be positive semidefinite")
    return S


def _draw_rotation(Sigma, L, seed: Seed, K, rounds):
    d = Sigma.shape[0]
    x = L @ seed.derive(0).generator().standard_normal(d)
    if not np.any(x):
        x = np.ones(d)
    rot, _ = compose_rotation(x[:, None], K, rounds, seed.derive(1))
    return materialize(rot, check=False)


def isotropy_curve(Sigma, schedule, seed=0, K=16, rounds=1):
    """Isotropy reports for running averages of ``Q Sigma Q^T`` after each
    trial count in ``schedule`` (one shared sequence of rotations).

    Each rotation is composed from a fresh sample ``x ~ N(0, Sigma)`` with
    fresh uniform targets.
    """
    S = _check_sigma(Sigma)
    d = S.shape[0]
    evals, evecs = np.linalg.eigh(S)
    L = evecs * np.sqrt(np.clip(evals, 0, None))
    level = np.trace(S) / d
    seed = as_seed(seed)
    schedule = sorted(int(t) for t in schedule)
    acc = np.zeros((d, d))
    out = []
    done = 0
    for target in schedule:
        while done < target:
            Q = _draw_rotation(S, L, seed.derive(done), K, rounds)
            acc += Q @ S @ Q.T
            done += 1
        A = acc / done
        off = A - np.diag(np.diag(A))
        dev = float(np.max(np.abs(np.diag(A) / level - 1))) if level > 0 else 0.0
        out.append(IsotropyReport(done, float(level), float(np.max(np.abs(off))), dev, A))
    return out


def isotropy_check(Sigma, trials=500, seed=0, K=16, rounds=1) -> IsotropyReport:
    if trials < 100:
        raise InputError("isotropy check needs at least 100 trials")
    return isotropy_curve(Sigma, [trials], seed, K, rounds)[0]


def weight_smoothing_check(W, plan):
    """Stats of the weight rows before and after ``W @ Qhat^T`` (read-only)."""
    W = check_matrix(W, "W")
    before = activation_stats(W.T)
    after = activation_stats(plan.apply_weights(W).T)
    return before, after


def spread_ratio(before: StatsReport, after: StatsReport, field_name="absmax_spread"):
    b = getattr(before, field_name)
    return getattr(after, field_name) / b if b > 0 else float("inf")


# -- benchmark ----------------------------------------------------------------

@dataclass
class SyntheticFamily:
    """Activations with per-dimension means ``U(-lo, hi)``, isotropic noise and
    a few channels scaled up; Gaussian weights with variance ``1/d``."""

    d: int = 256
    N: int = 512
    m: int = 256
    mean_range: float = 2.0
    noise: float = 0.05
    outliers: int = 4
    outlier_scale: float = 50.0

    def draw(self, seed):
        g = as_seed(seed).derive(0xDA7A).generator()
        mu = g.uniform(-self.mean_range, self.mean_range, self.d)
        X = mu[:, None] + self.noise * g.standard_normal((self.d, self.N))
        if self.outliers:
            X[g.choice(self.d, self.outliers, replace=False)] *= self.outlier_scale
        W = g.standard_normal((self.m, self.d)) / np.sqrt(self.d)
        return X, W


def benign_family(d=256, N=512, m=256):
    """Zero-mean, unit-variance i.i.d. activations."""
    return SyntheticFamily(d=d, N=N, m=m, mean_range=0.0, noise=1.0, outliers=0)


def columnwise_oracle_mse(X, cfg: QuantConfig) -> float:
    """Per-column Lloyd-Max MSE, started from the quantile grid and from the
    round-to-nearest grid of ``cfg`` so it never exceeds that quantizer."""
    total = 0.0
    n = 1 << cfg.bits
    for j in range(X.shape[1]):
        x = X[:, j]
        if np.unique(x).size < n:
            # Every distinct value can get its own level.
            continue
        qz = lloyd_max_fit(x, cfg.bits, init=["quantile", rtn_levels(x, cfg)])
        total += qz.final_mse * x.size
    return total / X.size


@dataclass
class BenchConfig:
    bits: int = 4
    act_clip: float = 0.9
    weight_clip: float = 0.8
    step1: Step1Config = field(default_factory=Step1Config)
    family: SyntheticFamily = field(default_factory=SyntheticFamily)
    step2: bool = False
    finetune: FinetuneConfig | None = None
    oracle: bool = True

    @property
    def acfg(self):
        return QuantConfig(self.bits, self.act_clip, "per_column")

    @property
    def wcfg(self):
        return QuantConfig(self.bits, self.weight_clip, "per_row")


BENCH_FIELDS = ["seed", "rtn_act_mse", "step1_act_mse", "step2_act_mse",
                "rtn_out_mse", "step1_out_mse", "step2_out_mse",
                "step1_rot_mse", "oracle_act_mse", "oracle_rot_mse", "residual"]


@dataclass
class BenchReport:
    """Per-seed MSEs.

    ``*_act_mse`` compare reconstructed activations in the original
    coordinates, ``*_out_mse`` the linear layer output ``W X``.
    ``step1_rot_mse`` is the step-one activation error in the rotated
    coordinates, where ``oracle_rot_mse`` is the matching Lloyd-Max bound
    (``oracle_act_mse`` bounds ``rtn_act_mse``).  NaN marks a skipped value.
    """

    config: dict
    rows: list = field(default_factory=list)
    tolerances: dict = field(default_factory=lambda: {
        "oracle_slack": ORACLE_SLACK, "residual_limit": RESIDUAL_LIMIT})

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    @property
    def win_rate(self):
        return float(np.mean(self.column("step1_act_mse") < self.column("rtn_act_mse")))

    @property
    def wins(self):
        return int(np.sum(self.column("step1_act_mse") < self.column("rtn_act_mse")))

    def check_invariants(self):
        for r in self.rows:
            for oracle, method in (("oracle_act_mse", "rtn_act_mse"), ("oracle_rot_mse", "step1_rot_mse")):
                if np.isfinite(r[oracle]) and r[oracle] > r[method] + ORACLE_SLACK:
                    raise NumericError(f"seed {r['seed']}: {oracle} {r[oracle]:.12g} exceeds "
                                       f"{method} {r[method]:.12g}")
        return self

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf)
        for k, v in sorted(self.config.items()):
            w.writerow([f"# {k}", v])
        for k, v in sorted(self.tolerances.items()):
            w.writerow([f"# tol.{k}", f"{v:.12g}"])
        w.writerow(["# step1_wins", self.wins, "of", len(self.rows)])
        w.writerow(BENCH_FIELDS)
        for r in self.rows:
            w.writerow([r["seed"]] + [f"{r[k]:.12g}" for k in BENCH_FIELDS[1:]])
        return buf.getvalue()


def _mse(A, B):
    return float(np.mean((A - B) ** 2))


def bench_one(seed: int, cfg: BenchConfig) -> dict:
    X, W = cfg.family.draw(seed)
    acfg, wcfg = cfg.acfg, cfg.wcfg
    Y = W @ X
    Xq = fake_quantize(X, acfg)
    row = {"seed": int(seed), "rtn_act_mse": _mse(X, Xq),
           "rtn_out_mse": _mse(Y, fake_quantize(W, wcfg) @ Xq)}

    s1 = Step1Config(**{**asdict(cfg.step1), "seed": as_seed(cfg.step1.seed).derive(int(seed))})
    X1, W1, t = ruquant_step1(X, W, s1)
    row["residual"] = equivalence_residual(W, X, W1, X1)
    X1q = fake_quantize(X1, acfg)
    row["step1_rot_mse"] = _mse(X1, X1q)
    row["step1_act_mse"] = _mse(X, t.inverse_activations(X1q))
    row["step1_out_mse"] = _mse(Y, fake_quantize(W1, wcfg) @ X1q)

    row["step2_act_mse"] = row["step2_out_mse"] = float("nan")
    if cfg.step2:
        theta_seed = s1.seed.derive(0x5732)
        theta = init_theta(X1, theta_seed)
        ft = cfg.finetune or FinetuneConfig(wcfg=wcfg, acfg=acfg)
        obj = BlockObjective(W, X, ToyBlock([]), t, ft.wcfg, ft.acfg)
        theta = finetune(theta, obj, ft).theta
        X2 = reflect_left(theta, X1)
        W2 = reflect_right(W1, theta)
        X2q = fake_quantize(X2, acfg)
        row["step2_act_mse"] = _mse(X, t.inverse_activations(reflect_left(theta, X2q)))
        row["step2_out_mse"] = _mse(Y, fake_quantize(W2, wcfg) @ X2q)

    if cfg.oracle:
        row["oracle_act_mse"] = columnwise_oracle_mse(X, acfg)
        row["oracle_rot_mse"] = columnwise_oracle_mse(X1, acfg)
    else:
        row["oracle_act_mse"] = row["oracle_rot_mse"] = float("nan")
    return row


def mse_benchmark(seeds, cfg: BenchConfig | None = None) -> BenchReport:
    """Compare round-to-nearest, step one (and optionally step two) and the
    Lloyd-Max bound on seeded draws of the synthetic family."""
    cfg = cfg or BenchConfig()
    echo = {"bits": cfg.bits, "act_clip": cfg.act_clip, "weight_clip": cfg.weight_clip,
            "B": cfg.step1.B, "K": cfg.step1.K, "rounds": cfg.step1.rounds, "T": cfg.step1.T,
            "alpha": cfg.step1.alpha, "master_seed": as_seed(cfg.step1.seed).value,
            "step2": cfg.step2, **{f"family.{k}": v for k, v in asdict(cfg.family).items()}}
    report = BenchReport(echo)
    for s in seeds:
        report.rows.append(bench_one(s, cfg))
    return report.check_invariants()
