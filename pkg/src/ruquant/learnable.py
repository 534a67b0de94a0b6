"""Step two: a single learnable Householder reflection tuned on a block loss.

The reflection ``H(theta)`` is applied on top of the step-one transform, to
the activations from the left and to the weights from the right.  The
objective is the squared Frobenius distance between the full-precision
block output and the output computed from fake-quantized operands::

    L(theta) = | f(W, X) - f(Q(W C^T H), Q(H C X)) |_F^2

where ``C`` is the (frozen) step-one transform.  Rounding is differentiated
with a straight-through estimator: gradient one where the code was not
clamped, zero elsewhere; scales and zero points are held constant.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError, NumericError
from .quantizer import QuantConfig, activation_config, fake_quantize, weight_config
from .tensor import as_seed, check_matrix, column_sample, sample_uniform_vector

logger = logging.getLogger(__name__)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _silu_grad(z):
    s = _sigmoid(z)
    return s * (1.0 + z * (1.0 - s))


_ACTIVATIONS = {
    "silu": (lambda z: z * _sigmoid(z), _silu_grad),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0).astype(np.float64)),
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
}


def _finite(arr, stage):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {stage}")
    return arr


@dataclass
class ToyBlock:
    """A small stand-in for a transformer block.

    The first layer is always a linear map whose weight is supplied to
    :meth:`forward`, since it is the one being quantized.  ``layers`` lists
    what follows: weight matrices (applied from the left) or activation
    names from ``silu``, ``relu`` and ``tanh``.
    """

    layers: list = field(default_factory=list)

    @classmethod
    def default(cls, d, seed=0, expansion=4):
        """``linear(d -> 4d)``, SiLU, ``linear(4d -> d)``; only the tail is stored."""
        g = as_seed(seed).derive(0xB10C).generator()
        W2 = g.standard_normal((d, expansion * d)) / np.sqrt(expansion * d)
        return cls(["silu", W2])

    def forward(self, W, X, keep=False):
        # Overflow is reported as a NumericError naming the layer instead.
        with np.errstate(over="ignore", invalid="ignore"):
            a = _finite(W @ X, "first linear layer")
            cache = [a]
            for i, layer in enumerate(self.layers):
                a = _ACTIVATIONS[layer][0](a) if isinstance(layer, str) else layer @ a
                name = layer if isinstance(layer, str) else "linear"
                cache.append(_finite(a, f"layer {i + 1} ({name})"))
        return (a, cache) if keep else a

    def backward(self, W, X, cache, grad_out):
        """Gradients of a scalar loss w.r.t. the first layer's ``W`` and ``X``."""
        g = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if isinstance(layer, str):
                g = g * _ACTIVATIONS[layer][1](cache[i])
            else:
                g = layer.T @ g
        return g @ X.T, W.T @ g


def reflect_left(theta, X):
    """``H(theta) @ X`` in O(dN)."""
    return X - np.outer(theta, (2.0 / (theta @ theta)) * (theta @ X))


def reflect_right(W, theta):
    """``W @ H(theta)`` (``H`` is symmetric)."""
    return W - np.outer((2.0 / (theta @ theta)) * (W @ theta), theta)


def householder_matrix(theta):
    theta = np.asarray(theta, dtype=np.float64)
    return np.eye(theta.size) - (2.0 / (theta @ theta)) * np.outer(theta, theta)


def init_theta(X_step1, seed, max_attempts=8):
    """``theta = x - u`` for a sampled column ``x`` and a uniform target ``u``
    of the same norm.  Zero or degenerate samples retry on the next stream."""
    X = check_matrix(X_step1, "X", min_cols=1)
    seed = as_seed(seed)
    for attempt in range(max_attempts):
        x = column_sample(X, seed.derive(attempt, 0))
        gamma = np.linalg.norm(x)
        if gamma == 0:
            continue
        v = sample_uniform_vector(x.size, seed.derive(attempt, 1))
        theta = x - gamma * v / np.linalg.norm(v)
        if np.linalg.norm(theta) > 1e-12 * gamma:
            return theta
    raise NumericError(f"no usable column after {max_attempts} attempts")


class BlockObjective:
    """Loss and analytic gradient of the quantized block output w.r.t. ``theta``.

    ``X`` and ``W`` are the original activations and first-layer weights;
    ``transform`` (a :class:`~ruquant.pipeline.Step1Transform` or ``None``)
    is applied before the reflection.  Passing ``None`` for a quant config
    bypasses that quantizer.  ``smooth_tau`` replaces both quantizers by the
    smooth surrogate ``tau * tanh(x / tau)`` (used to verify the chain rule
    by finite differences).
    """

    def __init__(self, W, X, block: ToyBlock, transform=None,
                 wcfg: QuantConfig | None = None, acfg: QuantConfig | None = None,
                 smooth_tau: float | None = None):
        self.W = check_matrix(W, "W")
        self.X = check_matrix(X, "X", min_cols=1)
        if self.W.shape[1] != self.X.shape[0]:
            raise InputError(f"W has {self.W.shape[1]} inputs but X has {self.X.shape[0]} rows")
        self.block = block
        self.wcfg, self.acfg = wcfg, acfg
        self.smooth_tau = smooth_tau
        self.target = block.forward(self.W, self.X)
        if transform is None:
            self.Wc, self.Xc = self.W, self.X
        else:
            self.Wc = transform.transform_weights(self.W)
            self.Xc = transform.transform_activations(self.X)

    @property
    def dim(self):
        return self.X.shape[0]

    def _quantize(self, M, cfg, stage):
        if self.smooth_tau is not None:
            t = np.tanh(M / self.smooth_tau)
            return self.smooth_tau * t, 1.0 - t * t
        if cfg is None:
            return M, None
        Mq, inside = fake_quantize(M, cfg, return_mask=True)
        return _finite(Mq, stage), inside

    def _check_theta(self, theta):
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.dim,):
            raise InputError(f"theta must have length {self.dim}")
        if not np.linalg.norm(theta) > 1e-12:
            raise InputError("theta is (numerically) zero; reflection undefined")
        return theta

    def _forward(self, theta):
        P = _finite(reflect_right(self.Wc, theta), "weight reflection")
        V = _finite(reflect_left(theta, self.Xc), "activation reflection")
        Pq, dP = self._quantize(P, self.wcfg, "weight quantization")
        Vq, dV = self._quantize(V, self.acfg, "activation quantization")
        out, cache = self.block.forward(Pq, Vq, keep=True)
        resid = out - self.target
        return resid, (Pq, Vq, dP, dV, cache)

    def loss(self, theta) -> float:
        resid, _ = self._forward(self._check_theta(theta))
        return float(_finite(np.sum(resid * resid), "loss"))

    def loss_and_grad(self, theta):
        theta = self._check_theta(theta)
        resid, (Pq, Vq, dP, dV, cache) = self._forward(theta)
        loss = float(_finite(np.sum(resid * resid), "loss"))
        gW, gX = self.block.backward(Pq, Vq, cache, 2.0 * resid)
        if dP is not None:
            gW = gW * dP
        if dV is not None:
            gX = gX * dV
        # dL = <dH, M> with M = gX Xc^T + Wc^T gW; H = I - 2 tt^T / t^T t.
        n = theta @ theta
        Mt = gX @ (self.Xc.T @ theta) + self.Wc.T @ (gW @ theta)
        Mtt = self.Xc @ (gX.T @ theta) + gW.T @ (self.Wc @ theta)
        tMt = theta @ Mt
        grad = -(2.0 / n) * (Mt + Mtt) + (4.0 * tMt / (n * n)) * theta
        return loss, _finite(grad, "gradient")

    def gradient(self, theta):
        return self.loss_and_grad(theta)[1]

    def apply(self, theta):
        """Transformed, unquantized operands ``(W C^T H, H C X)``."""
        theta = self._check_theta(theta)
        return reflect_right(self.Wc, theta), reflect_left(theta, self.Xc)


def block_loss(theta, W, X, block, transform=None, wcfg=None, acfg=None) -> float:
    return BlockObjective(W, X, block, transform, wcfg, acfg).loss(theta)


def loss_gradient(theta, W, X, block, transform=None, wcfg=None, acfg=None):
    return BlockObjective(W, X, block, transform, wcfg, acfg).gradient(theta)


@dataclass
class FinetuneConfig:
    epochs: int = 20
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    wcfg: QuantConfig | None = field(default_factory=weight_config)
    acfg: QuantConfig | None = field(default_factory=activation_config)
    divergence_factor: float = 1e3

    def __post_init__(self):
        if self.epochs < 1 or not self.lr > 0:
            raise InputError("need epochs >= 1 and lr > 0")


@dataclass
class FinetuneResult:
    theta: np.ndarray
    loss: float
    initial_loss: float
    trace: list
    best_epoch: int
    diverged: bool = False


def finetune(theta0, objective: BlockObjective, cfg: FinetuneConfig | None = None) -> FinetuneResult:
    """Adam on ``theta``; one full-batch step per epoch.

    ``trace[0]`` is the initial loss and ``trace[e]`` the loss after epoch
    ``e``.  The lowest-loss ``theta`` seen is returned, so the result never
    scores worse than the start.
    """
    cfg = cfg or FinetuneConfig()
    theta = np.array(theta0, dtype=np.float64)
    loss, grad = objective.loss_and_grad(theta)
    initial = loss
    trace = [loss]
    best = (loss, theta.copy(), 0)
    m = np.zeros_like(theta)
    v = np.zeros_like(theta)
    diverged = False
    for epoch in range(1, cfg.epochs + 1):
        m = cfg.beta1 * m + (1 - cfg.beta1) * grad
        v = cfg.beta2 * v + (1 - cfg.beta2) * grad * grad
        mhat = m / (1 - cfg.beta1 ** epoch)
        vhat = v / (1 - cfg.beta2 ** epoch)
        theta = theta - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
        loss, grad = objective.loss_and_grad(theta)
        trace.append(loss)
        if loss < best[0]:
            best = (loss, theta.copy(), epoch)
        if loss > cfg.divergence_factor * max(initial, np.finfo(float).tiny):
            logger.warning("finetune diverged at epoch %d: loss %.6g vs initial %.6g",
                           epoch, loss, initial)
            diverged = True
            break
    return FinetuneResult(best[1], best[0], initial, trace, best[2], diverged)


def finite_diff_check(fun, grad, theta, step=1e-5) -> float:
    """Max over coordinates of ``|central difference - grad| / max(|grad|, 1e-12)``."""
    if not step > 0:
        raise InputError("step must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    g = np.asarray(grad(theta), dtype=np.float64)
    fd = np.empty_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = step
        fd[i] = (fun(theta + e) - fun(theta - e)) / (2 * step)
    return float(np.max(np.abs(fd - g) / np.maximum(np.abs(g), 1e-12)))


def toy_instance(d=32, N=64, seed=0, outliers=2, scale=20.0):
    """Seeded ``(W, X, block)`` with a few outlier channels in ``X``."""
    g = as_seed(seed).generator()
    X = g.uniform(-1, 1, d)[:, None] + 0.3 * g.standard_normal((d, N))
    X[g.choice(d, outliers, replace=False)] *= scale
    W = g.standard_normal((4 * d, d)) / np.sqrt(d)
    return W, X, ToyBlock.default(d, seed)
