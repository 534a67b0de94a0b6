"""scikit-learn style wrappers.

These follow the sklearn layout, ``(n_samples, n_features)``: rows are
tokens and columns are channels.  The functional API underneath works on
``d x N`` activations, so inputs are transposed at the boundary.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .errors import InputError
from .lloyd import lloyd_max_fit
from .pipeline import Step1Config, equivalence_residual, ruquant_step1
from .quantizer import QuantConfig, fake_quantize, uniform_quantize


def _check_tokens(X, estimator=None, n_features=None):
    X = check_array(X, dtype=np.float64, ensure_all_finite=True)
    if n_features is not None and X.shape[1] != n_features:
        raise InputError(f"{type(estimator).__name__} was fitted with {n_features} features, "
                         f"got {X.shape[1]}")
    return X


class RUQuantTransformer(TransformerMixin, BaseEstimator):
    """Output-preserving smoothing, block rotation and zigzag transform.

    ``fit`` learns the transform from activations ``X`` (tokens x channels)
    and, optionally, the weight of the layer that consumes them (``out x
    channels``, as in ``y = x @ weight.T``).  ``transform`` maps activations,
    ``transform_weight`` maps weights, so
    ``transform(X) @ transform_weight(W).T == X @ W.T``.
    """

    def __init__(self, block_size=128, n_iter=16, n_rounds=1, n_zigzag=1, alpha=0.6,
                 random_state=0):
        self.block_size = block_size
        self.n_iter = n_iter
        self.n_rounds = n_rounds
        self.n_zigzag = n_zigzag
        self.alpha = alpha
        self.random_state = random_state

    def _config(self):
        return Step1Config(B=self.block_size, K=self.n_iter, rounds=self.n_rounds,
                           T=self.n_zigzag, alpha=self.alpha, seed=self.random_state)

    def fit(self, X, y=None, weight=None):
        X = _check_tokens(X)
        if weight is None:
            # Without a weight the smoothing scales only see the activations.
            weight = np.ones((1, X.shape[1]))
        weight = check_array(weight, dtype=np.float64)
        X1, W1, t = ruquant_step1(X.T, weight, self._config())
        self.transform_ = t
        self.n_features_in_ = X.shape[1]
        self.residual_ = equivalence_residual(weight, X.T, W1, X1)
        return self

    def transform(self, X):
        check_is_fitted(self, "transform_")
        X = _check_tokens(X, self, self.n_features_in_)
        return self.transform_.transform_activations(X.T).T

    def inverse_transform(self, X):
        check_is_fitted(self, "transform_")
        X = _check_tokens(X, self, self.n_features_in_)
        return self.transform_.inverse_activations(X.T).T

    def transform_weight(self, W):
        check_is_fitted(self, "transform_")
        W = _check_tokens(W, self, self.n_features_in_)
        return self.transform_.transform_weights(W)


class UniformQuantizer(TransformerMixin, BaseEstimator):
    """Fake-quantize with the asymmetric uniform quantizer.

    Stateless: scales are computed per call (per token by default, which is
    ``per_row`` in this layout).
    """

    def __init__(self, bits=4, clip_ratio=1.0, granularity="per_token"):
        self.bits = bits
        self.clip_ratio = clip_ratio
        self.granularity = granularity

    def _config(self):
        # Tokens are rows here but columns in the functional API.
        mapping = {"per_token": "per_column", "per_channel": "per_row", "per_tensor": "per_tensor"}
        if self.granularity not in mapping:
            raise InputError(f"granularity must be one of {sorted(mapping)}")
        return QuantConfig(self.bits, self.clip_ratio, mapping[self.granularity])

    def fit(self, X, y=None):
        X = _check_tokens(X)
        self._config()
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "n_features_in_")
        return fake_quantize(_check_tokens(X).T, self._config()).T

    def quantize(self, X):
        """The :class:`QuantizedTensor` of ``X.T``."""
        return uniform_quantize(_check_tokens(X).T, self._config())


class LloydMaxScalarQuantizer(TransformerMixin, BaseEstimator):
    """One Lloyd-Max codebook fitted to all entries of ``X``.

    ``predict`` returns cell indices, ``transform`` the reconstructed values.
    """

    def __init__(self, bits=4, tol=1e-12, max_iter=500, init="auto"):
        self.bits = bits
        self.tol = tol
        self.max_iter = max_iter
        self.init = init

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_2d=False)
        self.quantizer_ = lloyd_max_fit(X, self.bits, self.tol, self.max_iter, self.init)
        self.levels_ = self.quantizer_.levels
        self.boundaries_ = self.quantizer_.boundaries
        self.mse_ = self.quantizer_.final_mse
        return self

    def predict(self, X):
        check_is_fitted(self, "quantizer_")
        return self.quantizer_.cell_index(check_array(X, dtype=np.float64, ensure_2d=False))

    def transform(self, X):
        check_is_fitted(self, "quantizer_")
        return self.quantizer_.apply(check_array(X, dtype=np.float64, ensure_2d=False))
