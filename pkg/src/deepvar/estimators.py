"""Value-at-risk estimators for an i.i.d. sample: empirical, Gaussian plug-in
and Gaussian unbiased.

Each estimator exists twice: as a plain function of one window, and as a
scikit-learn style estimator whose ``predict`` maps a 2-d array of windows
(one window per row) to one risk value per row.
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .core import InvalidInputError, _check_prob, std_normal_quantile, student_t_quantile
from .scoring import mean_quantile_score

__all__ = [
    "InsufficientSampleError",
    "BaseVaREstimator",
    "EmpiricalVaR",
    "GaussianPluginVaR",
    "GaussianUnbiasedVaR",
    "var_empirical",
    "var_gaussian_plugin",
    "var_gaussian_unbiased",
    "check_windows",
]


class InsufficientSampleError(InvalidInputError):
    """Raised when a window is too short for the requested estimator."""


def check_windows(X, min_length: int = 1) -> np.ndarray:
    """Validate a 2-d float array of windows (rows) and return it as float64."""
    X = check_array(X, dtype=np.float64, ensure_2d=True, ensure_all_finite=True)
    if X.shape[1] < min_length:
        raise InsufficientSampleError(
            f"windows of length {X.shape[1]} are shorter than the required {min_length}"
        )
    return X


def _window(x, min_length: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInputError(f"expected a 1-d window, got shape {x.shape}")
    if x.size < min_length:
        raise InsufficientSampleError(f"need at least {min_length} observations, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("window contains non-finite values")
    return x


def _empirical_index(n: int, alpha: float) -> int:
    """0-based index of the order statistic used by the empirical estimator."""
    k = math.floor(n * alpha)
    if k + 1 > n:
        raise InsufficientSampleError(f"floor(n*alpha)+1 = {k + 1} exceeds n = {n}")
    return k


def var_empirical(x, alpha: float) -> float:
    """Negated ``(floor(n*alpha)+1)``-th smallest observation."""
    alpha = _check_prob(alpha)
    x = _window(x, 1)
    k = _empirical_index(x.size, alpha)
    return float(-np.sort(x)[k])


def var_gaussian_plugin(x, alpha: float) -> float:
    alpha = _check_prob(alpha)
    x = _window(x, 2)
    return float(-(x.mean() + x.std(ddof=1) * std_normal_quantile(alpha)))


def unbiased_factor(n: int, alpha: float) -> float:
    """``sqrt((n+1)/n) * t_{n-1}^{-1}(alpha)``, the unbiased Gaussian multiplier."""
    return math.sqrt((n + 1) / n) * student_t_quantile(alpha, n - 1)


def var_gaussian_unbiased(x, alpha: float) -> float:
    alpha = _check_prob(alpha)
    x = _window(x, 2)
    return float(-(x.mean() + x.std(ddof=1) * unbiased_factor(x.size, alpha)))


class BaseVaREstimator(BaseEstimator):
    """Shared plumbing: window validation and a score that is higher-is-better.

    Subclasses implement ``_predict(X)`` for validated windows.
    """

    _min_window = 1

    def fit(self, X, y=None):
        _check_prob(self.alpha)
        X = check_windows(X, self._min_window)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "n_features_in_")
        X = check_windows(X, self._min_window)
        if X.shape[1] != self.n_features_in_:
            raise InvalidInputError(
                f"fitted on windows of length {self.n_features_in_}, got {X.shape[1]}"
            )
        return self._predict(X)

    def score(self, X, y):
        """Negative mean quantile score of the predicted risks against ``y``."""
        return -mean_quantile_score(self.predict(X), y, self.alpha)


class EmpiricalVaR(BaseVaREstimator):
    """Historical-simulation VaR.

    Parameters
    ----------
    alpha : float, default=0.05
        Tail probability of the quantile.
    """

    def __init__(self, alpha=0.05):
        self.alpha = alpha

    def _predict(self, X):
        k = _empirical_index(X.shape[1], self.alpha)
        return -np.partition(X, k, axis=1)[:, k]


class GaussianPluginVaR(BaseVaREstimator):
    """Normal VaR with sample mean and standard deviation plugged in."""

    _min_window = 2

    def __init__(self, alpha=0.05):
        self.alpha = alpha

    def _predict(self, X):
        return -(X.mean(axis=1) + X.std(axis=1, ddof=1) * std_normal_quantile(self.alpha))


class GaussianUnbiasedVaR(BaseVaREstimator):
    """Normal VaR using the Student-t predictive quantile, so that the secured
    position carries zero VaR under i.i.d. Gaussian data."""

    _min_window = 2

    def __init__(self, alpha=0.05):
        self.alpha = alpha

    def _predict(self, X):
        factor = unbiased_factor(X.shape[1], self.alpha)
        return -(X.mean(axis=1) + X.std(axis=1, ddof=1) * factor)
