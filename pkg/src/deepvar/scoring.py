"""Quantile score, exception rate and mean quantile score.

Conventions: a *risk* value is the capital amount (positive for a loss-making
tail); the matching quantile forecast is ``-risk``.  The secured position is
``target + risk``.
"""

from __future__ import annotations

import numpy as np

from .core import InvalidInputError, _check_prob

__all__ = [
    "quantile_score",
    "quantile_score_slope",
    "exception_rate",
    "mean_quantile_score",
    "secured_positions",
]


def quantile_score(q_forecast, y, alpha: float):
    """Pinball loss ``(1{q >= y} - alpha) * (q - y)``; vectorised."""
    alpha = _check_prob(alpha)
    q = np.asarray(q_forecast, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = ((q >= y).astype(np.float64) - alpha) * (q - y)
    return float(out) if out.ndim == 0 else out


def quantile_score_slope(risk, y, alpha: float):
    """Derivative of ``quantile_score(-risk, y)`` with respect to ``risk``.

    At the kink (``y + risk == 0``) the ``q >= y`` branch is used, giving
    ``alpha - 1``.
    """
    z = np.asarray(y, dtype=np.float64) + np.asarray(risk, dtype=np.float64)
    return alpha - (z <= 0).astype(np.float64)


def _paired(risks, targets) -> tuple[np.ndarray, np.ndarray]:
    r = np.asarray(risks, dtype=np.float64).reshape(-1)
    t = np.asarray(targets, dtype=np.float64).reshape(-1)
    if r.size != t.size:
        raise InvalidInputError(f"risks have length {r.size}, targets have length {t.size}")
    if r.size == 0:
        raise InvalidInputError("at least one (risk, target) pair is required")
    return r, t


def secured_positions(risks, targets) -> np.ndarray:
    r, t = _paired(risks, targets)
    return t + r


def exception_rate(risks, targets) -> float:
    """Fraction of days with ``target + risk < 0`` (strict)."""
    z = secured_positions(risks, targets)
    return float(np.count_nonzero(z < 0) / z.size)


def mean_quantile_score(risks, targets, alpha: float) -> float:
    r, t = _paired(risks, targets)
    return float(np.mean(quantile_score(-r, t, alpha)))
