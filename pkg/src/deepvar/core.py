"""Return series containers, rolling windows, sample statistics and the
normal / Student-t distribution functions used by every estimator."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import special

__all__ = [
    "InvalidInputError",
    "InvalidPlanError",
    "DomainError",
    "ReturnSeries",
    "WindowPlan",
    "SplitPlan",
    "make_windows",
    "sample_mean",
    "sample_std",
    "std_normal_quantile",
    "student_t_cdf",
    "student_t_pdf",
    "student_t_quantile",
]


class InvalidInputError(ValueError):
    """Raised for malformed numeric input (empty vectors, NaNs, bad shapes)."""


class InvalidPlanError(InvalidInputError):
    """Raised when a window plan does not fit inside the series."""


class DomainError(ValueError):
    """Raised when a probability or degrees-of-freedom argument is out of range."""


@dataclass(frozen=True)
class ReturnSeries:
    """Ordered univariate P&L returns in decimal units with optional date labels."""

    values: np.ndarray
    labels: Optional[tuple] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.size < 1:
            raise InvalidInputError("a return series needs at least one observation")
        if not np.all(np.isfinite(values)):
            bad = int(np.flatnonzero(~np.isfinite(values))[0])
            raise InvalidInputError(f"non-finite return at position {bad}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        if self.labels is not None:
            labels = tuple(str(lab) for lab in self.labels)
            if len(labels) != values.size:
                raise InvalidInputError(
                    f"labels have length {len(labels)}, values have length {values.size}"
                )
            object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return int(self.values.size)

    def segment(self, start: int, stop: int) -> "ReturnSeries":
        labels = None if self.labels is None else self.labels[start:stop]
        return ReturnSeries(self.values[start:stop], labels)


@dataclass(frozen=True)
class WindowPlan:
    """Rolling-window layout: ``m`` windows of length ``n`` starting at ``offset``.

    With 1-based window index ``i`` the window covers
    ``values[offset + i - 1 : offset + i - 1 + n]`` (0-based slice) and its
    target is ``values[offset + i - 1 + n]``.
    """

    n: int
    m: int
    offset: int = 0

    def __post_init__(self):
        if int(self.n) < 1 or int(self.m) < 1:
            raise InvalidPlanError(f"n and m must be positive, got n={self.n}, m={self.m}")
        if int(self.offset) < 0:
            raise InvalidPlanError(f"offset must be nonnegative, got {self.offset}")

    @property
    def span(self) -> int:
        return self.offset + self.m + self.n

    def validate(self, length: int) -> None:
        if self.span > length:
            raise InvalidPlanError(
                f"plan needs offset+m+n={self.span} observations, series has {length}"
            )

    def target_indices(self) -> np.ndarray:
        return self.offset + self.n + np.arange(self.m)

    @classmethod
    def covering(cls, start: int, stop: int, n: int) -> "WindowPlan":
        """Plan whose windows and targets all lie inside ``[start, stop)``."""
        return cls(n=n, m=stop - start - n, offset=start)


@dataclass(frozen=True)
class SplitPlan:
    """Contiguous train / validation / test fractions (no shuffling)."""

    train_fraction: float = 0.8
    validation_fraction: float = 0.1
    test_fraction: float = 0.1

    def __post_init__(self):
        fracs = (self.train_fraction, self.validation_fraction, self.test_fraction)
        if any(f <= 0 for f in fracs):
            raise InvalidInputError(f"split fractions must be positive, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise InvalidInputError(f"split fractions must sum to 1, got {sum(fracs)}")

    def boundaries(self, length: int) -> tuple[int, int]:
        """Return ``(train_end, validation_end)`` as 0-based exclusive indices."""
        train_end = int(round(length * self.train_fraction))
        val_end = int(round(length * (self.train_fraction + self.validation_fraction)))
        return train_end, val_end

    def segments(self, length: int) -> dict[str, tuple[int, int]]:
        train_end, val_end = self.boundaries(length)
        return {
            "train": (0, train_end),
            "validation": (train_end, val_end),
            "test": (val_end, length),
        }


def _as_series_values(series) -> np.ndarray:
    if isinstance(series, ReturnSeries):
        return series.values
    return ReturnSeries(series).values


def make_windows(series, plan: WindowPlan) -> tuple[np.ndarray, np.ndarray]:
    """Cut ``series`` into rolling windows.

    Returns
    -------
    windows : ndarray of shape (m, n)
    targets : ndarray of shape (m,)
        ``targets[i]`` is the observation following ``windows[i]``.
    """
    values = _as_series_values(series)
    plan.validate(values.size)
    stop = plan.offset + plan.m + plan.n - 1
    windows = np.lib.stride_tricks.sliding_window_view(values[plan.offset:stop], plan.n)
    targets = values[plan.target_indices()]
    return np.array(windows, dtype=np.float64), np.array(targets, dtype=np.float64)


def _vector(x, min_len: int, what: str) -> np.ndarray:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"{what} expects a 1-d vector, got shape {arr.shape}")
    if arr.size < min_len:
        raise InvalidInputError(f"{what} needs at least {min_len} values, got {arr.size}")
    return arr


def sample_mean(x) -> float:
    return float(np.mean(_vector(x, 1, "sample_mean")))


def sample_std(x) -> float:
    """Square root of the unbiased (divisor ``n - 1``) variance."""
    arr = _vector(x, 2, "sample_std")
    return float(np.std(arr, ddof=1))


# -- distributions ----------------------------------------------------------

def _check_prob(p: float) -> float:
    p = float(p)
    if not 0.0 < p < 1.0:
        raise DomainError(f"probability must lie in (0, 1), got {p}")
    return p


def _check_dof(dof: float) -> float:
    dof = float(dof)
    if not dof > 0 or not math.isfinite(dof):
        raise DomainError(f"degrees of freedom must be positive and finite, got {dof}")
    return dof


def std_normal_quantile(p: float) -> float:
    return float(special.ndtri(_check_prob(p)))


def student_t_pdf(x, dof: float):
    dof = _check_dof(dof)
    x = np.asarray(x, dtype=np.float64)
    log_norm = (
        special.gammaln(0.5 * (dof + 1.0))
        - special.gammaln(0.5 * dof)
        - 0.5 * math.log(dof * math.pi)
    )
    out = np.exp(log_norm - 0.5 * (dof + 1.0) * np.log1p(x * x / dof))
    return float(out) if out.ndim == 0 else out


def student_t_cdf(x, dof: float):
    """Student-t CDF through the regularized incomplete beta function.

    The body (``x**2 < dof``) uses ``I_{x²/(ν+x²)}(1/2, ν/2)`` and the tails use
    ``I_{ν/(ν+x²)}(ν/2, 1/2)`` so neither branch loses digits to cancellation.
    """
    dof = _check_dof(dof)
    x = np.asarray(x, dtype=np.float64)
    x2 = x * x
    denom = dof + x2
    with np.errstate(invalid="ignore", divide="ignore"):
        body = 0.5 * special.betainc(0.5, 0.5 * dof, x2 / denom)
        tail = 0.5 * special.betainc(0.5 * dof, 0.5, dof / denom)
    in_body = x2 < dof
    upper = np.where(in_body, 0.5 + body, 1.0 - tail)
    lower = np.where(in_body, 0.5 - body, tail)
    out = np.where(x >= 0, upper, lower)
    return float(out) if out.ndim == 0 else out


def student_t_quantile(p: float, dof: float) -> float:
    """Inverse Student-t CDF: incomplete-beta inversion plus Newton polishing."""
    p = _check_prob(p)
    dof = _check_dof(dof)
    if p == 0.5:
        return 0.0
    tail = min(p, 1.0 - p)
    z = special.betaincinv(0.5 * dof, 0.5, 2.0 * tail)
    if 0.0 < z < 1.0:
        x = -math.sqrt(dof * (1.0 / z - 1.0))
    else:
        x = float(special.ndtri(tail))
    # Newton on the lower tail, where the CDF is computed without cancellation.
    for _ in range(8):
        step = (student_t_cdf(x, dof) - tail) / student_t_pdf(x, dof)
        x -= step
        if abs(step) <= 1e-15 * max(1.0, abs(x)):
            break
    return x if p < 0.5 else -x
