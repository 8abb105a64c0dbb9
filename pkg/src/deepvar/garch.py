"""GARCH(p, q) simulation, quasi-maximum-likelihood fitting and GARCH VaR.

Variance recursion::

    sigma2[t] = omega + sum_i alphas[i] * x[t-1-i]**2 + sum_j betas[j] * sigma2[t-1-j]
    x[t] = sigma[t] * eps[t]

Student-t innovations are always the unit-variance version, i.e. a
``t_nu`` draw scaled by ``sqrt((nu - 2) / nu)``, so ``sigma`` is the
conditional standard deviation under both noise families.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import optimize, signal, special

from .core import InvalidInputError, _check_prob, student_t_quantile, std_normal_quantile
from .estimators import BaseVaREstimator, unbiased_factor

__all__ = [
    "InvalidSpecError",
    "DegenerateInputError",
    "GarchSpec",
    "GarchState",
    "GarchFit",
    "PRESETS",
    "simulate",
    "variance_recursion",
    "conditional_sigmas",
    "next_sigma",
    "garch_loglik",
    "fit_qmle",
    "innovation_quantile",
    "var_true",
    "var_garch_normal",
    "var_garch_t",
    "GarchVaR",
]

NOISE_FAMILIES = ("normal", "student_t")
PERSISTENCE_CAP = 1.0 - 1e-6
NU_FLOOR = 2.05


class InvalidSpecError(InvalidInputError):
    pass


class DegenerateInputError(InvalidInputError):
    """Raised when a sample has zero variance and no GARCH model can be fitted."""


@dataclass(frozen=True)
class GarchSpec:
    """GARCH(p, q) coefficients and innovation family.

    ``alphas`` act on lagged squared returns (order ``p``), ``betas`` on
    lagged conditional variances (order ``q``).
    """

    omega: float
    alphas: tuple
    betas: tuple
    noise: str = "normal"
    nu: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "omega", float(self.omega))
        object.__setattr__(self, "alphas", tuple(float(a) for a in np.atleast_1d(self.alphas)))
        object.__setattr__(self, "betas", tuple(float(b) for b in np.atleast_1d(self.betas)))
        if self.nu is not None:
            object.__setattr__(self, "nu", float(self.nu))
        if self.noise not in NOISE_FAMILIES:
            raise InvalidSpecError(f"noise must be one of {NOISE_FAMILIES}, got {self.noise!r}")
        if not self.alphas or not self.betas:
            raise InvalidSpecError("p and q must both be at least 1")
        coefs = (self.omega,) + self.alphas + self.betas
        if not all(math.isfinite(c) and c >= 0 for c in coefs):
            raise InvalidSpecError(f"coefficients must be finite and nonnegative: {coefs}")
        if self.persistence >= 1.0:
            raise InvalidSpecError(f"sum(alphas) + sum(betas) = {self.persistence} is not < 1")
        if self.noise == "student_t":
            if self.nu is None or not self.nu > 2:
                raise InvalidSpecError(f"student_t noise needs nu > 2, got {self.nu}")

    @property
    def p(self) -> int:
        return len(self.alphas)

    @property
    def q(self) -> int:
        return len(self.betas)

    @property
    def persistence(self) -> float:
        return math.fsum(self.alphas) + math.fsum(self.betas)

    @property
    def unconditional_variance(self) -> float:
        return self.omega / (1.0 - self.persistence)

    def check_simulation_restriction(self) -> None:
        """Enforce ``omega + sum(alphas) + sum(betas) < 1`` as well as stationarity."""
        total = self.omega + self.persistence
        if total >= 1.0:
            raise InvalidSpecError(f"omega + sum(alphas) + sum(betas) = {total} is not < 1")
        if self.omega <= 0:
            raise InvalidSpecError("simulation needs omega > 0")

    def to_dict(self) -> dict:
        return {
            "omega": self.omega,
            "alphas": list(self.alphas),
            "betas": list(self.betas),
            "noise": self.noise,
            "nu": self.nu,
        }


def _preset(alphas, betas, noise):
    return GarchSpec(4e-6, alphas, betas, noise, 5.0 if noise == "student_t" else None)


PRESETS: dict[str, GarchSpec] = {}
for _noise, _tag in (("normal", "n"), ("student_t", "t")):
    PRESETS[f"garch11{_tag}"] = _preset((0.17,), (0.8,), _noise)
    PRESETS[f"garch21{_tag}"] = _preset((0.12, 0.05), (0.8,), _noise)
    PRESETS[f"garch31{_tag}"] = _preset((0.12, 0.10, 0.05), (0.7,), _noise)
    PRESETS[f"garch41{_tag}"] = _preset((0.12, 0.05, 0.05, 0.05), (0.7,), _noise)


@dataclass(frozen=True)
class GarchState:
    """Recursion state: the last ``p`` returns and last ``q`` volatilities,
    oldest first."""

    x_tail: np.ndarray
    sigma_tail: np.ndarray

    @classmethod
    def stationary(cls, spec: GarchSpec) -> "GarchState":
        s = math.sqrt(spec.unconditional_variance)
        # x**2 = s**2 pre-sample makes the first simulated sigma equal s exactly
        return cls(np.full(spec.p, s), np.full(spec.q, s))

    @classmethod
    def from_path(cls, spec: GarchSpec, x, sigmas) -> "GarchState":
        x = np.asarray(x, dtype=np.float64)
        sigmas = np.asarray(sigmas, dtype=np.float64)
        if x.size < spec.p or sigmas.size < spec.q:
            raise InvalidInputError("path too short to define a recursion state")
        return cls(x[x.size - spec.p:].copy(), sigmas[sigmas.size - spec.q:].copy())


def variance_recursion(omega, alphas, betas, x2_hist, s2_hist, x2_new) -> np.ndarray:
    """Run the variance recursion over new squared returns.

    ``x2_hist`` (length p) and ``s2_hist`` (length q) hold the squared returns
    and variances preceding the first new step, oldest first.  Returns the
    ``len(x2_new) + 1`` variances for each new step plus the one-step-ahead
    forecast.
    """
    alphas = np.asarray(alphas, dtype=np.float64)
    betas = np.asarray(betas, dtype=np.float64)
    p, q = alphas.size, betas.size
    x2_ext = np.concatenate([np.asarray(x2_hist, dtype=np.float64), np.asarray(x2_new, dtype=np.float64)])
    # arch[k] = sum_i alphas[i] * x2_ext[p + k - 1 - i] for k = 0..len(x2_new)
    arch = omega + np.convolve(x2_ext, alphas)[p - 1:p - 1 + x2_ext.size - p + 1]
    a = np.concatenate([[1.0], -betas])
    past = np.asarray(s2_hist, dtype=np.float64)[::-1]
    zi = signal.lfiltic([1.0], a, past)
    s2, _ = signal.lfilter([1.0], a, arch, zi=zi)
    return s2


def _simulate_path(spec: GarchSpec, eps: np.ndarray, state: GarchState):
    p, q = spec.p, spec.q
    omega = spec.omega
    alphas = spec.alphas
    betas = spec.betas
    x2_lag = [float(v) ** 2 for v in state.x_tail[::-1]]  # most recent first
    s2_lag = [float(v) ** 2 for v in state.sigma_tail[::-1]]
    x = np.empty(eps.size)
    sig = np.empty(eps.size)
    for t in range(eps.size):
        s2 = omega
        for i in range(p):
            s2 += alphas[i] * x2_lag[i]
        for j in range(q):
            s2 += betas[j] * s2_lag[j]
        s = math.sqrt(s2)
        xt = s * eps[t]
        x[t] = xt
        sig[t] = s
        x2_lag.insert(0, xt * xt)
        x2_lag.pop()
        s2_lag.insert(0, s2)
        s2_lag.pop()
    return x, sig


def draw_innovations(spec: GarchSpec, size: int, rng: np.random.Generator) -> np.ndarray:
    if spec.noise == "normal":
        return rng.standard_normal(size)
    return rng.standard_t(spec.nu, size) * math.sqrt((spec.nu - 2.0) / spec.nu)


def simulate(spec: GarchSpec, length: int, burn_in: int = 1000, seed=None,
             state: Optional[GarchState] = None) -> tuple[np.ndarray, np.ndarray]:
    """Simulate ``length`` GARCH returns after discarding ``burn_in`` steps.

    Without ``state`` the recursion starts at the unconditional variance;
    passing a ``GarchState`` continues an existing path.

    Returns
    -------
    x : ndarray of shape (length,)
    sigmas : ndarray of shape (length,)
        True conditional volatility of each returned observation.
    """
    spec.check_simulation_restriction()
    if int(length) < 1:
        raise InvalidInputError(f"length must be positive, got {length}")
    if int(burn_in) < 0:
        raise InvalidInputError(f"burn_in must be nonnegative, got {burn_in}")
    rng = np.random.default_rng(seed)
    eps = draw_innovations(spec, int(burn_in) + int(length), rng)
    x, sig = _simulate_path(spec, eps, state or GarchState.stationary(spec))
    return x[burn_in:], sig[burn_in:]


def conditional_sigmas(spec: GarchSpec, x, sigma_init: float) -> np.ndarray:
    """Volatilities for every observation of ``x`` plus the forecast.

    ``sigma_init`` is the volatility of ``x[0]``; pre-sample squared returns
    are taken as ``sigma_init**2``.  Returns ``len(x) + 1`` values.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 1:
        raise InvalidInputError("x must be a non-empty 1-d vector")
    if not sigma_init > 0:
        raise InvalidInputError(f"sigma_init must be positive, got {sigma_init}")
    s2_0 = float(sigma_init) ** 2
    x2_hist = np.full(spec.p, s2_0)
    x2_hist[-1] = x[0] ** 2
    s2 = variance_recursion(spec.omega, spec.alphas, spec.betas, x2_hist,
                            np.full(spec.q, s2_0), x[1:] ** 2)
    return np.sqrt(np.concatenate([[s2_0], s2]))


def next_sigma(fit_params: GarchSpec, x, sigma_init: float) -> float:
    """One-step-ahead volatility after the last observation of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    if x.size < max(fit_params.p, fit_params.q):
        raise InvalidInputError(
            f"need at least max(p, q) = {max(fit_params.p, fit_params.q)} observations"
        )
    return float(conditional_sigmas(fit_params, x, sigma_init)[-1])


# -- likelihood -------------------------------------------------------------

def _backcast_variances(omega, alphas, betas, x, backcast):
    p, q = len(alphas), len(betas)
    return variance_recursion(omega, alphas, betas, np.full(p, backcast),
                              np.full(q, backcast), x * x)


def _loglik_terms(x, s2, noise, nu):
    if noise == "normal":
        return -0.5 * (math.log(2.0 * math.pi) + np.log(s2) + x * x / s2)
    const = (special.gammaln(0.5 * (nu + 1.0)) - special.gammaln(0.5 * nu)
             - 0.5 * math.log(math.pi * (nu - 2.0)))
    return const - 0.5 * np.log(s2) - 0.5 * (nu + 1.0) * np.log1p(x * x / (s2 * (nu - 2.0)))


def garch_loglik(spec: GarchSpec, x, backcast: Optional[float] = None) -> float:
    """Conditional log-likelihood of ``x`` under ``spec``.

    Pre-sample squared returns and variances equal ``backcast`` (default:
    the sample variance of ``x``), the convention used by ``fit_qmle``.
    """
    x = np.asarray(x, dtype=np.float64)
    if backcast is None:
        backcast = float(np.var(x, ddof=1))
    s2 = _backcast_variances(spec.omega, spec.alphas, spec.betas, x, backcast)[:-1]
    return float(np.sum(_loglik_terms(x, s2, spec.noise, spec.nu)))


@dataclass(frozen=True)
class GarchFit:
    """Result of ``fit_qmle``: fitted spec, in-sample volatilities and forecast."""

    spec: GarchSpec
    sigma_path: np.ndarray
    next_sigma: float
    loglik: float
    converged: bool
    n_starts: int = 0
    extra: dict = field(default_factory=dict)


class _Transform:
    """Map between GARCH parameters (for unit-variance data) and an
    unconstrained vector ``[log omega, logit persistence, share logits..., log(nu - 2.05)]``."""

    def __init__(self, p, q, noise):
        self.p, self.q, self.noise = p, q, noise
        self.k = p + q
        self.size = 2 + (self.k - 1) + (noise == "student_t")

    def decode(self, theta):
        omega = math.exp(theta[0])
        persistence = PERSISTENCE_CAP * special.expit(theta[1])
        logits = np.append(theta[2:2 + self.k - 1], 0.0)
        shares = special.softmax(logits)
        coefs = persistence * shares
        nu = NU_FLOOR + math.exp(theta[-1]) if self.noise == "student_t" else None
        return omega, coefs[:self.p], coefs[self.p:], nu

    def encode(self, omega, alphas, betas, nu=None):
        coefs = np.concatenate([alphas, betas])
        coefs = np.maximum(coefs, 1e-8)
        persistence = min(coefs.sum(), PERSISTENCE_CAP * (1 - 1e-9))
        shares = coefs / coefs.sum()
        logits = np.log(shares[:-1]) - math.log(shares[-1])
        theta = [math.log(omega), special.logit(persistence / PERSISTENCE_CAP), *logits]
        if self.noise == "student_t":
            theta.append(math.log(max(nu - NU_FLOOR, 1e-6)))
        return np.asarray(theta, dtype=np.float64)

    def bounds(self):
        b = [(-30.0, 10.0), (-20.0, 20.0)] + [(-25.0, 25.0)] * (self.k - 1)
        if self.noise == "student_t":
            b.append((-8.0, 8.0))
        return b


def _start_points(tr: _Transform, rng: np.random.Generator, n_random: int, warm: Optional[GarchSpec], scale2: float):
    p, q = tr.p, tr.q
    starts = []
    # variance targeting on unit-variance data: omega = 1 - persistence
    alphas = np.full(p, 0.1 / p)
    betas = np.full(q, 0.8 / q)
    starts.append(tr.encode(0.1, alphas, betas, 8.0))
    for _ in range(n_random):
        persistence = rng.uniform(0.5, 0.99)
        arch_share = rng.uniform(0.05, 0.5)
        a = persistence * arch_share * rng.dirichlet(np.ones(p))
        b = persistence * (1 - arch_share) * rng.dirichlet(np.ones(q))
        omega = (1 - persistence) * rng.uniform(0.5, 1.5)
        starts.append(tr.encode(omega, a, b, rng.uniform(3.0, 15.0)))
    if warm is not None and warm.p == p and warm.q == q:
        nu = warm.nu if warm.nu is not None else 8.0
        starts.append(tr.encode(max(warm.omega / scale2, 1e-12), warm.alphas, warm.betas, nu))
    return starts


def fit_qmle(x, p: int = 1, q: int = 1, noise: str = "normal", *, n_restarts: int = 3,
             random_state=0, warm_start: Optional[GarchSpec] = None,
             maxiter: int = 500) -> GarchFit:
    """Quasi-maximum-likelihood GARCH(p, q) fit under Gaussian or standardized-t noise.

    The data are divided by their sample standard deviation before fitting and
    ``omega`` is rescaled afterwards, so the fit is scale-equivariant.
    Pre-sample squared returns and variances are set to the sample variance.
    One variance-targeted start, ``n_restarts`` random starts and, if given,
    ``warm_start`` are optimised with L-BFGS-B; the best likelihood wins.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise InvalidInputError("x must be a 1-d vector")
    if noise not in NOISE_FAMILIES:
        raise InvalidInputError(f"noise must be one of {NOISE_FAMILIES}, got {noise!r}")
    if p < 1 or q < 1:
        raise InvalidInputError("p and q must be positive")
    if x.size < p + q + 2:
        raise InvalidInputError(f"need at least p+q+2 = {p + q + 2} observations, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("x contains non-finite values")
    var = float(np.var(x, ddof=1))
    if not var > 0:
        raise DegenerateInputError("sample has zero variance")
    scale = math.sqrt(var)
    y = x / scale
    backcast = float(np.var(y, ddof=1))
    tr = _Transform(p, q, noise)

    def objective(theta):
        omega, alphas, betas, nu = tr.decode(theta)
        s2 = _backcast_variances(omega, alphas, betas, y, backcast)[:-1]
        val = -np.mean(_loglik_terms(y, s2, noise, nu))
        return val if np.isfinite(val) else 1e10

    rng = np.random.default_rng(random_state)
    best = None
    starts = _start_points(tr, rng, n_restarts, warm_start, var)
    for theta0 in starts:
        res = optimize.minimize(objective, theta0, method="L-BFGS-B", bounds=tr.bounds(),
                                options={"maxiter": maxiter, "gtol": 1e-6, "ftol": 1e-10})
        if best is None or res.fun < best.fun:
            best = res

    omega, alphas, betas, nu = tr.decode(best.x)
    fitted = GarchSpec(omega * var, tuple(alphas), tuple(betas), noise, nu)
    s2 = _backcast_variances(fitted.omega, fitted.alphas, fitted.betas, x, var)
    sig = np.sqrt(s2)
    loglik = float(np.sum(_loglik_terms(x, s2[:-1], noise, nu)))
    return GarchFit(spec=fitted, sigma_path=sig[:-1], next_sigma=float(sig[-1]),
                    loglik=loglik, converged=bool(best.success),
                    n_starts=len(starts), extra={"nit": int(best.nit), "message": str(best.message)})


# -- VaR --------------------------------------------------------------------

def innovation_quantile(alpha: float, noise: str, nu: Optional[float] = None) -> float:
    """``alpha``-quantile of the unit-variance innovation distribution."""
    alpha = _check_prob(alpha)
    if noise == "normal":
        return std_normal_quantile(alpha)
    if noise == "student_t":
        if nu is None:
            raise InvalidInputError("student_t noise requires nu")
        if not nu > 2:
            raise InvalidInputError(f"nu must exceed 2, got {nu}")
        return math.sqrt((nu - 2.0) / nu) * student_t_quantile(alpha, nu)
    raise InvalidInputError(f"unknown noise family {noise!r}")


def var_true(sigma_next, alpha: float, noise: str = "normal", nu: Optional[float] = None):
    """True conditional VaR ``-sigma * F_eps^{-1}(alpha)``; vectorised in sigma."""
    sigma = np.asarray(sigma_next, dtype=np.float64)
    if np.any(~(sigma > 0)):
        raise InvalidInputError("sigma_next must be positive")
    out = -sigma * innovation_quantile(alpha, noise, nu)
    return float(out) if out.ndim == 0 else out


def var_garch_normal(x, alpha: float, p: int = 1, q: int = 1, **fit_kwargs) -> float:
    """Gaussian-QMLE GARCH VaR with the small-sample factor
    ``sqrt((n+1)/n) * t_{n-1}^{-1}(alpha)`` in place of the normal quantile."""
    alpha = _check_prob(alpha)
    fit = fit_qmle(x, p, q, "normal", **fit_kwargs)
    return _garch_normal_risk(fit.next_sigma, len(x), alpha)


def _garch_normal_risk(sigma, n, alpha):
    return float(-sigma * unbiased_factor(n, alpha))


def var_garch_t(x, alpha: float, p: int = 1, q: int = 1, **fit_kwargs) -> float:
    """t-QMLE GARCH VaR ``-sigma * sqrt((nu-2)/nu) * t_nu^{-1}(alpha)``."""
    alpha = _check_prob(alpha)
    fit = fit_qmle(x, p, q, "student_t", **fit_kwargs)
    return _garch_t_risk(fit.next_sigma, fit.spec.nu, alpha)


def _garch_t_risk(sigma, nu, alpha):
    return float(-sigma * innovation_quantile(alpha, "student_t", nu))


class GarchVaR(BaseVaREstimator):
    """Rolling GARCH VaR: each window is refitted by QMLE.

    Parameters
    ----------
    alpha : float, default=0.01
    p, q : int, default=1
        GARCH orders.
    noise : {"normal", "student_t"}, default="normal"
        ``"normal"`` gives the bias-corrected Gaussian estimator,
        ``"student_t"`` the t estimator with fitted degrees of freedom.
    n_restarts : int, default=3
        Random restarts per fit on top of the variance-targeted start.
    warm_start : bool, default=True
        Add the previous window's estimate as one more start.
    random_state : int, default=0

    Attributes
    ----------
    n_substitutions_ : int
        Windows whose fit raised or produced a non-finite value; their risk is
        carried forward from the previous window.
    n_nonconverged_ : int
        Windows where no optimiser run reported convergence (estimate kept).
    """

    _min_window = 4

    def __init__(self, alpha=0.01, p=1, q=1, noise="normal", n_restarts=3,
                 warm_start=True, random_state=0):
        self.alpha = alpha
        self.p = p
        self.q = q
        self.noise = noise
        self.n_restarts = n_restarts
        self.warm_start = warm_start
        self.random_state = random_state

    def _risk(self, fit: GarchFit, n: int) -> float:
        if self.noise == "normal":
            return _garch_normal_risk(fit.next_sigma, n, self.alpha)
        return _garch_t_risk(fit.next_sigma, fit.spec.nu, self.alpha)

    def _predict(self, X):
        risks = np.empty(X.shape[0])
        warm = None
        self.n_substitutions_ = 0
        self.n_nonconverged_ = 0
        self.failures_ = []
        for i, w in enumerate(X):
            try:
                fit = fit_qmle(w, self.p, self.q, self.noise, n_restarts=self.n_restarts,
                               random_state=self.random_state,
                               warm_start=warm if self.warm_start else None)
                risk = self._risk(fit, w.size)
                if not math.isfinite(risk):
                    raise FloatingPointError("non-finite GARCH risk")
                warm = fit.spec
                self.n_nonconverged_ += not fit.converged
            except (InvalidInputError, FloatingPointError, ValueError) as exc:
                self.failures_.append((i, repr(exc)))
                self.n_substitutions_ += 1
                # first window has no predecessor: fall back to the unbiased Gaussian value
                risk = risks[i - 1] if i > 0 else float(
                    -(w.mean() + w.std(ddof=1) * unbiased_factor(w.size, self.alpha)))
            risks[i] = risk
        return risks
