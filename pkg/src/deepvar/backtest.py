"""Rolling-window backtests and the resampled GARCH continuation experiment."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import InvalidInputError, ReturnSeries, SplitPlan, WindowPlan, _check_prob, make_windows
from .estimators import EmpiricalVaR, GaussianPluginVaR, GaussianUnbiasedVaR, unbiased_factor
from .garch import GarchSpec, GarchState, GarchVaR, conditional_sigmas, simulate, var_true
from .lstm import LSTMVaR, LstmParams, TrainConfig
from .scoring import exception_rate, mean_quantile_score

__all__ = [
    "ESTIMATOR_IDS",
    "BacktestReport",
    "ExperimentResult",
    "make_estimator",
    "run_backtest",
    "resample_experiment",
    "summarize",
]

logger = logging.getLogger(__name__)

ESTIMATOR_IDS = ("emp", "norm", "u", "garch_n", "garch_t", "lstm", "true_var")
ALIASES = {"garch-n": "garch_n", "garch-t": "garch_t", "true": "true_var", "unbiased": "u",
           "plugin": "norm"}


def canonical_id(estimator_id: str) -> str:
    eid = ALIASES.get(estimator_id, estimator_id)
    if eid not in ESTIMATOR_IDS and eid != "garch":
        raise InvalidInputError(
            f"unknown estimator {estimator_id!r}; valid ids: {', '.join(ESTIMATOR_IDS + ('garch',))}"
        )
    return eid


@dataclass
class BacktestReport:
    """Outcome of backtesting one estimator over ``m`` windows."""

    estimator: str
    alpha: float
    n: int
    m: int
    exceed_count: int
    exception_rate: float
    mean_score: float
    risk_series: np.ndarray
    secured_series: np.ndarray
    targets: np.ndarray
    substitutions: int = 0
    runtime: float = 0.0
    labels: Optional[list] = None

    @classmethod
    def from_series(cls, estimator, alpha, n, risks, targets, **kwargs) -> "BacktestReport":
        risks = np.asarray(risks, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        secured = targets + risks
        exceed = int(np.count_nonzero(secured < 0))
        return cls(
            estimator=estimator, alpha=float(alpha), n=int(n), m=int(risks.size),
            exceed_count=exceed, exception_rate=exceed / risks.size,
            mean_score=mean_quantile_score(risks, targets, alpha),
            risk_series=risks, secured_series=secured, targets=targets, **kwargs,
        )

    @property
    def er_percent(self) -> float:
        return 100.0 * self.exception_rate

    @property
    def score_x10000(self) -> float:
        return 1e4 * self.mean_score

    def recompute(self) -> tuple[float, float]:
        """Exception rate and mean score recomputed from the stored series."""
        return (exception_rate(self.risk_series, self.targets),
                mean_quantile_score(self.risk_series, self.targets, self.alpha))

    def to_dict(self, include_series: bool = True) -> dict:
        out = {
            "estimator": self.estimator,
            "alpha": self.alpha,
            "n": self.n,
            "m": self.m,
            "exceed_count": self.exceed_count,
            "exception_rate": self.exception_rate,
            "er_percent": self.er_percent,
            "mean_score": self.mean_score,
            "score_x10000": self.score_x10000,
            "score_x100": 100.0 * self.mean_score,
            "substitutions": self.substitutions,
            "runtime_seconds": self.runtime,
        }
        if include_series:
            out["risk_series"] = self.risk_series.tolist()
            out["secured_series"] = self.secured_series.tolist()
            out["targets"] = self.targets.tolist()
            out["labels"] = self.labels
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "BacktestReport":
        return cls(
            estimator=d["estimator"], alpha=float(d["alpha"]), n=int(d["n"]), m=int(d["m"]),
            exceed_count=int(d["exceed_count"]), exception_rate=float(d["exception_rate"]),
            mean_score=float(d["mean_score"]),
            risk_series=np.asarray(d["risk_series"], dtype=np.float64),
            secured_series=np.asarray(d["secured_series"], dtype=np.float64),
            targets=np.asarray(d["targets"], dtype=np.float64),
            substitutions=int(d.get("substitutions", 0)),
            runtime=float(d.get("runtime_seconds", 0.0)),
            labels=d.get("labels"),
        )


def make_estimator(estimator_id: str, alpha: float, *, p: int = 1, q: int = 1,
                   lstm=None, random_state=0, **options):
    """Build the estimator object behind an id.

    ``lstm`` may be a fitted ``LSTMVaR`` or trained ``LstmParams``; it is
    required for ``"lstm"``.  ``"true_var"`` has no estimator object (see
    ``run_backtest``).
    """
    eid = canonical_id(estimator_id)
    if eid == "emp":
        return EmpiricalVaR(alpha)
    if eid == "norm":
        return GaussianPluginVaR(alpha)
    if eid == "u":
        return GaussianUnbiasedVaR(alpha)
    if eid in ("garch_n", "garch_t"):
        noise = "normal" if eid == "garch_n" else "student_t"
        return GarchVaR(alpha, p=p, q=q, noise=noise, random_state=random_state, **options)
    if eid == "lstm":
        if lstm is None:
            raise InvalidInputError("the lstm estimator needs trained parameters")
        if isinstance(lstm, LstmParams):
            return LSTMVaR.from_params(lstm, alpha=alpha)
        return lstm
    raise InvalidInputError(f"{estimator_id!r} has no standalone estimator object")


def _predict_with_carry_forward(est, windows: np.ndarray):
    """Predict all windows; on failure go window by window and carry the
    previous estimate forward."""
    try:
        risks = np.asarray(est.predict(windows), dtype=np.float64)
        if np.all(np.isfinite(risks)):
            return risks, int(getattr(est, "n_substitutions_", 0))
    except (ValueError, ArithmeticError, RuntimeError) as exc:
        logger.warning("batch prediction failed (%s); retrying window by window", exc)
    risks = np.empty(windows.shape[0])
    subs = 0
    for i, w in enumerate(windows):
        try:
            r = float(np.asarray(est.predict(w[None, :]))[0])
            if not math.isfinite(r):
                raise FloatingPointError("non-finite risk")
        except (ValueError, ArithmeticError, RuntimeError):
            subs += 1
            r = risks[i - 1] if i > 0 else -(w.mean() + w.std(ddof=1) * unbiased_factor(w.size, est.alpha))
        risks[i] = r
    return risks, subs


def run_backtest(series, plan: WindowPlan, estimator, alpha: float, *,
                 true_sigma=None, true_spec: Optional[GarchSpec] = None,
                 name: Optional[str] = None, **estimator_options) -> BacktestReport:
    """Backtest one estimator on ``plan``'s rolling windows.

    Parameters
    ----------
    series : ReturnSeries or array-like
    plan : WindowPlan
    estimator : str or estimator object
        An id from ``ESTIMATOR_IDS`` (extra keyword arguments are passed to
        ``make_estimator``) or an object with ``fit``/``predict`` over 2-d
        window arrays.  Stateless estimators are fitted on the windows
        themselves; a fitted ``LSTMVaR`` is used as is.
    true_sigma : array-like, optional
        True volatility aligned with ``series``; required for ``"true_var"``.
    true_spec : GarchSpec, optional
        Supplies the innovation family for ``"true_var"``.
    """
    alpha = _check_prob(alpha)
    values = series.values if isinstance(series, ReturnSeries) else ReturnSeries(series).values
    labels = series.labels if isinstance(series, ReturnSeries) else None
    windows, targets = make_windows(values, plan)
    target_labels = None if labels is None else [labels[i] for i in plan.target_indices()]
    start = time.perf_counter()
    if isinstance(estimator, str):
        eid = canonical_id(estimator)
        label = name or eid
        if eid == "true_var":
            if true_sigma is None or true_spec is None:
                raise InvalidInputError("true_var needs the true sigma path and the model spec")
            sig = np.asarray(true_sigma, dtype=np.float64)
            if sig.size != values.size:
                raise InvalidInputError("true_sigma must align with the series")
            risks = var_true(sig[plan.target_indices()], alpha, true_spec.noise, true_spec.nu)
            risks = np.atleast_1d(risks)
            return BacktestReport.from_series(label, alpha, plan.n, risks, targets,
                                              runtime=time.perf_counter() - start, labels=target_labels)
        est = make_estimator(eid, alpha, **estimator_options)
    else:
        est = estimator
        label = name or type(est).__name__
    if isinstance(est, LSTMVaR):
        if not hasattr(est, "params_"):
            raise InvalidInputError("an LSTMVaR must be trained before it is backtested")
    else:
        est.fit(windows, targets)
    risks, subs = _predict_with_carry_forward(est, windows)
    return BacktestReport.from_series(label, alpha, plan.n, risks, targets, substitutions=subs,
                                      runtime=time.perf_counter() - start, labels=target_labels)


# -- resampled experiment ---------------------------------------------------

@dataclass
class ExperimentResult:
    reports: dict
    summary: dict
    alpha: float
    n: int
    repetitions: int
    test_length: int
    spec: GarchSpec
    lstm_history: Optional[dict] = None

    def to_dict(self, include_series: bool = False) -> dict:
        return {
            "alpha": self.alpha,
            "n": self.n,
            "repetitions": self.repetitions,
            "test_length": self.test_length,
            "spec": self.spec.to_dict(),
            "summary": self.summary,
            "reports": {k: [r.to_dict(include_series) for r in v] for k, v in self.reports.items()},
        }


def _sd(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(values.std(ddof=1)) if values.size > 1 else 0.0


def summarize(reports: dict, alpha: float, lstm_key: str = "lstm",
              benchmark_key: str = "true_var") -> dict:
    """Per-estimator mean/sd of ER and mean score plus the LSTM best counts.

    ``B_ER`` is the percentage of repetitions where the LSTM's ``|ER - alpha|``
    is strictly the smallest among the non-benchmark estimators; ``B_S`` the
    percentage where its mean score is strictly the smallest.  Ties count as
    not best.
    """
    out = {"estimators": {}}
    for key, reps in reports.items():
        er = [r.exception_rate for r in reps]
        sc = [r.mean_score for r in reps]
        out["estimators"][key] = {
            "er_mean": float(np.mean(er)), "er_sd": _sd(er),
            "er_percent_mean": 100 * float(np.mean(er)), "er_percent_sd": 100 * _sd(er),
            "score_mean": float(np.mean(sc)), "score_sd": _sd(sc),
            "score_x10000_mean": 1e4 * float(np.mean(sc)), "score_x10000_sd": 1e4 * _sd(sc),
            "substitutions": int(sum(r.substitutions for r in reps)),
        }
    rivals = [k for k in reports if k not in (lstm_key, benchmark_key)]
    if lstm_key in reports and rivals:
        reps = len(reports[lstm_key])
        best_er = best_s = 0
        for i in range(reps):
            mine = reports[lstm_key][i]
            gap = abs(mine.exception_rate - alpha)
            if all(gap < abs(reports[k][i].exception_rate - alpha) for k in rivals):
                best_er += 1
            if all(mine.mean_score < reports[k][i].mean_score for k in rivals):
                best_s += 1
        out["B_ER"] = 100.0 * best_er / reps
        out["B_S"] = 100.0 * best_s / reps
    else:
        out["B_ER"] = None
        out["B_S"] = None
    return out


def _resolve_garch(eid: str, spec: GarchSpec) -> str:
    if eid == "garch":
        return "garch_n" if spec.noise == "normal" else "garch_t"
    return eid


def resample_experiment(spec: GarchSpec, history, n: int, alpha: float, repetitions: int,
                        test_length: int, estimators: Sequence[str] = ("true_var", "emp", "u", "garch", "lstm"),
                        *, history_sigma=None, seed=0, lstm=None,
                        train_config: Optional[TrainConfig] = None,
                        split: SplitPlan = SplitPlan(), garch_options: Optional[dict] = None,
                        progress=None) -> ExperimentResult:
    """Backtest estimators on independent GARCH continuations of ``history``.

    The true recursion is run over ``history`` (train + validation data) to get
    the conditional-variance state at its end; ``repetitions`` continuations of
    ``test_length`` steps are simulated from that state and every estimator is
    backtested on each (``m = test_length - n`` windows).  ``"garch"`` picks the
    GARCH estimator matching the true noise family and order.  When ``"lstm"``
    is requested and no trained model is given, it is trained once on
    ``history`` with the train/validation proportions of ``split``.
    """
    alpha = _check_prob(alpha)
    hx = history.values if isinstance(history, ReturnSeries) else np.asarray(history, dtype=np.float64)
    if repetitions < 1 or test_length <= n:
        raise InvalidInputError("need repetitions >= 1 and test_length > n")
    sigma_init = (float(np.asarray(history_sigma)[0]) if history_sigma is not None
                  else math.sqrt(spec.unconditional_variance))
    path = conditional_sigmas(spec, hx, sigma_init)[:-1]
    state = GarchState.from_path(spec, hx, path)

    ids = [_resolve_garch(canonical_id(e), spec) for e in estimators]
    lstm_history = None
    if "lstm" in ids and lstm is None:
        frac = split.train_fraction / (split.train_fraction + split.validation_fraction)
        cut = int(round(hx.size * frac))
        Wtr, ytr = make_windows(hx, WindowPlan.covering(0, cut, n))
        Wv, yv = make_windows(hx, WindowPlan.covering(cut, hx.size, n))
        cfg = train_config or TrainConfig()
        lstm = LSTMVaR(alpha, epochs_max=cfg.epochs_max, batch_size=cfg.batch_size,
                       learning_rate_init=cfg.learning_rate_init,
                       lr_reduce_factor=cfg.lr_reduce_factor, lr_patience=cfg.lr_patience,
                       lr_min=cfg.lr_min, early_stop_patience=cfg.early_stop_patience,
                       calibration_runs=cfg.calibration_runs, random_state=cfg.seed)
        lstm.fit(Wtr, ytr, Wv, yv)
        lstm_history = lstm.history_

    plan = WindowPlan(n=n, m=test_length - n, offset=0)
    reports = {eid: [] for eid in ids}
    opts = dict(garch_options or {})
    for rep, child in enumerate(np.random.SeedSequence(seed).spawn(repetitions)):
        x, sig = simulate(spec, test_length, burn_in=0, seed=child, state=state)
        for eid in ids:
            kwargs = {}
            if eid in ("garch_n", "garch_t"):
                kwargs = {"p": spec.p, "q": spec.q, **opts}
            elif eid == "lstm":
                kwargs = {"lstm": lstm}
            reports[eid].append(run_backtest(x, plan, eid, alpha, true_sigma=sig,
                                             true_spec=spec, **kwargs))
        if progress is not None:
            progress(rep + 1, repetitions)
    return ExperimentResult(reports=reports, summary=summarize(reports, alpha), alpha=alpha,
                            n=n, repetitions=repetitions, test_length=test_length, spec=spec,
                            lstm_history=lstm_history)
