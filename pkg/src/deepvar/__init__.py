"""Value-at-risk estimation and backtesting: classical, GARCH and LSTM estimators."""

__version__ = "0.1.0"

from .backtest import BacktestReport, make_estimator, resample_experiment, run_backtest
from .core import ReturnSeries, SplitPlan, WindowPlan, make_windows
from .estimators import EmpiricalVaR, GaussianPluginVaR, GaussianUnbiasedVaR
from .garch import PRESETS, GarchSpec, GarchVaR, fit_qmle, simulate
from .lstm import LSTMVaR, TrainConfig

__all__ = [
    "BacktestReport",
    "EmpiricalVaR",
    "GarchSpec",
    "GarchVaR",
    "GaussianPluginVaR",
    "GaussianUnbiasedVaR",
    "LSTMVaR",
    "PRESETS",
    "ReturnSeries",
    "SplitPlan",
    "TrainConfig",
    "WindowPlan",
    "fit_qmle",
    "make_estimator",
    "make_windows",
    "resample_experiment",
    "run_backtest",
    "simulate",
]
