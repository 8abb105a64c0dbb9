"""Command-line interface: ``deepvar {simulate,backtest,experiment,train,plotdata}``.

Every subcommand also reads ``--config FILE`` with ``key = value`` lines
(keys are long option names without the leading dashes; ``#`` starts a
comment).  Flags given on the command line override the file.

Exit codes: 0 success, 1 domain/data error, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .backtest import ESTIMATOR_IDS, BacktestReport, canonical_id, resample_experiment, run_backtest
from .core import InvalidInputError, ReturnSeries, SplitPlan, WindowPlan, make_windows
from .garch import PRESETS, GarchSpec, simulate
from .lstm import LSTMVaR, ModelFormatError, TrainConfig, load_params, save_params

logger = logging.getLogger("deepvar")

PRESET_LABELS = {
    name: f"GARCH({name[5]},{name[6]})-{name[7]}" for name in PRESETS
}
DEFAULT_ESTIMATORS = "emp,u,garch,lstm"
EXPERIMENT_ESTIMATORS = "true_var,emp,u,garch,lstm"


class UsageError(Exception):
    """Bad command-line input detected after argument parsing (exit code 2)."""


class DataError(Exception):
    """I/O or parse failure on user-supplied files (exit code 1)."""


# -- data ingestion ---------------------------------------------------------

def ingest_csv(path, column: str, percent_flag: bool = True) -> ReturnSeries:
    """Read one return column from a comma-separated file with a header row.

    The first column is kept as date labels.  With ``percent_flag`` the values
    are divided by 100.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if column not in header:
            raise DataError(f"{path}: column {column!r} not found; available columns: {', '.join(header)}")
        col = header.index(column)
        labels, values = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) <= col:
                raise DataError(f"{path}: row {row_no} has no value in column {column!r}")
            cell = row[col].strip()
            try:
                value = float(cell)
            except ValueError:
                raise DataError(f"{path}: row {row_no}: non-numeric value {cell!r} in column {column!r}") from None
            if not math.isfinite(value):
                raise DataError(f"{path}: row {row_no}: non-finite value {cell!r}")
            labels.append(row[0].strip())
            values.append(value)
    if not values:
        raise DataError(f"{path}: no data rows")
    arr = np.asarray(values, dtype=np.float64)
    if percent_flag:
        arr = arr / 100.0
    return ReturnSeries(arr, labels)


def _fmt(v: float) -> str:
    return repr(float(v))


def write_series_csv(path, x, sigma) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("index,x,sigma\n")
        for i, (a, b) in enumerate(zip(x, sigma)):
            fh.write(f"{i},{_fmt(a)},{_fmt(b)}\n")


def _dump_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=False)
        fh.write("\n")


# -- argument helpers -------------------------------------------------------

def _positive_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return v


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative, got {v}")
    return v


def _probability(text):
    v = float(text)
    if not 0 < v < 1:
        raise argparse.ArgumentTypeError(f"must lie in (0, 1), got {v}")
    return v


def _float_list(text):
    try:
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _estimator_list(text):
    ids = [t.strip() for t in text.split(",") if t.strip()]
    if not ids:
        raise argparse.ArgumentTypeError("at least one estimator id is required")
    try:
        return [canonical_id(i) for i in ids]
    except InvalidInputError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _split(text):
    fracs = _float_list(text)
    if len(fracs) != 3:
        raise argparse.ArgumentTypeError("split needs three fractions, e.g. 0.8,0.1,0.1")
    try:
        return SplitPlan(*fracs)
    except InvalidInputError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _add_spec_args(p):
    g = p.add_argument_group("simulation model")
    g.add_argument("--preset", choices=sorted(PRESETS), help="named GARCH specification")
    g.add_argument("--omega", type=float)
    g.add_argument("--alphas", type=_float_list, help="ARCH coefficients, comma-separated")
    g.add_argument("--betas", type=_float_list, help="GARCH coefficients, comma-separated")
    g.add_argument("--noise", choices=("normal", "student_t"))
    g.add_argument("--nu", type=float)
    g.add_argument("--length", type=_positive_int, default=7500)
    g.add_argument("--burn-in", type=_nonneg_int, default=1000)
    g.add_argument("--seed", type=int, default=0)


def _add_data_args(p):
    _add_spec_args(p)
    g = p.add_argument_group("CSV input")
    g.add_argument("--csv", type=Path, help="read returns from this file instead of simulating")
    g.add_argument("--column", help="CSV column holding the returns")
    g.add_argument("--percent", action=argparse.BooleanOptionalAction, default=True,
                   help="CSV values are in percent (default: yes)")


def _add_window_args(p, estimators_default):
    p.add_argument("--alpha", type=_probability, default=0.05)
    p.add_argument("--n", type=_positive_int, default=50, help="estimation window length")
    p.add_argument("--split", type=_split, default=SplitPlan(), help="train,validation,test fractions")
    p.add_argument("--estimators", type=_estimator_list, default=_estimator_list(estimators_default))
    p.add_argument("--p", type=_positive_int, default=None, help="ARCH order of the GARCH estimators")
    p.add_argument("--q", type=_positive_int, default=None, help="GARCH order of the GARCH estimators")
    p.add_argument("--garch-restarts", type=_nonneg_int, default=3)


def _add_train_args(p):
    g = p.add_argument_group("LSTM training")
    d = TrainConfig()
    g.add_argument("--epochs", type=_positive_int, default=d.epochs_max)
    g.add_argument("--batch-size", type=_positive_int, default=d.batch_size)
    g.add_argument("--learning-rate", type=float, default=d.learning_rate_init)
    g.add_argument("--lr-patience", type=_positive_int, default=d.lr_patience)
    g.add_argument("--early-stop-patience", type=_positive_int, default=d.early_stop_patience)
    g.add_argument("--calibration-runs", type=_positive_int, default=d.calibration_runs)
    g.add_argument("--train-seed", type=int, default=d.seed)


def _train_config(args) -> TrainConfig:
    return TrainConfig(epochs_max=args.epochs, batch_size=args.batch_size,
                       learning_rate_init=args.learning_rate, lr_patience=args.lr_patience,
                       early_stop_patience=args.early_stop_patience,
                       calibration_runs=args.calibration_runs, seed=args.train_seed)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deepvar", description="VaR estimation and backtesting")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a GARCH path to CSV (index,x,sigma)")
    p.add_argument("--config", type=Path)
    _add_spec_args(p)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("backtest", help="rolling-window backtest of several estimators")
    p.add_argument("--config", type=Path)
    _add_data_args(p)
    _add_window_args(p, DEFAULT_ESTIMATORS)
    _add_train_args(p)
    p.add_argument("--segment", choices=("test", "all"), default="test",
                   help="backtest on the test split only, or on the whole series")
    p.add_argument("--model", type=Path, help="persisted LSTM model (skips training)")
    p.add_argument("--out", type=Path, required=True, help="JSON report")
    p.add_argument("--series-out", type=Path, help="per-window CSV")

    p = sub.add_parser("experiment", help="resampled GARCH continuation experiment with a mean (sd) summary table")
    p.add_argument("--config", type=Path)
    _add_spec_args(p)
    _add_window_args(p, EXPERIMENT_ESTIMATORS)
    _add_train_args(p)
    p.add_argument("--repetitions", type=_positive_int, default=10)
    p.add_argument("--test-length", type=_positive_int, default=None,
                   help="continuation length (default: test share of --length)")
    p.add_argument("--model", type=Path, help="persisted LSTM model (skips training)")
    p.add_argument("--out", type=Path, required=True, help="JSON summary")
    p.add_argument("--table-out", type=Path, help="aligned text table")

    p = sub.add_parser("train", help="train the LSTM estimator and persist it")
    p.add_argument("--config", type=Path)
    _add_data_args(p)
    p.add_argument("--alpha", type=_probability, default=0.05)
    p.add_argument("--n", type=_positive_int, default=50)
    p.add_argument("--split", type=_split, default=SplitPlan())
    _add_train_args(p)
    p.add_argument("--model-out", type=Path, required=True)

    p = sub.add_parser("plotdata", help="long-format CSV of targets and -risk per estimator")
    p.add_argument("--config", type=Path)
    p.add_argument("--report", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def _config_tokens(path: Path) -> list:
    if not path.is_file():
        raise UsageError(f"config file {path} does not exist")
    tokens = []
    for line_no, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{line_no}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        if value.lower() in ("true", "yes", "on"):
            tokens.append(flag)
        elif value.lower() in ("false", "no", "off"):
            tokens.append("--no-" + key.replace("_", "-"))
        else:
            tokens += [flag, value]
    return tokens


def _expand_config(argv: list) -> list:
    """Insert config-file options right after the subcommand so that explicit
    flags (which come later) win."""
    if "--config" not in argv:
        return argv
    i = argv.index("--config")
    if i + 1 >= len(argv):
        return argv
    path = Path(argv[i + 1])
    rest = argv[:i] + argv[i + 2:]
    cmd_pos = next((k for k, a in enumerate(rest) if not a.startswith("-")), None)
    if cmd_pos is None:
        return argv
    return rest[:cmd_pos + 1] + _config_tokens(path) + rest[cmd_pos + 1:]


# -- data source ------------------------------------------------------------

def _spec_from_args(args) -> GarchSpec:
    if args.preset:
        return PRESETS[args.preset]
    if args.omega is None or not args.alphas or not args.betas:
        raise UsageError("give --preset or all of --omega, --alphas and --betas")
    noise = args.noise or "normal"
    return GarchSpec(args.omega, args.alphas, args.betas, noise,
                     args.nu if noise == "student_t" else None)


def _load_data(args):
    """Return ``(series, sigma or None, spec or None, source description)``."""
    if getattr(args, "csv", None) is not None:
        if not args.column:
            raise UsageError("--csv needs --column")
        series = ingest_csv(args.csv, args.column, args.percent)
        return series, None, None, {"csv": str(args.csv), "column": args.column,
                                    "percent_flag": bool(args.percent)}
    spec = _spec_from_args(args)
    x, sig = simulate(spec, args.length, args.burn_in, args.seed)
    src = {"simulation": spec.to_dict(), "preset": args.preset, "length": args.length,
           "burn_in": args.burn_in, "seed": args.seed, "percent_flag": False}
    return ReturnSeries(x), sig, spec, src


def _garch_orders(args, spec: Optional[GarchSpec]):
    p = args.p or (spec.p if spec else 1)
    q = args.q or (spec.q if spec else 1)
    return p, q


def _resolve_ids(ids, spec):
    out = []
    for eid in ids:
        if eid == "garch":
            eid = "garch_t" if spec is not None and spec.noise == "student_t" else "garch_n"
        if eid not in out:
            out.append(eid)
    return out


def _train_lstm(series: ReturnSeries, n, alpha, split: SplitPlan, cfg: TrainConfig) -> LSTMVaR:
    segs = split.segments(len(series))
    Wtr, ytr = make_windows(series, WindowPlan.covering(*segs["train"], n))
    Wv, yv = make_windows(series, WindowPlan.covering(*segs["validation"], n))
    est = LSTMVaR(alpha, epochs_max=cfg.epochs_max, batch_size=cfg.batch_size,
                  learning_rate_init=cfg.learning_rate_init, lr_patience=cfg.lr_patience,
                  early_stop_patience=cfg.early_stop_patience,
                  calibration_runs=cfg.calibration_runs, random_state=cfg.seed)
    return est.fit(Wtr, ytr, Wv, yv)


def _load_lstm(path: Path, alpha: float, n: int) -> LSTMVaR:
    params = load_params(path)
    meta = params.meta
    if "alpha" in meta and not math.isclose(meta["alpha"], alpha):
        raise InvalidInputError(f"model {path} was trained for alpha={meta['alpha']}, not {alpha}")
    if "n" in meta and int(meta["n"]) != n:
        raise InvalidInputError(f"model {path} was trained for n={meta['n']}, not {n}")
    return LSTMVaR.from_params(params, alpha=alpha)


# -- commands ---------------------------------------------------------------

def cmd_simulate(args) -> int:
    spec = _spec_from_args(args)
    x, sig = simulate(spec, args.length, args.burn_in, args.seed)
    write_series_csv(args.out, x, sig)
    logger.info("wrote %d rows to %s", x.size, args.out)
    return 0


def cmd_backtest(args) -> int:
    series, sigma, spec, source = _load_data(args)
    ids = _resolve_ids(args.estimators, spec)
    length = len(series)
    if args.segment == "test":
        start, stop = args.split.segments(length)["test"]
    else:
        start, stop = 0, length
    if stop - start <= args.n:
        raise InvalidInputError(f"segment of {stop - start} observations is too short for n={args.n}")
    plan = WindowPlan.covering(start, stop, args.n)
    p, q = _garch_orders(args, spec)
    lstm = None
    if "lstm" in ids:
        t0 = time.perf_counter()
        if args.model:
            lstm = _load_lstm(args.model, args.alpha, args.n)
        else:
            lstm = _train_lstm(series, args.n, args.alpha, args.split, _train_config(args))
        logger.info("LSTM ready after %.1fs", time.perf_counter() - t0)
    reports = []
    for eid in ids:
        kwargs = {}
        if eid in ("garch_n", "garch_t"):
            kwargs = {"p": p, "q": q, "n_restarts": args.garch_restarts}
        elif eid == "lstm":
            kwargs = {"lstm": lstm}
        elif eid == "true_var" and sigma is None:
            raise InvalidInputError("true_var is only available for simulated data")
        rep = run_backtest(series, plan, eid, args.alpha, true_sigma=sigma, true_spec=spec, **kwargs)
        logger.info("%s: ER %.2f%%  S x1e4 %.3f", eid, rep.er_percent, rep.score_x10000)
        reports.append(rep)
    doc = {
        "command": "backtest",
        "version": __version__,
        "alpha": args.alpha,
        "n": args.n,
        "m": plan.m,
        "segment": args.segment,
        "window_offset": plan.offset,
        "source": source,
        "percent_flag": source["percent_flag"],
        "estimators": [r.to_dict() for r in reports],
    }
    _dump_json(doc, args.out)
    if args.series_out:
        with open(args.series_out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["index", "label", "target"] + [f"risk_{r.estimator}" for r in reports])
            first = reports[0]
            for i in range(plan.m):
                label = first.labels[i] if first.labels else ""
                w.writerow([plan.offset + plan.n + i, label, _fmt(first.targets[i])]
                           + [_fmt(r.risk_series[i]) for r in reports])
    print(format_backtest_table(reports))
    return 0


def format_backtest_table(reports) -> str:
    lines = [f"{'estimator':<10} {'exceeds':>8} {'ER (%)':>8} {'S (x10000)':>11} {'subst':>6} {'time (s)':>9}"]
    for r in reports:
        lines.append(f"{r.estimator:<10} {r.exceed_count:>8d} {r.er_percent:>8.2f} "
                     f"{r.score_x10000:>11.3f} {r.substitutions:>6d} {r.runtime:>9.2f}")
    return "\n".join(lines)


def format_experiment_table(summary: dict, title: str) -> str:
    lines = [title, f"{'estimator':<10} {'ER (%)':>16} {'S (x10000)':>16}"]
    for key, s in summary["estimators"].items():
        er = f"{s['er_percent_mean']:.2f} ({s['er_percent_sd']:.2f})"
        sc = f"{s['score_x10000_mean']:.2f} ({s['score_x10000_sd']:.2f})"
        lines.append(f"{key:<10} {er:>16} {sc:>16}")
    if summary.get("B_ER") is not None:
        lines.append(f"B_ER = {summary['B_ER']:.0f}%   B_S = {summary['B_S']:.0f}%")
    return "\n".join(lines)


def cmd_experiment(args) -> int:
    spec = _spec_from_args(args)
    ids = _resolve_ids(args.estimators, spec)
    x, sig = simulate(spec, args.length, args.burn_in, args.seed)
    train_end, val_end = args.split.boundaries(x.size)
    test_length = args.test_length or (x.size - val_end)
    if test_length <= args.n:
        raise InvalidInputError(f"test length {test_length} must exceed n={args.n}")
    lstm = _load_lstm(args.model, args.alpha, args.n) if ("lstm" in ids and args.model) else None
    p, q = _garch_orders(args, spec)
    if (p, q) != (spec.p, spec.q):
        logger.warning("experiment uses the true orders p=%d, q=%d for the GARCH estimator", spec.p, spec.q)

    def progress(done, total):
        logger.info("repetition %d/%d", done, total)

    result = resample_experiment(
        spec, x[:val_end], args.n, args.alpha, args.repetitions, test_length, ids,
        history_sigma=sig[:val_end], seed=args.seed, lstm=lstm, train_config=_train_config(args),
        split=args.split, garch_options={"n_restarts": args.garch_restarts}, progress=progress,
    )
    label = PRESET_LABELS.get(args.preset, "custom GARCH")
    title = (f"{label}  alpha={100 * args.alpha:g}%  n={args.n}  repetitions={args.repetitions}  "
             f"m={test_length - args.n}")
    table = format_experiment_table(result.summary, title)
    doc = {"command": "experiment", "version": __version__, "preset": args.preset,
           "seed": args.seed, "length": args.length, **result.to_dict()}
    _dump_json(doc, args.out)
    if args.table_out:
        Path(args.table_out).write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def cmd_train(args) -> int:
    series, _, _, source = _load_data(args)
    cfg = _train_config(args)
    est = _train_lstm(series, args.n, args.alpha, args.split, cfg)
    est.params_.meta["source"] = source
    save_params(est.params_, args.model_out)
    meta = est.params_.meta
    print(f"saved {args.model_out}: alpha={meta['alpha']} n={meta['n']} "
          f"train score x1e4={1e4 * meta['train_score']:.3f} val score x1e4={1e4 * meta['val_score']:.3f}")
    return 0


def cmd_plotdata(args) -> int:
    try:
        doc = json.loads(Path(args.report).read_text(encoding="utf-8"))
        reports = [BacktestReport.from_dict(d) for d in doc["estimators"]]
        offset = int(doc.get("window_offset", 0)) + int(doc["n"])
    except FileNotFoundError:
        raise DataError(f"{args.report}: no such file") from None
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise DataError(f"{args.report}: not a backtest report ({exc})") from None
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "estimator", "target", "neg_risk"])
        for r in reports:
            for i in range(r.m):
                label = r.labels[i] if r.labels else ""
                w.writerow([offset + i, label, r.estimator, _fmt(r.targets[i]), _fmt(-r.risk_series[i])])
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "backtest": cmd_backtest,
    "experiment": cmd_experiment,
    "train": cmd_train,
    "plotdata": cmd_plotdata,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _expand_config(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"deepvar: error: {exc}", file=sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"deepvar: error: {exc}", file=sys.stderr)
        return 2
    except (InvalidInputError, ModelFormatError, DataError, OSError, ValueError, RuntimeError) as exc:
        print(f"deepvar: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
