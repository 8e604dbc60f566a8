"""Walk-forward retraining experiment: never / yearly / monthly refits on a constant-size window."""

from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import ensemble, hedonic
from . import rnn_model as rm
from .plate_data import DatasetSplit, Samples
from .trainer import evaluate, train

logger = logging.getLogger(__name__)

SCHEDULES = ("never", "yearly", "monthly")
MODEL_KINDS = ("rnn", "combined_extra", "hedonic")
TRACE_COLUMNS = ("repeat", "month_index", "model_version", "rmse", "r2", "n_samples")


@dataclass(frozen=True)
class RetrainPlan:
    schedule: str = "never"
    initial_years: int = 8
    horizon_years: int = 5
    window_size: int | None = None
    valid_fraction: float = 0.2

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}")
        if self.window_size is not None and self.window_size < 10:
            raise ValueError("window_size must be at least 10")

    @property
    def period(self) -> int | None:
        return {"never": None, "yearly": 12, "monthly": 1}[self.schedule]


@dataclass
class VersionInfo:
    version: int
    start_month: int
    n_train: int
    train_max_date: dt.date


@dataclass
class MonthlyTrace:
    repeat: int
    rmse: np.ndarray
    r2: np.ndarray
    n_samples: np.ndarray
    version: np.ndarray
    versions: list = field(default_factory=list)
    month_start: list = field(default_factory=list)


def add_months(d: dt.date, k: int) -> dt.date:
    m = d.month - 1 + k
    return dt.date(d.year + m // 12, m % 12 + 1, 1)


def _month_id(d: dt.date) -> int:
    return d.year * 12 + d.month - 1


def _repeat_seed(base_seed: int, repeat: int, version: int) -> int:
    return int(np.random.SeedSequence([base_seed, repeat, version]).generate_state(1)[0])


class _Fitted:
    """A trained predictor of one kind, applied to Samples."""

    def __init__(self, kind, window: Samples, seed, plan, model_config, train_kwargs):
        self.kind = kind
        rng = np.random.default_rng(seed)
        perm = rng.permutation(len(window))
        n_valid = max(2, int(round(plan.valid_fraction * len(window))))
        tr, va = window.subset(np.sort(perm[n_valid:])), window.subset(np.sort(perm[:n_valid]))
        self.net = self.hed = self.ens = None
        if kind in ("rnn", "combined_extra"):
            empty = Samples((), np.zeros((0, tr.tokens.shape[1]), np.int64), np.zeros(0))
            _, self.net = train(model_config, DatasetSplit(tr, va, empty, seed), seed, **train_kwargs)
        if kind in ("hedonic", "combined_extra"):
            with np.errstate(all="ignore"):
                import warnings
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore", RuntimeWarning)
                    self.hed = hedonic.fit_hedonic(tr.plates, tr.targets, "woo2008")
        if kind == "combined_extra":
            self.ens = ensemble.fit_ensemble(
                "combined_extra", rm.predict(self.net, tr.tokens), hedonic.predict_many(self.hed, tr.plates),
                ensemble.extras_matrix(tr.records), tr.targets, drop_constant_extras=True)

    def predict(self, s: Samples) -> np.ndarray:
        if self.kind == "rnn":
            return rm.predict(self.net, s.tokens)
        if self.kind == "hedonic":
            return hedonic.predict_many(self.hed, s.plates)
        return ensemble.predict_ensemble(self.ens, rm.predict(self.net, s.tokens),
                                         hedonic.predict_many(self.hed, s.plates),
                                         ensemble.extras_matrix(s.records))


def simulate_repeat(plan: RetrainPlan, data: Samples, kind: str, repeat: int = 0, base_seed: int = 0,
                    model_config: rm.ModelConfig | None = None, **train_kwargs) -> MonthlyTrace:
    """One walk over the horizon. ``data`` must be sorted by auction date."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"model kind must be one of {MODEL_KINDS}")
    dates = [r.auction_date for r in data.records]
    if any(b < a for a, b in zip(dates, dates[1:])):
        raise ValueError("data must be sorted by auction date")
    months = np.array([_month_id(d) for d in dates])
    first = dt.date(dates[0].year, dates[0].month, 1)
    horizon_start = add_months(first, 12 * plan.initial_years)
    n_months = 12 * plan.horizon_years
    h0 = _month_id(horizon_start)
    if months[-1] < h0 + n_months - 1:
        raise ValueError("data does not cover the initial window plus the evaluation horizon")
    # index of the first record at or after each horizon month boundary
    bounds = np.searchsorted(months, h0 + np.arange(n_months + 1))
    window = plan.window_size or int(bounds[0])
    if bounds[0] < window:
        raise ValueError(f"only {bounds[0]} records before the horizon; window needs {window}")

    trace = MonthlyTrace(repeat, np.full(n_months, np.nan), np.full(n_months, np.nan),
                         np.zeros(n_months, np.int64), np.zeros(n_months, np.int64))
    model, version = None, -1
    for m in range(n_months):
        trace.month_start.append(add_months(horizon_start, m))
        if model is None or (plan.period is not None and m % plan.period == 0):
            version += 1
            end = int(bounds[m])
            win = data.subset(np.arange(end - window, end))
            model = _Fitted(kind, win, _repeat_seed(base_seed, repeat, version), plan,
                            model_config, train_kwargs)
            trace.versions.append(VersionInfo(version, m, window, win.records[-1].auction_date))
            logger.debug("repeat %d month %d: trained version %d on %d rows", repeat, m, version, window)
        trace.version[m] = version
        lo, hi = int(bounds[m]), int(bounds[m + 1])
        trace.n_samples[m] = hi - lo
        if hi - lo == 0:
            continue
        part = data.subset(np.arange(lo, hi))
        pred = model.predict(part)
        trace.rmse[m] = math.sqrt(float(np.mean((pred - part.targets) ** 2)))
        if hi - lo >= 2 and np.ptp(part.targets) > 0:
            trace.r2[m] = evaluate(pred, part.targets).r2
    return trace


@dataclass
class SimulationResult:
    plan: RetrainPlan
    kind: str
    traces: list
    median_rmse: np.ndarray
    median_r2: np.ndarray

    @property
    def horizon_rmse(self) -> float:
        """Median over evaluation months of the across-repeat median RMSE (empty months skipped)."""
        return float(np.nanmedian(self.median_rmse))


def simulate(plan: RetrainPlan, data: Samples, kind: str = "rnn", n_repeats: int = 30, base_seed: int = 0,
             model_config: rm.ModelConfig | None = None, **train_kwargs) -> SimulationResult:
    if n_repeats < 1:
        raise ValueError("n_repeats must be >= 1")
    if kind in ("rnn", "combined_extra") and model_config is None:
        raise ValueError(f"model kind {kind!r} needs a model config")
    traces = [simulate_repeat(plan, data, kind, r, base_seed, model_config, **train_kwargs)
              for r in range(n_repeats)]
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # all-NaN months stay NaN
        med_rmse = np.nanmedian(np.vstack([t.rmse for t in traces]), axis=0)
        med_r2 = np.nanmedian(np.vstack([t.r2 for t in traces]), axis=0)
    return SimulationResult(plan, kind, traces, med_rmse, med_r2)


def sort_by_date(samples: Samples) -> Samples:
    order = sorted(range(len(samples)), key=lambda i: samples.records[i].auction_date)
    return samples.subset(order)


# ---------------------------------------------------------------- Wilcoxon

@dataclass(frozen=True)
class WilcoxonResult:
    z: float
    p: float
    w_plus: float
    n: int


def signed_ranks(a, b):
    """Midranks of |a - b| over non-zero differences, and the signs."""
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    d = d[d != 0]
    absd = np.abs(d)
    order = np.argsort(absd, kind="mergesort")
    ranks = np.empty(len(d))
    i = 0
    while i < len(d):
        j = i
        while j + 1 < len(d) and absd[order[j + 1]] == absd[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks, np.sign(d)


def wilcoxon_signed_rank(a, b) -> WilcoxonResult:
    """Two-sided signed-rank test with the normal approximation.

    Zero differences are dropped, tied magnitudes get midranks and the
    variance carries the usual tie correction.  ``z`` is negative when ``a``
    tends to be smaller than ``b``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be equal-length vectors")
    if len(a) < 10:
        raise ValueError("need at least 10 pairs for the normal approximation")
    ranks, sign = signed_ranks(a, b)
    n = len(ranks)
    if n == 0:
        raise ValueError("all paired differences are zero")
    w_plus = float(ranks[sign > 0].sum())
    mean = n * (n + 1) / 4.0
    _, counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(counts ** 3 - counts)) / 48.0
    z = (w_plus - mean) / math.sqrt(var)
    p = math.erfc(abs(z) / math.sqrt(2.0))
    return WilcoxonResult(z, p, w_plus, n)


# ------------------------------------------------------------------ output

def _num(x) -> str:
    return "" if isinstance(x, float) and math.isnan(x) else repr(float(x))


def write_trace_csv(result: SimulationResult, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        for t in result.traces:
            for m in range(len(t.rmse)):
                w.writerow([t.repeat, m, int(t.version[m]), _num(t.rmse[m]), _num(t.r2[m]), int(t.n_samples[m])])


def compare_schedules(results: dict) -> list[tuple[str, str, WilcoxonResult]]:
    """Pairwise tests on per-month median RMSEs (months missing in either schedule are skipped)."""
    out = []
    for a, b in (("yearly", "never"), ("monthly", "yearly"), ("monthly", "never")):
        if a in results and b in results:
            x, y = results[a].median_rmse, results[b].median_rmse
            ok = ~(np.isnan(x) | np.isnan(y))
            out.append((a, b, wilcoxon_signed_rank(x[ok], y[ok])))
    return out


def write_summary_csv(results: dict, tests, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["kind", "schedule", "horizon_median_rmse", "horizon_median_r2", "n_repeats", "n_versions"])
        for sched, res in results.items():
            w.writerow([res.kind, sched, _num(res.horizon_rmse), _num(float(np.nanmedian(res.median_r2))),
                        len(res.traces), len(res.traces[0].versions)])
        w.writerow([])
        w.writerow(["test", "a", "b", "z", "p", "w_plus", "n_pairs"])
        for a, b, r in tests:
            w.writerow(["wilcoxon_signed_rank", a, b, _num(r.z), _num(r.p), _num(r.w_plus), r.n])
