"""Synthetic plate-auction generator with a known log-price decomposition.

Each sold record's log price is ``deterministic + noise`` where the
deterministic part is a weighted score of plate patterns, covariates and
(optional) per-year weight drift, and the noise is Gaussian with a known
standard deviation.  Several effects are deliberately nonlinear in simple
counts (an 8-run led by a 5, letter identities, trailing digits) so a
sequence model can learn them but a count-based linear model cannot.
"""

from __future__ import annotations

import csv
import datetime as dt
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import make_rng
from .plate_data import LETTERS, AuctionRecord, split_plate

DEFAULT_WEIGHTS = {
    "base": 8.0,
    "digits_1": 1.8,
    "digits_2": 1.0,
    "digits_3": 0.4,
    "no_prefix": 0.7,
    "twin_letters": 0.35,
    "letter_scale": 1.0,
    "eight": 0.35,
    "eight_after_five": -0.15,
    "five_eight_penalty": -0.5,
    "four": -0.3,
    "six_nine": 0.12,
    "has_168": 0.9,
    "has_13": -0.2,
    "identical": 0.9,
    "last_eight": 0.25,
    "last_four": -0.2,
    "ascending": 0.5,
    "descending": 0.3,
    "pair_pattern": 0.35,
    "pair_68": 0.2,
    "pair_89": 0.15,
    "single_low": 0.6,
    "log_stock": 0.3,
    "log_cpi": 1.0,
    "afternoon": -0.05,
    "order": -0.002,
}

# fixed per-letter value for prefix letters (scaled by letter_scale)
LETTER_VALUES = dict(zip(LETTERS, np.round(np.sin(np.arange(1, len(LETTERS) + 1) * 2.3) * 0.3, 4)))


@dataclass(frozen=True)
class SynthConfig:
    n_records: int = 50_000
    start: dt.date = dt.date(1997, 1, 1)
    n_years: int = 13
    seed: int = 0
    noise_std: float = 0.3
    unsold_fraction: float = 0.05
    weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    drift: dict = field(default_factory=dict)
    stock_start: float = 10_000.0
    stock_mu: float = 0.004
    stock_sigma: float = 0.03
    cpi_start: float = 100.0
    cpi_mu: float = 0.002
    cpi_sigma: float = 0.003

    def __post_init__(self):
        if not self.noise_std > 0:
            raise ValueError("noise_std must be positive")
        for table in (self.weights, self.drift):
            for k, v in table.items():
                if k not in DEFAULT_WEIGHTS:
                    raise ValueError(f"unknown weight {k!r}")
                if not math.isfinite(v):
                    raise ValueError(f"weight {k!r} is not finite")
        if self.n_records < 1 or self.n_years < 1:
            raise ValueError("n_records and n_years must be positive")

    def with_drift(self, **drift) -> "SynthConfig":
        return replace(self, drift={**self.drift, **drift})


# drift preset used by retraining experiments: tastes shift every year
DRIFT_PRESET = {"eight": 0.06, "letter_scale": -0.25, "base": 0.08, "four": -0.05, "digits_1": 0.1}


@dataclass(frozen=True)
class OracleDecomposition:
    plates: tuple
    deterministic: np.ndarray
    noise: np.ndarray
    sold: np.ndarray
    noise_std: float

    def ceiling_components(self) -> np.ndarray:
        det = self.deterministic[self.sold]
        return (self.deterministic - det.mean()) ** 2


# ------------------------------------------------------------------ plates

def _rand_digits(rng, n):
    # auctioned plates over-represent lucky digits
    probs = np.array([0.05, 0.1, 0.09, 0.09, 0.04, 0.08, 0.12, 0.08, 0.22, 0.13])
    d = rng.choice(10, size=n, p=probs)
    if d[0] == 0:
        d[0] = 1 + rng.integers(9)
    return "".join(str(x) for x in d)


def _make_digits(rng, n):
    u = rng.random()
    a = 1 + int(rng.integers(9))
    if n >= 2 and u < 0.10:
        return str(a) * n
    if n >= 2 and u < 0.15:
        start = int(rng.integers(1, 11 - n))
        return "".join(str(start + i) for i in range(n))
    if n >= 2 and u < 0.18:
        start = int(rng.integers(n - 1, 10))
        return "".join(str(start - i) for i in range(n))
    if n == 4 and u < 0.26:
        b = (a + 1 + int(rng.integers(8))) % 10
        pat = ["AABB", "ABAB", "ABBA"][int(rng.integers(3))]
        return pat.replace("A", str(a)).replace("B", str(b))
    if n >= 3 and u < 0.32:
        rest = n - 3
        return "168" + _rand_digits(rng, rest)[:rest] if rest else "168"
    if n >= 2 and u < 0.40:
        return "5" + "8" * (n - 1)
    return _rand_digits(rng, n)


def random_plate(rng) -> str:
    n_digits = 1 + int(rng.choice(4, p=[0.06, 0.16, 0.33, 0.45]))
    digits = _make_digits(rng, n_digits)
    if rng.random() < 0.2:
        return digits
    if rng.random() < 0.1:
        prefix = LETTERS[int(rng.integers(len(LETTERS)))] * 2
    else:
        prefix = "".join(LETTERS[int(i)] for i in rng.integers(len(LETTERS), size=2))
    return prefix + digits


# ------------------------------------------------------------------- score

def plate_score(plate: str, w: dict) -> float:
    """Character-only part of the deterministic log price (excluding ``base``)."""
    prefix, digits = split_plate(plate)
    n = len(digits)
    s = w.get(f"digits_{n}", 0.0)
    if not prefix:
        s += w["no_prefix"]
    else:
        s += w["letter_scale"] * (LETTER_VALUES[prefix[0]] + LETTER_VALUES[prefix[1]])
        if prefix[0] == prefix[1]:
            s += w["twin_letters"]
    # 8s in a run that starts right after a 5 lose their value
    i = 0
    while i < n:
        if digits[i] == "8":
            j = i
            while j < n and digits[j] == "8":
                j += 1
            run = j - i
            if i > 0 and digits[i - 1] == "5":
                s += run * w["eight_after_five"] + w["five_eight_penalty"]
            else:
                s += run * w["eight"]
            i = j
        else:
            i += 1
    s += digits.count("4") * w["four"]
    s += (digits.count("6") + digits.count("9")) * w["six_nine"]
    if "168" in digits:
        s += w["has_168"]
    if "13" in digits:
        s += w["has_13"]
    if n >= 2 and len(set(digits)) == 1:
        s += w["identical"]
    if digits[-1] == "8":
        s += w["last_eight"]
    elif digits[-1] == "4":
        s += w["last_four"]
    if n >= 2:
        steps = {int(b) - int(a) for a, b in zip(digits, digits[1:])}
        if steps == {1}:
            s += w["ascending"]
        elif steps == {-1}:
            s += w["descending"]
    if n == 4 and len(set(digits)) == 2:
        a, b, c, d = digits
        if (a == b and c == d) or (a == c and b == d) or (a == d and b == c):
            s += w["pair_pattern"]
    if "68" in digits:
        s += w["pair_68"]
    if "89" in digits:
        s += w["pair_89"]
    if n == 1 and digits in "123":
        s += w["single_low"]
    return s


def weights_at(cfg: SynthConfig, years_elapsed: float) -> dict:
    return {k: v + cfg.drift.get(k, 0.0) * years_elapsed for k, v in cfg.weights.items()}


# -------------------------------------------------------------- generation

def auction_days(start: dt.date, n_years: int) -> list[dt.date]:
    """Two weekend auction days per month: first and third Saturday."""
    days = []
    for m in range(12 * n_years):
        y, mo = start.year + (start.month - 1 + m) // 12, (start.month - 1 + m) % 12 + 1
        first = dt.date(y, mo, 1)
        sat = first + dt.timedelta(days=(5 - first.weekday()) % 7)
        days += [sat, sat + dt.timedelta(days=14)]
    return days


def generate(cfg: SynthConfig = SynthConfig()) -> tuple[list[AuctionRecord], OracleDecomposition]:
    rng = make_rng(cfg.seed)
    n_months = 12 * cfg.n_years
    stock = cfg.stock_start * np.exp(np.cumsum(rng.normal(cfg.stock_mu, cfg.stock_sigma, n_months)))
    cpi = cfg.cpi_start * np.exp(np.cumsum(rng.normal(cfg.cpi_mu, cfg.cpi_sigma, n_months)))
    days = auction_days(cfg.start, cfg.n_years)
    # sessions: (day index, afternoon flag); records spread evenly over sessions
    n_sessions = 2 * len(days)
    session_of = np.sort(rng.integers(n_sessions, size=cfg.n_records))
    plates = [random_plate(rng) for _ in range(cfg.n_records)]
    noise = rng.normal(0.0, cfg.noise_std, cfg.n_records)

    det = np.empty(cfg.n_records)
    rows = []
    order = 0
    for i, s in enumerate(session_of):
        order = order + 1 if i > 0 and session_of[i - 1] == s else 1
        day = days[s // 2]
        afternoon = bool(s % 2)
        month = (s // 2) // 2
        years = month / 12.0
        w = weights_at(cfg, years)
        det[i] = (w["base"] + plate_score(plates[i], w)
                  + w["log_stock"] * math.log(stock[month] / cfg.stock_start)
                  + w["log_cpi"] * math.log(cpi[month] / cfg.cpi_start)
                  + w["afternoon"] * afternoon + w["order"] * order)
        rows.append((day, afternoon, order, float(stock[month]), float(cpi[month])))

    logp = det + noise
    cutoff = np.quantile(logp, cfg.unsold_fraction) if cfg.unsold_fraction > 0 else -np.inf
    sold = logp > cutoff
    records = [
        AuctionRecord(
            plate=plates[i],
            price_hkd=float(np.exp(logp[i])) if sold[i] else None,
            auction_date=day, sold=bool(sold[i]), afternoon_session=aft,
            order_in_session=order, stock_index=st, cpi=cp,
        )
        for i, (day, aft, order, st, cp) in enumerate(rows)
    ]
    return records, OracleDecomposition(tuple(plates), det, noise, sold, cfg.noise_std)


def oracle_r2_ceiling(decomp: OracleDecomposition) -> float:
    """Var(deterministic) / (Var(deterministic) + noise_std^2) over sold records."""
    v = float(np.var(decomp.deterministic[decomp.sold]))
    return v / (v + decomp.noise_std ** 2)


def write_oracle_csv(decomp: OracleDecomposition, path) -> None:
    comp = decomp.ceiling_components()
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["plate", "deterministic_log_price", "noise", "ceiling_component"])
        for p, d, e, c in zip(decomp.plates, decomp.deterministic, decomp.noise, comp):
            w.writerow([p, repr(float(d)), repr(float(e)), repr(float(c))])
