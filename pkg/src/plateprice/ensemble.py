"""Linear stacking of the recurrent model with the hedonic baseline, optionally with auction covariates."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .hedonic import ols_fit
from .plate_data import AuctionRecord, split_plate

EXTRA_NAMES = ("auction_year", "auction_month", "afternoon_session", "order_in_session",
               "has_prefix", "digit_count", "log_stock_index", "log_cpi")
VARIANTS = ("combined", "combined_extra")


def extra_features(record: AuctionRecord) -> np.ndarray:
    """Year and month enter as plain integers, not dummies."""
    prefix, digits = split_plate(record.plate)
    return np.array([
        record.auction_date.year,
        record.auction_date.month,
        float(record.afternoon_session),
        record.order_in_session,
        float(bool(prefix)),
        len(digits),
        math.log(record.stock_index),
        math.log(record.cpi),
    ], dtype=np.float64)


def extras_matrix(records: Sequence[AuctionRecord]) -> np.ndarray:
    out = np.empty((len(records), len(EXTRA_NAMES)))
    for i, r in enumerate(records):
        out[i] = extra_features(r)
    return out


@dataclass
class EnsembleModel:
    variant: str
    alpha: float
    delta_rnn: float
    delta_hedonic: float
    nu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    train_rmse: float = float("nan")
    train_r2: float = float("nan")

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        self.nu = np.asarray(self.nu, dtype=np.float64)
        if self.variant == "combined" and self.nu.size:
            raise ValueError("the combined variant has no extra-feature weights")
        if self.variant == "combined_extra" and self.nu.size != len(EXTRA_NAMES):
            raise ValueError(f"combined_extra needs {len(EXTRA_NAMES)} extra weights")

    @property
    def terms(self) -> list[tuple[str, float]]:
        rows = [("alpha", self.alpha), ("delta_rnn", self.delta_rnn), ("delta_hedonic", self.delta_hedonic)]
        return rows + [(f"nu_{n}", float(v)) for n, v in zip(EXTRA_NAMES, self.nu)]


def _design(variant, rnn_preds, hedonic_preds, extras):
    cols = [np.ones(len(rnn_preds)), np.asarray(rnn_preds, float), np.asarray(hedonic_preds, float)]
    X = np.column_stack(cols)
    if variant == "combined_extra":
        if extras is None:
            raise ValueError("combined_extra needs extra features")
        extras = np.asarray(extras, dtype=np.float64).reshape(len(rnn_preds), len(EXTRA_NAMES))
        X = np.hstack([X, extras])
    return X


def fit_ensemble(variant: str, rnn_preds, hedonic_preds, extras, targets,
                 drop_constant_extras: bool = False) -> EnsembleModel:
    """OLS over ``[1, y_rnn, y_hedonic, extras...]``; raises on a rank-deficient design.

    With ``drop_constant_extras`` an extra column that does not vary (say the
    year inside a short window) is left out of the fit and gets weight zero
    instead of making the design singular.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    n = len(targets)
    if len(rnn_preds) != n or len(hedonic_preds) != n:
        raise ValueError("prediction and target lengths differ")
    X = _design(variant, rnn_preds, hedonic_preds, extras)
    names = ("alpha", "delta_rnn", "delta_hedonic")
    if variant == "combined_extra":
        names += tuple(f"nu_{x}" for x in EXTRA_NAMES)
    keep = np.ones(X.shape[1], bool)
    if drop_constant_extras and variant == "combined_extra":
        keep[3:] = np.ptp(X[:, 3:], axis=0) > 0
    res = ols_fit(X[:, keep], targets, [m for m, k in zip(names, keep) if k], on_rank_deficiency="raise")
    c = np.zeros(X.shape[1])
    c[keep] = res.coef
    return EnsembleModel(variant, float(c[0]), float(c[1]), float(c[2]), c[3:],
                         res.train_rmse, res.train_r2)


def predict_ensemble(model: EnsembleModel, rnn_pred, hedonic_pred, extras=None):
    scalar = np.ndim(rnn_pred) == 0
    r = np.atleast_1d(np.asarray(rnn_pred, dtype=np.float64))
    h = np.atleast_1d(np.asarray(hedonic_pred, dtype=np.float64))
    y = model.alpha + model.delta_rnn * r + model.delta_hedonic * h
    if model.variant == "combined_extra":
        if extras is None:
            raise ValueError("combined_extra model needs extra features")
        y = y + np.asarray(extras, dtype=np.float64).reshape(len(r), len(EXTRA_NAMES)) @ model.nu
    return float(y[0]) if scalar else y


def save_coefficients(model: EnsembleModel, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["term", "value"])
        for term, v in model.terms:
            w.writerow([term, repr(float(v))])


def load_coefficients(path) -> EnsembleModel:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        terms = {r["term"]: float(r["value"]) for r in csv.DictReader(fh)}
    nu = [terms[f"nu_{n}"] for n in EXTRA_NAMES if f"nu_{n}" in terms]
    variant = "combined_extra" if nu else "combined"
    return EnsembleModel(variant, terms["alpha"], terms["delta_rnn"], terms["delta_hedonic"], nu)
