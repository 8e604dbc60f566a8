"""Handcrafted-feature hedonic baselines and the OLS estimator they share with the ensembles.

The two presets (``woo2008`` and ``ng2010``) are best-effort reconstructions
from the character-level features those studies describe; they are not the
published specifications.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg

from .plate_data import split_plate

logger = logging.getLogger(__name__)

FEATURE_NAMES = (
    "digit_count",
    "has_prefix",
    "count_of_8s",
    "count_of_4s",
    "contains_168",
    "contains_13",
    "all_digits_identical",
    "leading_repeat_run_length",
    "is_sequential_ascending",
    "is_sequential_descending",
    "is_special_plate",
    "digit_value_of_single_digit_plates",
    "pattern_aabb",
    "pattern_abab",
    "pattern_abba",
    "intercept",
)

PRESETS = {
    "woo2008": FEATURE_NAMES,
    "ng2010": tuple(f for f in FEATURE_NAMES if not f.startswith("pattern_")),
}

RIDGE_LAMBDA = 1e-8


class RankDeficiencyError(np.linalg.LinAlgError):
    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = tuple(columns)


def _steps(digits: str) -> set:
    return {int(b) - int(a) for a, b in zip(digits, digits[1:])}


def extract_features(plate: str) -> np.ndarray:
    """Full feature vector in ``FEATURE_NAMES`` order; depends on the plate string only.

    ``is_special_plate`` approximates the statutory rules: single-digit plates,
    plates whose digits are all identical, and prefix-less plates of at most
    two digits.
    """
    prefix, digits = split_plate(plate)
    n = len(digits)
    identical = n >= 2 and len(set(digits)) == 1
    run = len(digits) - len(digits.lstrip(digits[0]))
    steps = _steps(digits)
    special = n == 1 or identical or (not prefix and n <= 2)
    aabb = abab = abba = 0.0
    if n == 4 and len(set(digits)) == 2:
        a, b, c, d = digits
        aabb = float(a == b and c == d)
        abab = float(a == c and b == d)
        abba = float(a == d and b == c)
    return np.array([
        n,
        float(bool(prefix)),
        digits.count("8"),
        digits.count("4"),
        float("168" in digits),
        float("13" in digits),
        float(identical),
        run,
        float(n >= 2 and steps == {1}),
        float(n >= 2 and steps == {-1}),
        float(special),
        int(digits) if n == 1 else 0.0,
        aabb,
        abab,
        abba,
        1.0,
    ], dtype=np.float64)


def design_matrix(plates: Sequence[str], preset: str = "woo2008") -> np.ndarray:
    cols = [FEATURE_NAMES.index(f) for f in PRESETS[preset]]
    X = np.empty((len(plates), len(cols)))
    for i, p in enumerate(plates):
        X[i] = extract_features(p)[cols]
    return X


# --------------------------------------------------------------------- OLS

@dataclass
class OLSResult:
    coef: np.ndarray
    names: tuple
    dropped: tuple = ()
    ridged: bool = False
    train_rmse: float = float("nan")
    train_r2: float = float("nan")


def collinear_columns(X: np.ndarray, names: Sequence[str]) -> list[str]:
    """Columns a pivoted QR identifies as linearly dependent on earlier ones."""
    _, R, piv = scipy.linalg.qr(X, mode="economic", pivoting=True)
    diag = np.abs(np.diag(R))
    tol = diag.max() * max(X.shape) * np.finfo(float).eps if diag.size else 0.0
    rank = int(np.sum(diag > tol))
    return [names[i] for i in sorted(piv[rank:])]


def ols_fit(X, y, names: Sequence[str] | None = None, on_rank_deficiency: str = "ridge") -> OLSResult:
    """Least squares through the normal equations.

    Columns are rescaled to unit norm before solving so wildly different
    feature scales (years vs flags) do not hurt conditioning.  On rank
    deficiency ``on_rank_deficiency="ridge"`` warns and adds ``1e-8 * I``;
    ``"raise"`` raises :class:`RankDeficiencyError` naming the offending columns.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n, k = X.shape
    names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(k))
    if y.shape != (n,):
        raise ValueError(f"targets of shape {y.shape} do not match {n} rows")
    if n < k:
        raise RankDeficiencyError(f"{n} rows cannot identify {k} coefficients", names)
    scale = np.linalg.norm(X, axis=0)
    zero = [names[i] for i in np.flatnonzero(scale == 0)]
    scale[scale == 0] = 1.0
    Xs = X / scale
    bad = zero or collinear_columns(Xs, names)
    G = Xs.T @ Xs
    ridged = False
    if bad:
        if on_rank_deficiency == "raise":
            raise RankDeficiencyError(f"rank-deficient design; collinear columns: {', '.join(bad)}", bad)
        warnings.warn(f"rank-deficient design (columns {', '.join(bad)}); using ridge {RIDGE_LAMBDA:g}",
                      RuntimeWarning, stacklevel=2)
        G = G + RIDGE_LAMBDA * np.eye(k)
        ridged = True
    try:
        cf = scipy.linalg.cho_factor(G)
        beta_s = scipy.linalg.cho_solve(cf, Xs.T @ y)
    except np.linalg.LinAlgError:
        raise RankDeficiencyError("normal equations are not positive definite", bad or names) from None
    coef = beta_s / scale
    if not np.all(np.isfinite(coef)):
        raise RankDeficiencyError("non-finite coefficients", bad or names)
    resid = y - X @ coef
    rmse = float(np.sqrt(np.mean(resid ** 2)))
    tss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(resid @ resid) / tss if tss > 0 else float("nan")
    return OLSResult(coef, names, tuple(bad), ridged, rmse, r2)


# ---------------------------------------------------------- hedonic model

@dataclass
class HedonicModel:
    preset: str
    coef: np.ndarray
    names: tuple = field(default=())
    train_rmse: float = float("nan")
    train_r2: float = float("nan")

    def __post_init__(self):
        if not self.names:
            self.names = PRESETS[self.preset]
        if len(self.coef) != len(self.names):
            raise ValueError("coefficient length does not match the feature preset")


def fit_hedonic(plates: Sequence[str], targets, preset: str = "woo2008") -> HedonicModel:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    res = ols_fit(design_matrix(plates, preset), targets, PRESETS[preset])
    if res.dropped:
        logger.warning("hedonic %s: collinear features %s", preset, ", ".join(res.dropped))
    return HedonicModel(preset, res.coef, PRESETS[preset], res.train_rmse, res.train_r2)


def predict(model: HedonicModel, plate: str) -> float:
    cols = [FEATURE_NAMES.index(f) for f in model.names]
    return float(extract_features(plate)[cols] @ model.coef)


def predict_many(model: HedonicModel, plates: Sequence[str]) -> np.ndarray:
    return design_matrix(plates, model.preset) @ model.coef


def save_coefficients(model: HedonicModel, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["feature_name", "coefficient"])
        for name, c in zip(model.names, model.coef):
            w.writerow([name, repr(float(c))])


def load_coefficients(path) -> HedonicModel:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    names = tuple(r["feature_name"] for r in rows)
    coef = np.array([float(r["coefficient"]) for r in rows])
    preset = next((k for k, v in PRESETS.items() if v == names), None)
    if preset is None:
        raise ValueError(f"{path}: feature list matches no preset")
    return HedonicModel(preset, coef, names)
