import datetime as dt

import numpy as np
import pytest

from plateprice import synth
from plateprice.plate_data import PLATE_RE, write_auction_csv


@pytest.fixture(scope="module")
def default_data():
    return synth.generate(synth.SynthConfig())


def test_same_seed_identical_csv(tmp_path):
    cfg = synth.SynthConfig(n_records=500, seed=4)
    a, _ = synth.generate(cfg)
    b, _ = synth.generate(cfg)
    write_auction_csv(a, tmp_path / "a.csv")
    write_auction_csv(b, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    c, _ = synth.generate(synth.SynthConfig(n_records=500, seed=5))
    assert [r.plate for r in a] != [r.plate for r in c]


def test_plates_are_valid(default_data):
    records, _ = default_data
    assert all(PLATE_RE.match(r.plate) for r in records[:5000])


def test_unsold_fraction(default_data):
    records, decomp = default_data
    frac = 1 - np.mean([r.sold for r in records])
    assert abs(frac - 0.05) <= 0.01
    assert np.array_equal(decomp.sold, [r.sold for r in records])


def test_888_beats_5888(default_data):
    records, _ = default_data
    p888 = [r.price_hkd for r in records if r.sold and "888" in r.plate and "5888" not in r.plate]
    p5888 = [r.price_hkd for r in records if r.sold and "5888" in r.plate]
    assert len(p888) > 30 and len(p5888) > 30
    assert np.mean(p888) > np.mean(p5888)


def test_price_right_skewed(default_data):
    prices = np.array([r.price_hkd for r in default_data[0] if r.sold])
    assert prices.mean() > np.median(prices)


def test_default_ceiling(default_data):
    assert abs(synth.oracle_r2_ceiling(default_data[1]) - 0.90) <= 0.02


def test_regression_on_truth_reaches_ceiling(default_data):
    records, d = default_data
    y = d.deterministic[d.sold] + d.noise[d.sold]
    X = np.column_stack([np.ones(y.size), d.deterministic[d.sold]])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    r2 = 1 - np.sum((y - X @ coef) ** 2) / np.sum((y - y.mean()) ** 2)
    assert abs(r2 - synth.oracle_r2_ceiling(d)) <= 0.01


def test_ceiling_limits():
    _, d = synth.generate(synth.SynthConfig(n_records=2000, noise_std=1e-6))
    assert synth.oracle_r2_ceiling(d) > 0.999999
    flat = synth.OracleDecomposition(("8",) * 4, np.full(4, 9.0), np.zeros(4), np.ones(4, bool), 0.3)
    assert synth.oracle_r2_ceiling(flat) == 0.0


def test_noise_matches_config(default_data):
    _, d = default_data
    assert abs(d.noise.std() - 0.3) < 0.01


def _per_year_means(records, values):
    years = np.array([r.auction_date.year for r in records])
    out = []
    for y in np.unique(years):
        v = values[years == y]
        out.append((v.mean(), v.std(ddof=1) / np.sqrt(v.size)))
    return np.array(out)


def test_no_drift_is_exchangeable_across_years():
    # the macro covariates are held flat so that only the plate process remains
    cfg = synth.SynthConfig(n_records=20_000, unsold_fraction=0.0, stock_mu=0.0, stock_sigma=0.0,
                            cpi_mu=0.0, cpi_sigma=0.0, seed=3)
    records, d = synth.generate(cfg)
    logp = d.deterministic + d.noise
    stats = _per_year_means(records, logp)
    grand = logp.mean()
    assert np.all(np.abs(stats[:, 0] - grand) <= 3 * stats[:, 1] * np.sqrt(1 + 1 / len(stats)))


def test_plate_component_exchangeable_with_default_covariates():
    cfg = synth.SynthConfig(n_records=20_000, seed=3)
    records, d = synth.generate(cfg)
    score = np.array([synth.plate_score(p, cfg.weights) for p in d.plates])
    stats = _per_year_means(records, score)
    assert np.all(np.abs(stats[:, 0] - score.mean()) <= 3 * stats[:, 1] * np.sqrt(1 + 1 / len(stats)))


def test_drift_shifts_weights():
    cfg = synth.SynthConfig().with_drift(eight=0.1)
    assert synth.weights_at(cfg, 2.0)["eight"] == pytest.approx(cfg.weights["eight"] + 0.2)
    assert synth.weights_at(cfg, 2.0)["four"] == cfg.weights["four"]


def test_config_validation():
    with pytest.raises(ValueError):
        synth.SynthConfig(noise_std=0.0)
    with pytest.raises(ValueError):
        synth.SynthConfig(weights={"nope": 1.0})
    with pytest.raises(ValueError):
        synth.SynthConfig().with_drift(eight=float("inf"))


def test_auction_days():
    days = synth.auction_days(dt.date(1997, 1, 1), 1)
    assert len(days) == 24
    assert all(d.weekday() == 5 for d in days)
    assert days[0] == dt.date(1997, 1, 4)


def test_oracle_csv(tmp_path):
    _, d = synth.generate(synth.SynthConfig(n_records=50))
    synth.write_oracle_csv(d, tmp_path / "o.csv")
    lines = (tmp_path / "o.csv").read_text().splitlines()
    assert lines[0] == "plate,deterministic_log_price,noise,ceiling_component"
    assert len(lines) == 51
