import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plateprice import hedonic
from plateprice.hedonic import FEATURE_NAMES, RankDeficiencyError, extract_features, ols_fit
from plateprice.numerics import make_rng
from plateprice.plate_data import DataError, LETTERS


def feats(plate):
    return dict(zip(FEATURE_NAMES, extract_features(plate)))


def test_888_features():
    f = feats("888")
    assert (f["count_of_8s"], f["all_digits_identical"], f["digit_count"]) == (3, 1, 3)


def test_5888_differs_from_888():
    f = feats("5888")
    assert f["count_of_8s"] == 3 and f["all_digits_identical"] == 0
    assert f["leading_repeat_run_length"] == 1


def test_ascending_with_prefix():
    f = feats("AB1234")
    assert f["is_sequential_ascending"] == 1 and f["has_prefix"] == 1
    assert f["is_sequential_descending"] == 0
    assert feats("4321")["is_sequential_descending"] == 1


def test_patterns_and_specials():
    assert feats("1122")["pattern_aabb"] == 1
    assert feats("1212")["pattern_abab"] == 1
    assert feats("1221")["pattern_abba"] == 1
    assert feats("1111")["pattern_aabb"] == 0  # needs two distinct digits
    assert feats("7")["is_special_plate"] == 1 and feats("7")["digit_value_of_single_digit_plates"] == 7
    assert feats("AB7")["is_special_plate"] == 1
    assert feats("12")["is_special_plate"] == 1
    assert feats("AB12")["is_special_plate"] == 0
    assert feats("8168")["contains_168"] == 1 and feats("2134")["contains_13"] == 1


def test_invalid_plate():
    with pytest.raises(DataError):
        extract_features("AB1Q")


@given(st.text(LETTERS, min_size=2, max_size=2), st.text("0123456789", min_size=1, max_size=4))
@settings(max_examples=100, deadline=None)
def test_extract_is_pure(prefix, digits):
    np.testing.assert_array_equal(extract_features(prefix + digits), extract_features(prefix + digits))


def test_ng_preset_is_subset():
    assert set(hedonic.PRESETS["ng2010"]) < set(hedonic.PRESETS["woo2008"])
    assert hedonic.design_matrix(["AB12"], "ng2010").shape == (1, 13)


def test_planted_recovery():
    rng = make_rng(0)
    X = np.column_stack([rng.normal(size=(200, 4)), np.ones(200)])
    beta = np.array([1.5, -2.0, 0.25, 3.0, 7.0])
    res = ols_fit(X, X @ beta)
    np.testing.assert_allclose(res.coef, beta, rtol=0, atol=1e-6)
    assert not res.ridged


def test_planted_recovery_mixed_scales():
    rng = make_rng(1)
    X = np.column_stack([np.ones(300), rng.integers(1997, 2010, 300), rng.integers(1, 13, 300),
                         rng.normal(9, 0.1, 300)])
    beta = np.array([-3.0, 0.01, -0.02, 1.1])
    np.testing.assert_allclose(ols_fit(X, X @ beta).coef, beta, rtol=0, atol=1e-6)


def test_intercept_only():
    y = make_rng(2).normal(size=30)
    res = ols_fit(np.ones((30, 1)), y)
    assert res.coef[0] == pytest.approx(y.mean(), abs=1e-12)


def test_duplicate_column_ridged_with_warning():
    rng = make_rng(3)
    x = rng.normal(size=50)
    X = np.column_stack([np.ones(50), x, x])
    with pytest.warns(RuntimeWarning, match="x2"):
        res = ols_fit(X, 2 + 3 * x)
    assert res.ridged and res.dropped == ("x2",)
    assert res.coef[1] + res.coef[2] == pytest.approx(3.0, abs=1e-6)


def test_duplicate_column_raise_names_columns():
    x = make_rng(4).normal(size=20)
    with pytest.raises(RankDeficiencyError) as info:
        ols_fit(np.column_stack([np.ones(20), x, 2 * x]), x, ("a", "b", "c"), on_rank_deficiency="raise")
    assert info.value.columns == ("c",)


def test_residuals_orthogonal():
    rng = make_rng(5)
    X = np.column_stack([np.ones(100), rng.normal(size=(100, 3))])
    y = rng.normal(size=100)
    res = ols_fit(X, y)
    assert np.abs(X.T @ (y - X @ res.coef)).max() <= 1e-8


def test_shift_moves_only_intercept():
    rng = make_rng(6)
    X = np.column_stack([rng.normal(size=(80, 3)), np.ones(80)])
    y = rng.normal(size=80)
    a, b = ols_fit(X, y).coef, ols_fit(X, y + 4.0).coef
    np.testing.assert_allclose(b[:3], a[:3], atol=1e-8)
    assert b[3] - a[3] == pytest.approx(4.0, abs=1e-8)


def test_predict_zero_and_linearity():
    model = hedonic.HedonicModel("woo2008", np.zeros(len(FEATURE_NAMES)))
    assert hedonic.predict(model, "AB12") == 0.0
    coef = make_rng(7).normal(size=len(FEATURE_NAMES))
    model = hedonic.HedonicModel("woo2008", coef)
    fa, fb = extract_features("AB12"), extract_features("888")
    summed = (fa + fb) @ coef
    assert summed - coef[-1] == pytest.approx(hedonic.predict(model, "AB12") + hedonic.predict(model, "888")
                                              - coef[-1], abs=1e-12)
    assert hedonic.predict(model, "AB12") == pytest.approx(fa @ coef, abs=1e-12)


def test_fit_and_coefficient_roundtrip(tmp_path):
    rng = make_rng(8)
    plates = [f"{LETTERS[i % 23]}{LETTERS[(i * 7) % 23]}{rng.integers(1, 10000)}" for i in range(300)]
    plates += [str(rng.integers(1, 10000)) for _ in range(100)]
    y = rng.normal(9, 1, size=len(plates))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)  # random plates may leave a flag column empty
        model = hedonic.fit_hedonic(plates, y, "ng2010")
    path = tmp_path / "h.csv"
    hedonic.save_coefficients(model, path)
    back = hedonic.load_coefficients(path)
    assert back.preset == "ng2010"
    np.testing.assert_array_equal(back.coef, model.coef)
    np.testing.assert_array_equal(hedonic.predict_many(back, plates[:5]), hedonic.predict_many(model, plates[:5]))


def test_unknown_preset():
    with pytest.raises(ValueError):
        hedonic.fit_hedonic(["AB12"] * 20, np.ones(20), "nope")
