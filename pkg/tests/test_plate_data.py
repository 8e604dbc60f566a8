import datetime as dt
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plateprice.numerics import make_rng
from plateprice.plate_data import (
    CSV_COLUMNS,
    LETTERS,
    PAD,
    VOCAB_SIZE,
    AuctionRecord,
    DataError,
    batch_iterator,
    decode_tokens,
    load_auction_csv,
    preprocess,
    split_dataset,
    split_plate,
    split_sizes,
    tokenize_many,
    tokenize_plate,
    write_auction_csv,
)

HEADER = ",".join(CSV_COLUMNS) + "\n"

plates = st.builds(
    lambda prefix, digits: prefix + digits,
    st.one_of(st.just(""), st.text(LETTERS, min_size=2, max_size=2)),
    st.text("0123456789", min_size=1, max_size=4),
)


def rec(plate="AB12", price=1000.0, sold=True, date=dt.date(2000, 1, 1)):
    return AuctionRecord(plate, price if sold else None, date, sold)


def test_vocabulary_ids():
    assert VOCAB_SIZE == 34
    np.testing.assert_array_equal(tokenize_plate("XY128"), [31, 32, 2, 3, 9, 0])
    np.testing.assert_array_equal(tokenize_plate("8"), [9, 0, 0, 0, 0, 0])
    np.testing.assert_array_equal(tokenize_plate("AZ0"), [11, 33, 1, 0, 0, 0])


@pytest.mark.parametrize("plate,char", [("AB1Q23", "Q"), ("IO12", "I"), ("ab12", "a"), ("AB 12", " ")])
def test_illegal_character_named(plate, char):
    with pytest.raises(DataError, match=repr(char)):
        tokenize_plate(plate)


def test_too_long_and_bad_grammar():
    with pytest.raises(DataError, match="longer"):
        tokenize_plate("AB12345")
    for bad in ("A123", "ABC12", "12AB", "AB", ""):
        with pytest.raises(DataError):
            tokenize_plate(bad)


@given(plates)
@settings(max_examples=200, deadline=None)
def test_tokenize_decode_roundtrip(plate):
    ids = tokenize_plate(plate)
    assert ids.shape == (6,)
    assert ids.min() >= 0 and ids.max() <= 33
    pads = ids == PAD
    # PAD only as a contiguous suffix
    assert not np.any(pads[:-1] & ~pads[1:])
    assert decode_tokens(ids) == plate


def test_split_plate():
    assert split_plate("XY128") == ("XY", "128")
    assert split_plate("8") == ("", "8")


def test_record_invariants():
    with pytest.raises(DataError):
        AuctionRecord("AB12", None, dt.date(2000, 1, 1), True)
    with pytest.raises(DataError):
        AuctionRecord("AB12", 5.0, dt.date(2000, 1, 1), False)


def test_csv_roundtrip(tmp_path):
    recs = [rec("AB12", 1234.5), rec("8", sold=False), rec("XY128", 1e6, date=dt.date(2005, 3, 19))]
    p = tmp_path / "a.csv"
    write_auction_csv(recs, p)
    assert load_auction_csv(p) == recs


def test_csv_header_only(tmp_path):
    p = tmp_path / "e.csv"
    p.write_text(HEADER)
    assert load_auction_csv(p) == []


def test_csv_sold_without_price_names_line(tmp_path):
    p = tmp_path / "b.csv"
    p.write_text(HEADER + "AB12,100,2000-01-01,1,0,1,1.0,1.0\n" + "AB13,,2000-01-01,1,0,1,1.0,1.0\n")
    with pytest.raises(DataError, match="line 3"):
        load_auction_csv(p)


def test_csv_all_errors_reported(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text(HEADER + "AQ12,100,2000-01-01,1,0,1,1,1\n" + "AB12,100,2000-13-01,1,0,1,1,1\n")
    with pytest.raises(DataError) as info:
        load_auction_csv(p)
    assert "line 2" in str(info.value) and "line 3" in str(info.value)


def test_csv_missing_column(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("plate,price_hkd\nAB12,100\n")
    with pytest.raises(DataError, match="auction_date"):
        load_auction_csv(p)


def test_preprocess_drops_unsold():
    recs = [rec(f"AB{i}", 100.0 + i) for i in range(95)] + [rec(f"CD{i}", sold=False) for i in range(5)]
    samples, dropped = preprocess(recs)
    assert (len(samples), dropped) == (95, 5)
    assert preprocess([rec()])[1] == 0


def test_preprocess_log_target():
    samples, _ = preprocess([rec(price=1000.0)])
    assert samples.targets[0] == pytest.approx(6.907755278982137, abs=1e-12)


@given(st.lists(st.floats(1e-3, 1e9), min_size=1, max_size=20))
@settings(max_examples=50, deadline=None)
def test_preprocess_log_property(prices):
    samples, _ = preprocess([rec(price=p) for p in prices])
    np.testing.assert_allclose(samples.targets, [math.log(p) for p in prices], rtol=0, atol=1e-12)


def test_preprocess_rejects_nonpositive():
    with pytest.raises(DataError):
        preprocess([rec(price=0.0)])


def _samples(n):
    return preprocess([rec(f"AB{i % 10000}", 100.0 + i) for i in range(n)])[0]


def test_split_proportions_and_disjoint():
    assert split_sizes(100) == (64, 16, 20)
    s = _samples(100)
    sp = split_dataset(s, 3)
    assert (len(sp.train), len(sp.valid), len(sp.test)) == (64, 16, 20)
    ids = [tuple(p.targets) for p in (sp.train, sp.valid, sp.test)]
    allv = sum(ids, ())
    assert sorted(allv) == sorted(s.targets)


def test_split_determinism():
    s = _samples(1000)
    a, b, c = split_dataset(s, 5), split_dataset(s, 5), split_dataset(s, 6)
    np.testing.assert_array_equal(a.train.targets, b.train.targets)
    assert not np.array_equal(a.train.targets, c.train.targets)


def test_split_too_few():
    with pytest.raises(DataError):
        split_dataset(_samples(9), 0)


def test_batch_sizes_and_union():
    s = _samples(10)
    rng = make_rng(0)
    batches = list(batch_iterator(s, 4, rng))
    assert [len(b.indices) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate([b.indices for b in batches])) == list(range(10))
    assert len(list(batch_iterator(s, 50, rng))) == 1


def test_batch_reshuffled_each_epoch():
    s = _samples(200)
    rng = make_rng(1)
    e1 = np.concatenate([b.indices for b in batch_iterator(s, 16, rng)])
    e2 = np.concatenate([b.indices for b in batch_iterator(s, 16, rng)])
    assert not np.array_equal(e1, e2)


def test_batch_size_validated():
    with pytest.raises(ValueError):
        next(batch_iterator(_samples(10), 0, make_rng(0)))


def test_tokenize_many_shape():
    assert tokenize_many(["8", "AB1234"]).shape == (2, 6)
