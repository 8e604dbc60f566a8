"""Auction records: parsing, plate tokenization, log-price targets and splits."""

from __future__ import annotations

import csv
import datetime as dt
import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

SEQ_LEN = 6
PAD = 0
DIGITS = "0123456789"
LETTERS = "ABCDEFGHJKLMNPRSTUVWXYZ"  # no I, O, Q
VOCAB = DIGITS + LETTERS
VOCAB_SIZE = len(VOCAB) + 1
CHAR_TO_ID = {c: i + 1 for i, c in enumerate(VOCAB)}
ID_TO_CHAR = {i: c for c, i in CHAR_TO_ID.items()}

PLATE_RE = re.compile(r"^(?:[A-HJ-NPR-Z]{2})?[0-9]{1,4}$")

CSV_COLUMNS = (
    "plate", "price_hkd", "auction_date", "sold",
    "afternoon_session", "order_in_session", "stock_index", "cpi",
)


class DataError(ValueError):
    """Invalid plate, record or file contents."""


@dataclass(frozen=True)
class AuctionRecord:
    plate: str
    price_hkd: float | None
    auction_date: dt.date
    sold: bool
    afternoon_session: bool = False
    order_in_session: int = 1
    stock_index: float = 1.0
    cpi: float = 1.0

    def __post_init__(self):
        validate_plate(self.plate)
        if self.sold != (self.price_hkd is not None):
            raise DataError(f"{self.plate}: sold flag disagrees with price presence")
        if self.order_in_session < 1:
            raise DataError(f"{self.plate}: order_in_session must be positive")
        if not (self.stock_index > 0 and self.cpi > 0):
            raise DataError(f"{self.plate}: stock_index and cpi must be positive")


def validate_plate(plate: str) -> str:
    for ch in plate:
        if ch not in CHAR_TO_ID:
            raise DataError(f"illegal character {ch!r} in plate {plate!r}")
    if len(plate) > SEQ_LEN:
        raise DataError(f"plate {plate!r} longer than {SEQ_LEN} characters")
    if not PLATE_RE.match(plate):
        raise DataError(f"plate {plate!r} is not an optional 2-letter prefix followed by 1-4 digits")
    return plate


def split_plate(plate: str) -> tuple[str, str]:
    """Return ``(prefix, digits)`` for a valid plate."""
    validate_plate(plate)
    n = len(plate) - len(plate.lstrip(LETTERS))
    return plate[:n], plate[n:]


def tokenize_plate(plate: str) -> np.ndarray:
    validate_plate(plate)
    ids = np.zeros(SEQ_LEN, dtype=np.int64)
    for i, ch in enumerate(plate):
        ids[i] = CHAR_TO_ID[ch]
    return ids


def decode_tokens(ids) -> str:
    return "".join(ID_TO_CHAR[int(i)] for i in ids if int(i) != PAD)


def tokenize_many(plates: Sequence[str]) -> np.ndarray:
    out = np.zeros((len(plates), SEQ_LEN), dtype=np.int64)
    for r, p in enumerate(plates):
        out[r] = tokenize_plate(p)
    return out


# ---------------------------------------------------------------- CSV I/O

def _parse_flag(text: str, name: str) -> bool:
    if text not in ("0", "1"):
        raise DataError(f"{name} must be 0 or 1, got {text!r}")
    return text == "1"


def _parse_row(row: dict) -> AuctionRecord:
    sold = _parse_flag(row["sold"].strip(), "sold")
    price_txt = row["price_hkd"].strip()
    if sold and not price_txt:
        raise DataError("sold=1 but price_hkd is empty")
    if not sold and price_txt:
        raise DataError("sold=0 but price_hkd is present")
    try:
        price = float(price_txt) if price_txt else None
    except ValueError:
        raise DataError(f"unparseable price {price_txt!r}") from None
    try:
        date = dt.date.fromisoformat(row["auction_date"].strip())
    except ValueError:
        raise DataError(f"unparseable date {row['auction_date']!r}") from None
    try:
        order = int(row["order_in_session"])
        stock = float(row["stock_index"])
        cpi = float(row["cpi"])
    except ValueError as exc:
        raise DataError(str(exc)) from None
    return AuctionRecord(
        plate=row["plate"].strip(),
        price_hkd=price,
        auction_date=date,
        sold=sold,
        afternoon_session=_parse_flag(row["afternoon_session"].strip(), "afternoon_session"),
        order_in_session=order,
        stock_index=stock,
        cpi=cpi,
    )


def load_auction_csv(path) -> list[AuctionRecord]:
    """Read every row or nothing: all malformed rows are reported together."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in CSV_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing column(s) {', '.join(missing)}")
        records, errors = [], []
        for row in reader:
            try:
                records.append(_parse_row(row))
            except (DataError, KeyError, TypeError) as exc:
                errors.append(f"line {reader.line_num}: {exc}")
    if errors:
        raise DataError(f"{path}: {len(errors)} malformed row(s)\n" + "\n".join(errors))
    return records


def _fmt(x: float) -> str:
    return repr(float(x))


def write_auction_csv(records: Sequence[AuctionRecord], path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for r in records:
            w.writerow([
                r.plate,
                "" if r.price_hkd is None else _fmt(r.price_hkd),
                r.auction_date.isoformat(),
                int(r.sold),
                int(r.afternoon_session),
                r.order_in_session,
                _fmt(r.stock_index),
                _fmt(r.cpi),
            ])


# ------------------------------------------------------- model-ready samples

@dataclass(frozen=True)
class Samples:
    """Sold records with tokenized plates and natural-log price targets."""

    records: tuple
    tokens: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, idx) -> "Samples":
        idx = np.asarray(idx, dtype=np.int64)
        return Samples(tuple(self.records[i] for i in idx), self.tokens[idx], self.targets[idx])

    @property
    def plates(self) -> list[str]:
        return [r.plate for r in self.records]


def preprocess(records: Sequence[AuctionRecord]) -> tuple[Samples, int]:
    """Drop unsold records and take log prices. Returns ``(samples, n_dropped)``."""
    kept = []
    for r in records:
        if not r.sold:
            continue
        if r.price_hkd is None or not r.price_hkd > 0:
            raise DataError(f"non-positive price {r.price_hkd!r} for plate {r.plate}")
        kept.append(r)
    tokens = tokenize_many([r.plate for r in kept])
    targets = np.array([math.log(r.price_hkd) for r in kept], dtype=np.float64)
    return Samples(tuple(kept), tokens, targets), len(records) - len(kept)


@dataclass(frozen=True)
class DatasetSplit:
    train: Samples
    valid: Samples
    test: Samples
    seed: int


def split_sizes(n: int, fractions=(0.64, 0.16)) -> tuple[int, int, int]:
    n_train = int(round(n * fractions[0]))
    n_valid = int(round(n * fractions[1]))
    return n_train, n_valid, n - n_train - n_valid


def split_dataset(samples: Samples, seed: int) -> DatasetSplit:
    """Uniform random 64/16/20 partition, reproducible from ``seed``."""
    from .numerics import make_rng

    n = len(samples)
    if n < 10:
        raise DataError(f"need at least 10 records to split, got {n}")
    perm = make_rng(seed).permutation(n)
    n_train, n_valid, _ = split_sizes(n)
    return DatasetSplit(
        train=samples.subset(perm[:n_train]),
        valid=samples.subset(perm[n_train:n_train + n_valid]),
        test=samples.subset(perm[n_train + n_valid:]),
        seed=seed,
    )


class Batch(NamedTuple):
    indices: np.ndarray
    tokens: np.ndarray
    targets: np.ndarray


def batch_iterator(part: Samples, batch_size: int, rng: np.random.Generator) -> Iterator[Batch]:
    """One epoch of shuffled mini-batches; the short final batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(len(part))
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield Batch(idx, part.tokens[idx], part.targets[idx])
