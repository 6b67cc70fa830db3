"""Canonical bid data: tenders grouped into markets, CSV ingestion, validation.

The interchange format is a flat CSV with one row per bid:

    market_id,tender_id,date,bidder_id,bid,label

``date`` is ISO-8601 (``YYYY-MM-DD``), ``bid`` is a strictly positive
decimal, ``label`` is one of ``collusive``/``competitive``/``unknown``
(case-insensitive). All rows of one tender must agree on date and label.
Bidder identifiers are scoped per market: the same token in two markets
denotes two distinct firms.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from datetime import date
from enum import Enum
from math import isfinite
from pathlib import Path
from typing import Iterator


class Label(Enum):
    COLLUSIVE = "collusive"
    COMPETITIVE = "competitive"
    UNKNOWN = "unknown"

    @classmethod
    def from_string(cls, s: str) -> "Label":
        try:
            return cls(s.strip().lower())
        except ValueError:
            raise ValueError(f"unknown label {s!r} (expected collusive/competitive/unknown)")


class BidDataError(Exception):
    """Base class for ingestion failures."""


class ParseError(BidDataError):
    """Malformed CSV row; carries the 1-based line number."""

    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class ConsistencyError(BidDataError):
    """Rows of one tender disagree on date or label."""

    def __init__(self, market_id: str, tender_id: str, message: str):
        self.market_id = market_id
        self.tender_id = tender_id
        super().__init__(f"tender {tender_id!r} in market {market_id!r}: {message}")


class DuplicationError(BidDataError):
    """The same bidder appears twice in one tender."""

    def __init__(self, market_id: str, tender_id: str, bidder_id: str, line_number: int):
        self.market_id = market_id
        self.tender_id = tender_id
        self.bidder_id = bidder_id
        super().__init__(
            f"line {line_number}: duplicate bid by {bidder_id!r} in tender "
            f"{tender_id!r} of market {market_id!r}"
        )


@dataclass(frozen=True)
class Bid:
    bidder_id: str
    value: float


@dataclass(frozen=True)
class Tender:
    """One procurement auction: the node unit of every downstream graph."""

    tender_id: str
    market_id: str
    date: date
    label: Label
    bids: tuple[Bid, ...]

    def bid_values(self) -> list[float]:
        return [b.value for b in self.bids]

    def bidder_set(self) -> frozenset[str]:
        return frozenset(b.bidder_id for b in self.bids)

    @property
    def n_bids(self) -> int:
        return len(self.bids)


@dataclass
class MarketDataset:
    """Tenders partitioned by market, in file / generation order."""

    markets: dict[str, list[Tender]] = field(default_factory=dict)

    def all_tenders(self) -> Iterator[Tender]:
        for tenders in self.markets.values():
            yield from tenders

    @property
    def n_tenders(self) -> int:
        return sum(len(ts) for ts in self.markets.values())

    @property
    def n_markets(self) -> int:
        return len(self.markets)

    def earliest_date(self) -> date:
        return min(t.date for t in self.all_tenders())


@dataclass(frozen=True)
class Violation:
    """One dataset-invariant breach found by validate_dataset."""

    code: str
    market_id: str
    tender_id: str
    message: str

    def __str__(self) -> str:
        return f"[{self.code}] market {self.market_id!r} tender {self.tender_id!r}: {self.message}"


CSV_HEADER = ["market_id", "tender_id", "date", "bidder_id", "bid", "label"]


def parse_bids_csv(path: str | Path) -> MarketDataset:
    """Read a bid CSV into a MarketDataset.

    One Tender per distinct (market_id, tender_id), bids in file order.
    Raises ParseError (with line number) for malformed rows,
    ConsistencyError for intra-tender date/label conflicts and
    DuplicationError for repeated (tender, bidder) pairs.
    """
    rows_by_tender: dict[tuple[str, str], dict] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(1, "empty file (header row required)")
        if [h.strip().lower() for h in header] != CSV_HEADER:
            raise ParseError(1, f"bad header {header!r}, expected {','.join(CSV_HEADER)}")

        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 6:
                raise ParseError(line_no, f"expected 6 columns, got {len(row)}")
            market_id, tender_id, date_s, bidder_id, bid_s, label_s = (c.strip() for c in row)
            if not market_id or not tender_id or not bidder_id:
                raise ParseError(line_no, "empty market_id/tender_id/bidder_id")
            try:
                tender_date = date.fromisoformat(date_s)
            except ValueError:
                raise ParseError(line_no, f"bad date {date_s!r} (expected YYYY-MM-DD)")
            try:
                value = float(bid_s)
            except ValueError:
                raise ParseError(line_no, f"non-numeric bid {bid_s!r}")
            if not isfinite(value) or value <= 0:
                raise ParseError(line_no, f"bid must be a finite positive number, got {bid_s!r}")
            try:
                label = Label.from_string(label_s)
            except ValueError as exc:
                raise ParseError(line_no, str(exc))

            key = (market_id, tender_id)
            entry = rows_by_tender.get(key)
            if entry is None:
                rows_by_tender[key] = {
                    "date": tender_date,
                    "label": label,
                    "bids": [Bid(bidder_id, value)],
                    "bidders": {bidder_id: line_no},
                }
            else:
                if entry["date"] != tender_date:
                    raise ConsistencyError(
                        market_id, tender_id,
                        f"conflicting dates {entry['date']} vs {tender_date} (line {line_no})",
                    )
                if entry["label"] is not label:
                    raise ConsistencyError(
                        market_id, tender_id,
                        f"conflicting labels {entry['label'].value} vs {label.value} (line {line_no})",
                    )
                if bidder_id in entry["bidders"]:
                    raise DuplicationError(market_id, tender_id, bidder_id, line_no)
                entry["bids"].append(Bid(bidder_id, value))
                entry["bidders"][bidder_id] = line_no

    ds = MarketDataset()
    for (market_id, tender_id), entry in rows_by_tender.items():
        tender = Tender(
            tender_id=tender_id,
            market_id=market_id,
            date=entry["date"],
            label=entry["label"],
            bids=tuple(entry["bids"]),
        )
        ds.markets.setdefault(market_id, []).append(tender)
    return ds


def write_bids_csv(ds: MarketDataset, path: str | Path) -> None:
    """Serialize a dataset back to the bid CSV schema (parse round-trips)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for market_id, tenders in ds.markets.items():
            for t in tenders:
                for b in t.bids:
                    writer.writerow(
                        [market_id, t.tender_id, t.date.isoformat(),
                         b.bidder_id, repr(b.value), t.label.value]
                    )


def filter_min_bids(ds: MarketDataset, min_bids: int = 3) -> tuple[MarketDataset, int]:
    """Drop tenders with fewer than min_bids bids; markets left empty vanish.

    Idempotent. min_bids must be >= 3: the screens need three bids, and the
    relative-distance screen needs two losing bids.
    """
    if min_bids < 3:
        raise ValueError(f"min_bids must be >= 3, got {min_bids}")
    out = MarketDataset()
    dropped = 0
    for market_id, tenders in ds.markets.items():
        kept = [t for t in tenders if t.n_bids >= min_bids]
        dropped += len(tenders) - len(kept)
        if kept:
            out.markets[market_id] = kept
    return out, dropped


def validate_dataset(ds: MarketDataset, mode: str = "train") -> list[Violation]:
    """Collect every invariant breach; an empty list means the dataset is
    valid for the given mode.

    mode="train" additionally forbids Unknown labels (prediction inputs may
    carry them). Diagnostics are returned, never raised.
    """
    if mode not in ("train", "predict"):
        raise ValueError(f"mode must be 'train' or 'predict', got {mode!r}")
    violations: list[Violation] = []
    for market_id, tenders in ds.markets.items():
        if not tenders:
            violations.append(Violation("empty_market", market_id, "", "market has no tenders"))
            continue
        seen_ids: set[str] = set()
        for t in tenders:
            if t.market_id != market_id:
                violations.append(Violation(
                    "market_mismatch", market_id, t.tender_id,
                    f"tender is filed under {market_id!r} but says market {t.market_id!r}",
                ))
            if t.tender_id in seen_ids:
                violations.append(Violation(
                    "duplicate_tender", market_id, t.tender_id, "tender_id occurs twice in market",
                ))
            seen_ids.add(t.tender_id)
            if mode == "train" and t.label is Label.UNKNOWN:
                violations.append(Violation(
                    "unknown_label", market_id, t.tender_id, "unknown label in a training dataset",
                ))
            if not t.bids:
                violations.append(Violation("no_bids", market_id, t.tender_id, "tender has no bids"))
            bidders: set[str] = set()
            for b in t.bids:
                if b.value <= 0 or not isfinite(b.value):
                    violations.append(Violation(
                        "bad_bid_value", market_id, t.tender_id,
                        f"bid by {b.bidder_id!r} has non-positive value {b.value}",
                    ))
                if b.bidder_id in bidders:
                    violations.append(Violation(
                        "duplicate_bidder", market_id, t.tender_id,
                        f"bidder {b.bidder_id!r} bids twice",
                    ))
                bidders.add(b.bidder_id)
    return violations
