"""Event ingestion, sessionization, vocabulary and corpus statistics.

Event files are UTF-8 TSV, one record per line::

    session_id <TAB> product_id <TAB> timestamp_ms <TAB> event_type <TAB> shop_id

Blank lines and lines starting with ``#`` are ignored.
"""

from __future__ import annotations

import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

EVENT_TYPES = ("view", "click", "add", "purchase")

BOT_MAX_EVENTS = 100
BOT_MIN_MEDIAN_GAP_MS = 200


@dataclass(frozen=True)
class Event:
    session_id: str
    product_id: str
    timestamp: int
    event_type: str
    shop_id: str

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValidationError(f"negative timestamp {self.timestamp}")
        if not self.product_id:
            raise ValidationError("empty product_id")
        if self.event_type not in EVENT_TYPES:
            raise ValidationError(f"unknown event type {self.event_type!r}")


@dataclass(frozen=True)
class Session:
    session_id: str
    shop_id: str
    events: tuple[str, ...]

    def __post_init__(self):
        if not self.events:
            raise ValidationError(f"session {self.session_id} has no events")

    def __len__(self):
        return len(self.events)


@dataclass(frozen=True)
class ParsedEvents:
    events: list[Event]
    malformed_count: int
    malformed_lines: tuple[int, ...] = ()


@dataclass(frozen=True)
class SessionizeSummary:
    groups: int
    kept: int
    too_short: int
    bot_filtered: int


class Vocabulary:
    """Products kept after frequency filtering, indexed by descending count.

    Ties in count are broken by product id so the index is stable across runs.
    """

    def __init__(self, counts: dict[str, int]):
        order = sorted(counts, key=lambda p: (-counts[p], p))
        self.products: tuple[str, ...] = tuple(order)
        self.counts = np.array([counts[p] for p in order], dtype=np.int64)
        self.counts.flags.writeable = False
        self.index = {p: i for i, p in enumerate(order)}

    def __len__(self):
        return len(self.products)

    def __contains__(self, product_id):
        return product_id in self.index

    def __iter__(self):
        return iter(self.products)

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.products == other.products and np.array_equal(
            self.counts, other.counts
        )

    def count(self, product_id: str) -> int:
        return int(self.counts[self.index[product_id]])

    def encode(self, products: Iterable[str]) -> list[int]:
        """Map product ids to indices, silently skipping out-of-vocabulary ids."""
        return [self.index[p] for p in products if p in self.index]


@dataclass(frozen=True)
class CorpusStats:
    sessions: int
    events: int
    skus: int
    percentiles: tuple[int, int, int]

    def as_row(self) -> dict:
        p25, p50, p75 = self.percentiles
        return {"sessions": self.sessions, "events": self.events, "skus": self.skus, "pct_25_50_75": f"{p25}, {p50}, {p75}"}


def _parse_line(line: str) -> Event:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 5:
        raise ValueError(f"expected 5 fields, got {len(parts)}")
    session_id, product_id, ts, event_type, shop_id = parts
    if not session_id or not shop_id:
        raise ValueError("empty session or shop id")
    return Event(session_id, product_id, int(ts), event_type, shop_id)


def parse_events(lines: Iterable[str], tolerance: float = 0.01) -> ParsedEvents:
    """Parse event records, keeping input order.

    Malformed lines are skipped but counted; if their share of non-blank lines
    exceeds ``tolerance`` the whole input is rejected.
    """
    events = []
    bad = []
    total = 0
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        total += 1
        try:
            events.append(_parse_line(line))
        except ValueError:  # includes ValidationError
            bad.append(lineno)
    if total and len(bad) / total > tolerance:
        raise ValidationError(
            f"{len(bad)} of {total} lines malformed (tolerance {tolerance}); first bad line: {bad[0]}"
        )
    return ParsedEvents(events, len(bad), tuple(bad))


def read_events(path, tolerance: float = 0.01) -> ParsedEvents:
    with open(path, encoding="utf-8") as fh:
        return parse_events(fh, tolerance=tolerance)


def write_events(path, events: Iterable[Event]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for e in events:
            fh.write(f"{e.session_id}\t{e.product_id}\t{e.timestamp}\t{e.event_type}\t{e.shop_id}\n")


def _is_bot(timestamps: Sequence[int], max_events: int, min_median_gap_ms: int) -> bool:
    if len(timestamps) > max_events:
        return True
    if len(timestamps) < 2:
        return False
    return float(np.median(np.diff(timestamps))) < min_median_gap_ms


def sessionize(
    events: Sequence[Event],
    min_length: int = 2,
    bot_threshold: int = BOT_MAX_EVENTS,
    min_median_gap_ms: int = BOT_MIN_MEDIAN_GAP_MS,
) -> tuple[list[Session], SessionizeSummary]:
    """Group events into sessions keyed by (shop_id, session_id).

    Events are ordered by timestamp with ties kept in input order. Sessions with
    more than ``bot_threshold`` events or a median inter-event gap below
    ``min_median_gap_ms`` are dropped as bot traffic; sessions shorter than
    ``min_length`` are dropped afterwards. Output follows first appearance.
    """
    groups: dict[tuple[str, str], list[Event]] = defaultdict(list)
    for e in events:
        groups[(e.shop_id, e.session_id)].append(e)

    sessions = []
    bots = short = 0
    for (shop_id, session_id), evs in groups.items():
        evs = sorted(evs, key=lambda e: e.timestamp)  # stable: ties keep input order
        if _is_bot([e.timestamp for e in evs], bot_threshold, min_median_gap_ms):
            bots += 1
            continue
        if len(evs) < min_length:
            short += 1
            continue
        sessions.append(Session(session_id, shop_id, tuple(e.product_id for e in evs)))
    summary = SessionizeSummary(groups=len(groups), kept=len(sessions), too_short=short, bot_filtered=bots)
    return sessions, summary


def product_counts(sessions: Iterable[Session]) -> Counter:
    counts: Counter = Counter()
    for s in sessions:
        counts.update(s.events)
    return counts


def build_vocab(sessions: Iterable[Session], min_count: int) -> Vocabulary:
    if min_count < 1:
        raise ValidationError(f"min_count must be >= 1, got {min_count}")
    counts = {p: c for p, c in product_counts(sessions).items() if c >= min_count}
    if not counts:
        raise ValidationError(f"no product reaches min_count={min_count}")
    return Vocabulary(counts)


def restrict(sessions: Iterable[Session], vocab: Vocabulary, min_length: int = 1) -> list[Session]:
    """Drop out-of-vocabulary events, then sessions left shorter than ``min_length``."""
    out = []
    for s in sessions:
        kept = tuple(p for p in s.events if p in vocab.index)
        if len(kept) >= max(min_length, 1):
            out.append(Session(s.session_id, s.shop_id, kept))
    return out


def nearest_rank(sorted_values: Sequence[int], pct: float) -> int:
    n = len(sorted_values)
    rank = max(1, math.ceil(pct / 100.0 * n))
    return sorted_values[rank - 1]


def stats(sessions: Sequence[Session]) -> CorpusStats:
    if not sessions:
        raise ValidationError("cannot compute stats of an empty corpus")
    lengths = sorted(len(s) for s in sessions)
    skus = len({p for s in sessions for p in s.events})
    pct = tuple(nearest_rank(lengths, p) for p in (25, 50, 75))
    return CorpusStats(len(sessions), sum(lengths), skus, pct)


# -- corpus and catalog files -------------------------------------------------

def write_sessions(path, sessions: Iterable[Session]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in sessions:
            fh.write(f"{s.shop_id}\t{s.session_id}\t{' '.join(s.events)}\n")


def read_sessions(path) -> list[Session]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ValidationError(f"{path}:{lineno}: expected 3 fields")
            out.append(Session(parts[1], parts[0], tuple(parts[2].split())))
    return out


@dataclass
class Catalog:
    """Per-product activity labels and feature vectors for one shop."""

    products: list[str]
    activities: list[str]
    features: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or len(self.features) != len(self.products):
            raise ValidationError("feature matrix must have one row per product")
        if len(self.activities) != len(self.products):
            raise ValidationError("one activity label per product required")

    def __len__(self):
        return len(self.products)

    def activity_of(self) -> dict[str, str]:
        return dict(zip(self.products, self.activities))

    def subset(self, products: Iterable[str]) -> "Catalog":
        pos = {p: i for i, p in enumerate(self.products)}
        rows = [pos[p] for p in products if p in pos]
        return Catalog([self.products[i] for i in rows], [self.activities[i] for i in rows], self.features[rows])


def write_catalog(path, catalog: Catalog) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p, a, f in zip(catalog.products, catalog.activities, catalog.features):
            fh.write(f"{p}\t{a}\t{','.join(repr(float(x)) for x in f)}\n")


def read_catalog(path) -> Catalog:
    products, acts, feats = [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ValidationError(f"{path}:{lineno}: expected 3 fields")
            products.append(parts[0])
            acts.append(parts[1])
            feats.append([float(x) for x in parts[2].split(",")] if parts[2] else [])
    widths = {len(f) for f in feats}
    if len(widths) > 1:
        raise ValidationError(f"{path}: feature vectors have mixed lengths {sorted(widths)}")
    return Catalog(products, acts, np.array(feats, dtype=np.float64).reshape(len(products), -1))
