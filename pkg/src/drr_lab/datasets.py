"""Rating-log ingestion, splits, per-user sessions and run-pattern analysis."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class DatasetError(ValueError):
    pass


@dataclass(frozen=True)
class Scale:
    min_rating: float
    max_rating: float
    positive_threshold: float
    # Jester counts only ratings strictly above the threshold as positive
    strict: bool = False

    def __post_init__(self):
        if not self.min_rating <= self.positive_threshold <= self.max_rating:
            raise DatasetError("positive_threshold outside the rating scale")

    def is_positive(self, rating) -> np.ndarray | bool:
        if self.strict:
            return rating > self.positive_threshold
        return rating >= self.positive_threshold


FIVE_STAR = Scale(1.0, 5.0, 4.0)
JESTER = Scale(-10.0, 10.0, 0.0, strict=True)


@dataclass(frozen=True)
class RatingEvent:
    user_id: int
    item_id: int
    rating: float
    timestamp: int = 0


@dataclass(eq=False)
class Dataset:
    """Columnar rating log in canonical (user, timestamp, file order) order.

    ``users``/``items`` hold dense ids; ``user_ids``/``item_ids`` map a dense id
    back to the raw id string from the source file.
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    timestamps: np.ndarray
    num_users: int
    num_items: int
    scale: Scale
    user_ids: list[str] = field(default_factory=list)
    item_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.users)
        if not (len(self.items) == len(self.ratings) == len(self.timestamps) == n):
            raise DatasetError("column lengths differ")
        if n:
            if self.users.max() >= self.num_users or self.items.max() >= self.num_items:
                raise DatasetError("id exceeds declared count")
            if self.ratings.min() < self.scale.min_rating or self.ratings.max() > self.scale.max_rating:
                raise DatasetError("rating outside declared scale")

    def __len__(self) -> int:
        return len(self.users)

    @property
    def events(self) -> list[RatingEvent]:
        return [RatingEvent(int(u), int(i), float(r), int(t))
                for u, i, r, t in zip(self.users, self.items, self.ratings, self.timestamps)]

    @property
    def positive(self) -> np.ndarray:
        return np.asarray(self.scale.is_positive(self.ratings), dtype=bool)

    def subset(self, mask_or_index) -> "Dataset":
        """Row view sharing id space and scale (used for splits)."""
        sel = np.asarray(mask_or_index)
        if sel.dtype == bool:
            sel = np.flatnonzero(sel)
        sel = np.sort(sel)
        return Dataset(self.users[sel], self.items[sel], self.ratings[sel], self.timestamps[sel],
                       self.num_users, self.num_items, self.scale, self.user_ids, self.item_ids)

    def same_as(self, other: "Dataset") -> bool:
        return (self.num_users == other.num_users and self.num_items == other.num_items
                and self.scale == other.scale
                and self.user_ids == other.user_ids and self.item_ids == other.item_ids
                and np.array_equal(self.users, other.users) and np.array_equal(self.items, other.items)
                and np.array_equal(self.ratings, other.ratings)
                and np.array_equal(self.timestamps, other.timestamps))

    def rating_lookup(self) -> dict[tuple[int, int], float]:
        """(user, item) -> rating; for duplicated pairs the latest event wins."""
        return {(int(u), int(i)): float(r) for u, i, r in zip(self.users, self.items, self.ratings)}

    def user_slices(self) -> list[slice]:
        """Row range of each user's events (rows are sorted by user)."""
        bounds = np.searchsorted(self.users, np.arange(self.num_users + 1))
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]


def build_dataset(rows: Iterable[tuple[str, str, float, int]], scale: Scale) -> Dataset:
    """Canonicalize raw (user, item, rating, timestamp) rows.

    User ids follow first appearance in the input. Rows are stably sorted by
    (user, timestamp) so ties keep input order, and item ids then follow first
    appearance in that sorted order. Writing the canonical CSV and parsing it
    back therefore reproduces the same ids.
    """
    umap: dict[str, int] = {}
    us, raw_items, rs, ts = [], [], [], []
    for ru, ri, r, t in rows:
        us.append(umap.setdefault(ru, len(umap)))
        raw_items.append(ri)
        rs.append(r)
        ts.append(t)
    if not us:
        raise DatasetError("no events")
    users = np.asarray(us, dtype=np.int64)
    timestamps = np.asarray(ts, dtype=np.int64)
    order = np.lexsort((np.arange(len(users)), timestamps, users))
    imap: dict[str, int] = {}
    items = np.fromiter((imap.setdefault(raw_items[j], len(imap)) for j in order), dtype=np.int64, count=len(order))
    return Dataset(users[order], items, np.asarray(rs, dtype=np.float64)[order], timestamps[order],
                   len(umap), len(imap), scale, list(umap), list(imap))


def _check_rating(r: float, scale: Scale, path, lineno: int) -> float:
    if not scale.min_rating <= r <= scale.max_rating:
        raise DatasetError(f"{path}:{lineno}: rating {r} outside [{scale.min_rating}, {scale.max_rating}]")
    return r


def _parse_delimited(path, sep: str, scale: Scale) -> Dataset:
    rows = []
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split(sep)
            if len(parts) != 4:
                raise DatasetError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            try:
                r = float(parts[2])
                t = int(parts[3])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: unparseable rating/timestamp") from None
            rows.append((parts[0].strip(), parts[1].strip(), _check_rating(r, scale, path, lineno), t))
    if not rows:
        raise DatasetError(f"{path}: no events")
    return build_dataset(rows, scale)


def parse_movielens_100k(path) -> Dataset:
    """``u.data``: user<TAB>item<TAB>rating<TAB>timestamp."""
    return _parse_delimited(path, "\t", FIVE_STAR)


def parse_movielens_1m(path) -> Dataset:
    """``ratings.dat``: UserID::MovieID::Rating::Timestamp."""
    return _parse_delimited(path, "::", FIVE_STAR)


@dataclass(frozen=True)
class CsvSchema:
    """Column names (header mode) or 0-based indices (headerless mode)."""

    user: str | int = "user"
    item: str | int = "item"
    rating: str | int = "rating"
    timestamp: str | int | None = "timestamp"
    delimiter: str = ","
    has_header: bool = True


def parse_generic_csv(path, schema: CsvSchema = CsvSchema(), scale: Scale = FIVE_STAR) -> Dataset:
    """Any delimited export. A missing timestamp column yields zeros (file order kept)."""
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        start = 1
        if schema.has_header:
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                raise DatasetError(f"{path}: no events") from None
            start = 2

            def col(name):
                if name is None:
                    return None
                if isinstance(name, int):
                    return name
                if name not in header:
                    return -1
                return header.index(name)

            idx = {k: col(getattr(schema, k)) for k in ("user", "item", "rating", "timestamp")}
            for k in ("user", "item", "rating"):
                if idx[k] == -1:
                    raise DatasetError(f"{path}: missing column {getattr(schema, k)!r}")
            if idx["timestamp"] == -1:
                idx["timestamp"] = None
        else:
            idx = {k: getattr(schema, k) for k in ("user", "item", "rating", "timestamp")}
        rows = []
        for lineno, rec in enumerate(reader, start):
            if not rec or all(not f.strip() for f in rec):
                continue
            try:
                u = rec[idx["user"]].strip()
                i = rec[idx["item"]].strip()
                r = float(rec[idx["rating"]])
                t = int(float(rec[idx["timestamp"]])) if idx["timestamp"] is not None else 0
            except IndexError:
                raise DatasetError(f"{path}:{lineno}: missing column") from None
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: unparseable number") from None
            rows.append((u, i, _check_rating(r, scale, path, lineno), t))
    if not rows:
        raise DatasetError(f"{path}: no events")
    return build_dataset(rows, scale)


def _fmt_num(x: float) -> str:
    return repr(float(x)) if not float(x).is_integer() else str(int(x))


def to_canonical_csv(ds: Dataset) -> str:
    """Raw ids, ``user,item,rating,timestamp`` header, ``\\n`` endings."""
    buf = io.StringIO()
    buf.write("user,item,rating,timestamp\n")
    for u, i, r, t in zip(ds.users, ds.items, ds.ratings, ds.timestamps):
        buf.write(f"{ds.user_ids[u]},{ds.item_ids[i]},{_fmt_num(r)},{int(t)}\n")
    return buf.getvalue()


def write_canonical_csv(ds: Dataset, path) -> None:
    Path(path).write_text(to_canonical_csv(ds), encoding="utf-8", newline="\n")


def read_canonical_csv(path, scale: Scale = FIVE_STAR) -> Dataset:
    return parse_generic_csv(path, CsvSchema(), scale)


# ---------------------------------------------------------------- splits

@dataclass(eq=False)
class Split:
    train: Dataset
    test: Dataset
    seed: int
    fraction: float
    train_index: np.ndarray
    test_index: np.ndarray


def split_random(ds: Dataset, fraction: float, seed: int) -> Split:
    """Uniform random partition of events; ``round(fraction * N)`` go to train."""
    if not 0.0 < fraction < 1.0:
        raise DatasetError(f"fraction must lie in (0, 1), got {fraction}")
    n = len(ds)
    n_train = int(np.floor(fraction * n + 0.5))
    n_train = min(max(n_train, 1), n - 1) if n >= 2 else n_train
    perm = np.random.default_rng(seed).permutation(n)
    tr = np.sort(perm[:n_train])
    te = np.sort(perm[n_train:])
    return Split(ds.subset(tr), ds.subset(te), seed, fraction, tr, te)


# ---------------------------------------------------------------- sessions

@dataclass
class Session:
    user_id: int
    bootstrap: list[int]
    remainder_items: list[int]
    remainder_ratings: list[float]


def build_sessions(ds: Dataset, n: int) -> tuple[list[Session], int]:
    """One session per user with at least ``n`` positive events.

    Returns (sessions, skipped_user_count).
    """
    if n < 1:
        raise DatasetError("n must be >= 1")
    pos = ds.positive
    sessions: list[Session] = []
    skipped = 0
    for u, sl in enumerate(ds.user_slices()):
        if sl.stop == sl.start:
            continue
        p_rows = np.flatnonzero(pos[sl])
        if len(p_rows) < n:
            skipped += 1
            continue
        cut = p_rows[n - 1] + 1
        items = ds.items[sl]
        ratings = ds.ratings[sl]
        sessions.append(Session(u, [int(i) for i in items[p_rows[:n]]],
                                [int(i) for i in items[cut:]], [float(r) for r in ratings[cut:]]))
    log.info("built %d sessions, skipped %d users with < %d positives", len(sessions), skipped, n)
    return sessions, skipped


@dataclass
class EvalSession:
    """Offline-evaluation episode: train-side bootstrap, held-out candidates."""

    user_id: int
    bootstrap: list[int]
    candidates: list[int]
    ratings: dict[int, float]


def build_eval_sessions(split: Split, n: int, min_candidates: int = 1) -> tuple[list[EvalSession], int]:
    """Bootstrap from the user's latest ``n`` train positives; candidates are the user's test items."""
    train, test = split.train, split.test
    pos = train.positive
    tr_slices = train.user_slices()
    te_slices = test.user_slices()
    out: list[EvalSession] = []
    skipped = 0
    for u in range(train.num_users):
        te = te_slices[u]
        if te.stop == te.start:
            continue
        tr = tr_slices[u]
        p_rows = np.flatnonzero(pos[tr])
        cand_items = test.items[te]
        ratings: dict[int, float] = {}
        for i, r in zip(cand_items, test.ratings[te]):
            ratings[int(i)] = float(r)
        if len(p_rows) < n or len(ratings) < min_candidates:
            skipped += 1
            continue
        boot = [int(i) for i in train.items[tr][p_rows[-n:]]]
        out.append(EvalSession(u, boot, sorted(ratings), ratings))
    return out, skipped


# ---------------------------------------------------------------- run patterns

@dataclass
class PatternRow:
    run_length: int
    polarity: str
    mean_rating: float
    count: int


def analyze_sequential_patterns(ds: Dataset, max_run: int) -> tuple[list[PatternRow], float]:
    """Mean rating of an event given the run of same-polarity events before it.

    An event preceded by a maximal run of m positives (negatives) counts toward
    every bucket 1..min(m, max_run) of that polarity. Returns the rows for both
    polarities and the global mean rating.
    """
    if max_run < 1:
        raise DatasetError("max_run must be >= 1")
    sums = {"positive": np.zeros(max_run + 1), "negative": np.zeros(max_run + 1)}
    counts = {"positive": np.zeros(max_run + 1, dtype=np.int64), "negative": np.zeros(max_run + 1, dtype=np.int64)}
    pos = ds.positive
    for sl in ds.user_slices():
        run, polarity = 0, None
        for r, p in zip(ds.ratings[sl], pos[sl]):
            if run:
                m = min(run, max_run)
                sums[polarity][1:m + 1] += r
                counts[polarity][1:m + 1] += 1
            cur = "positive" if p else "negative"
            run = run + 1 if cur == polarity else 1
            polarity = cur
    rows = []
    for polarity in ("positive", "negative"):
        for m in range(1, max_run + 1):
            c = int(counts[polarity][m])
            mean = float(sums[polarity][m] / c) if c else float("nan")
            rows.append(PatternRow(m, polarity, mean, c))
    return rows, float(ds.ratings.mean())


def write_pattern_csv(rows: Sequence[PatternRow], global_mean: float, path) -> None:
    lines = ["run_length,polarity,mean_rating,count"]
    lines += [f"{r.run_length},{r.polarity},{r.mean_rating!r},{r.count}" for r in rows]
    lines.append(f"0,global,{global_mean!r},0")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
