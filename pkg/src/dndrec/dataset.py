"""Raw event ingestion, session preprocessing, temporal splits and batching."""

from __future__ import annotations

import csv
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import NamedTuple, Sequence

import numpy as np

from .container import CORPUS_MAGIC, read_container, write_container
from .errors import ConfigError, IngestionError, PreprocessingError

logger = logging.getLogger(__name__)

MAX_PREFIX = 20


class Event(NamedTuple):
    session: str
    item: str
    timestamp: float


@dataclass
class EventFormat:
    """How to read a delimited event file.

    ``session_col`` names the session column, or the user column when the log is
    sessionized by inactivity gap afterwards. ``date_format`` switches the time
    column from unix seconds to a :func:`datetime.strptime` pattern (UTC).
    """

    delimiter: str = "\t"
    session_col: str = "session_id"
    item_col: str = "item_id"
    time_col: str = "timestamp"
    date_format: str | None = None


@dataclass
class EventLog:
    events: list[Event]
    malformed: int = 0

    def __len__(self) -> int:
        return len(self.events)


def _parse_time(raw: str, fmt: EventFormat) -> float:
    if fmt.date_format:
        dt = datetime.strptime(raw.strip(), fmt.date_format).replace(tzinfo=timezone.utc)
        return dt.timestamp()
    return float(raw)


def ingest_events(path, fmt: EventFormat | None = None) -> EventLog:
    """Load all well-formed rows; malformed rows are skipped and counted."""
    fmt = fmt or EventFormat()
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestionError(f"cannot read {path}: {exc}") from exc
    events: list[Event] = []
    malformed = 0
    with fh:
        reader = csv.DictReader(fh, delimiter=fmt.delimiter)
        cols = reader.fieldnames or []
        for col in (fmt.session_col, fmt.item_col, fmt.time_col):
            if col not in cols:
                raise IngestionError(f"{path}: missing column {col!r} (header: {cols})")
        for row in reader:
            try:
                session = row[fmt.session_col]
                item = row[fmt.item_col]
                ts = _parse_time(row[fmt.time_col], fmt)
            except (TypeError, ValueError, AttributeError):
                malformed += 1
                continue
            if not session or not item or not np.isfinite(ts) or ts < 0:
                malformed += 1
                continue
            events.append(Event(session.strip(), item.strip(), ts))
    if malformed:
        logger.warning("%s: skipped %d malformed rows", path, malformed)
    if not events:
        raise IngestionError(f"{path}: no valid rows")
    return EventLog(events, malformed)


def sessionize_by_gap(log: EventLog, gap: float = 8 * 3600) -> EventLog:
    """Split each user timeline wherever consecutive events are more than ``gap`` apart."""
    if gap <= 0:
        raise ConfigError("gap must be positive")
    by_user: dict[str, list[Event]] = defaultdict(list)
    for ev in log.events:
        by_user[ev.session].append(ev)
    out: list[Event] = []
    for user in sorted(by_user):
        timeline = sorted(by_user[user], key=lambda e: e.timestamp)
        k = 0
        prev = None
        for ev in timeline:
            if prev is not None and ev.timestamp - prev > gap:
                k += 1
            out.append(Event(f"{user}:{k}", ev.item, ev.timestamp))
            prev = ev.timestamp
    return EventLog(out, log.malformed)


# --------------------------------------------------------------------- corpus


@dataclass
class SessionCorpus:
    """Densely indexed sessions.

    ``sessions[i]`` is an int array of item ids below ``num_items``;
    ``start_times``/``end_times`` hold each session's first and last timestamp.
    ``splits`` maps ``train``/``validation``/``test`` to session indices.
    """

    item_keys: list[str]
    sessions: list[np.ndarray]
    start_times: np.ndarray
    end_times: np.ndarray
    session_keys: list[str] = field(default_factory=list)
    splits: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def num_items(self) -> int:
        return len(self.item_keys)

    @property
    def pad_id(self) -> int:
        return self.num_items

    def split_sessions(self, name: str) -> list[np.ndarray]:
        return [self.sessions[i] for i in self.splits[name]]

    def stats(self) -> dict:
        lengths = np.array([len(s) for s in self.sessions])
        n_events = int(lengths.sum())
        out = {
            "events": n_events,
            "sessions": len(self.sessions),
            "items": self.num_items,
            "avg_len": round(n_events / max(1, len(self.sessions)), 2),
        }
        for name, idx in sorted(self.splits.items()):
            out[f"{name}_sessions"] = int(len(idx))
            out[f"{name}_samples"] = int(sum(len(self.sessions[i]) - 1 for i in idx))
        return out


def build_corpus(log: EventLog) -> SessionCorpus:
    """Group events into time-ordered sessions with a first-appearance vocabulary."""
    grouped: dict[str, list[tuple[float, int, str]]] = defaultdict(list)
    for order, ev in enumerate(log.events):
        grouped[ev.session].append((ev.timestamp, order, ev.item))
    raw = []
    for key, evs in grouped.items():
        evs.sort()
        raw.append((evs[0][0], key, [e[2] for e in evs], evs[-1][0]))
    raw.sort(key=lambda r: (r[0], r[1]))
    return _densify([r[1] for r in raw], [r[2] for r in raw],
                    np.array([r[0] for r in raw], dtype=np.float64),
                    np.array([r[3] for r in raw], dtype=np.float64))


def _densify(keys, item_seqs, starts, ends, splits=None) -> SessionCorpus:
    vocab: dict[str, int] = {}
    sessions = []
    for seq in item_seqs:
        ids = []
        for item in seq:
            if item not in vocab:
                vocab[item] = len(vocab)
            ids.append(vocab[item])
        sessions.append(np.array(ids, dtype=np.int64))
    return SessionCorpus(list(vocab), sessions, starts, ends, list(keys), splits or {})


def filter_support(corpus: SessionCorpus, min_item_count: int = 5,
                   min_session_len: int = 2) -> SessionCorpus:
    """Alternate item- and session-filtering until neither removes anything."""
    if min_item_count < 1 or min_session_len < 2:
        raise ConfigError("need min_item_count >= 1 and min_session_len >= 2")
    seqs = [[corpus.item_keys[i] for i in s] for s in corpus.sessions]
    keep = list(range(len(seqs)))
    while True:
        counts = Counter(item for i in keep for item in seqs[i])
        changed = False
        new_keep = []
        for i in keep:
            filtered = [it for it in seqs[i] if counts[it] >= min_item_count]
            if len(filtered) != len(seqs[i]):
                changed = True
                seqs[i] = filtered
            if len(filtered) >= min_session_len:
                new_keep.append(i)
            else:
                changed = True
        keep = new_keep
        if not changed:
            break
    if not keep:
        raise PreprocessingError("corpus is empty after support filtering")
    return _densify([corpus.session_keys[i] for i in keep] if corpus.session_keys else
                    [str(i) for i in keep],
                    [seqs[i] for i in keep], corpus.start_times[keep], corpus.end_times[keep])


def temporal_split(corpus: SessionCorpus, test_fraction: float = 0.1,
                   val_fraction: float = 0.1, seed: int = 0) -> SessionCorpus:
    """Time-based test split, seeded uniform validation sample, train-only vocabulary.

    Test sessions are those starting at or after
    ``t_end - test_fraction * (t_end - t_start)`` over the full event span.
    Items unseen in train are removed from validation/test sessions, which are
    dropped if that leaves fewer than two events. The vocabulary is re-densified
    over train items.
    """
    if not corpus.sessions:
        raise PreprocessingError("empty corpus")
    for frac in (test_fraction, val_fraction):
        if not 0.0 < frac < 1.0:
            raise ConfigError("split fractions must lie in (0, 1)")
    t0 = float(corpus.start_times.min())
    t1 = float(corpus.end_times.max())
    cutoff = t1 - test_fraction * (t1 - t0)
    is_test = corpus.start_times >= cutoff
    test_idx = np.flatnonzero(is_test)
    rest = np.flatnonzero(~is_test)
    rng = np.random.Generator(np.random.Philox(seed))
    n_val = int(round(val_fraction * len(rest)))
    val_idx = np.sort(rng.choice(rest, size=n_val, replace=False)) if n_val else rest[:0]
    train_mask = np.zeros(len(corpus.sessions), dtype=bool)
    train_mask[rest] = True
    train_mask[val_idx] = False
    train_idx = np.flatnonzero(train_mask)
    if not len(train_idx):
        raise PreprocessingError("train split is empty")

    train_items = set()
    for i in train_idx:
        train_items.update(corpus.sessions[i].tolist())

    kept: dict[str, list[int]] = {"train": [], "validation": [], "test": []}
    seqs, keys, starts, ends = [], [], [], []

    def push(name, i, seq):
        kept[name].append(len(seqs))
        seqs.append([corpus.item_keys[j] for j in seq])
        keys.append(corpus.session_keys[i] if corpus.session_keys else str(i))
        starts.append(corpus.start_times[i])
        ends.append(corpus.end_times[i])

    # train sessions first so train items get the low ids
    for i in train_idx:
        push("train", i, corpus.sessions[i])
    for name, idx in (("validation", val_idx), ("test", test_idx)):
        for i in idx:
            seq = [j for j in corpus.sessions[i].tolist() if j in train_items]
            if len(seq) >= 2:
                push(name, i, seq)
    for name, idx in kept.items():
        if not idx:
            raise PreprocessingError(f"{name} split is empty")
    splits = {k: np.array(v, dtype=np.int64) for k, v in kept.items()}
    return _densify(keys, seqs, np.array(starts), np.array(ends), splits)


# -------------------------------------------------------------------- samples


class Sample(NamedTuple):
    input: tuple[int, ...]
    target: int


def expand_prefixes(session: Sequence[int], max_len: int = MAX_PREFIX) -> list[Sample]:
    """One sample per position t >= 1: the (truncated) prefix before t predicts item t."""
    seq = [int(x) for x in session]
    if len(seq) < 2:
        raise ConfigError("session must have at least two events")
    return [Sample(tuple(seq[max(0, t - max_len):t]), seq[t]) for t in range(1, len(seq))]


def corpus_samples(corpus: SessionCorpus, split: str, max_len: int = MAX_PREFIX) -> list[Sample]:
    out: list[Sample] = []
    for s in corpus.split_sessions(split):
        out.extend(expand_prefixes(s, max_len))
    return out


@dataclass
class Batch:
    """Left-padded inputs ``[N, T]`` (pad id fills the front), true lengths, targets."""

    inputs: np.ndarray
    lengths: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.targets)


def pad_batch(samples: Sequence[Sample], pad_id: int) -> Batch:
    lengths = np.array([len(s.input) for s in samples], dtype=np.int64)
    width = int(lengths.max())
    inputs = np.full((len(samples), width), pad_id, dtype=np.int64)
    for row, s in enumerate(samples):
        inputs[row, width - len(s.input):] = s.input
    targets = np.array([s.target for s in samples], dtype=np.int64)
    return Batch(inputs, lengths, targets)


def make_batches(samples: Sequence[Sample], batch_size: int = 200, pad_id: int = 0,
                 rng: np.random.Generator | None = None) -> list[Batch]:
    """Shuffle (when ``rng`` is given) and cut into padded batches."""
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    order = np.arange(len(samples))
    if rng is not None:
        order = rng.permutation(len(samples))
    return [pad_batch([samples[i] for i in order[lo:lo + batch_size]], pad_id)
            for lo in range(0, len(samples), batch_size)]


# ------------------------------------------------------------------ pipeline


def preprocess(log: EventLog, min_item_count: int = 5, min_session_len: int = 2,
               gap: float | None = None, test_fraction: float = 0.1,
               val_fraction: float = 0.1, seed: int = 0) -> SessionCorpus:
    if gap is not None:
        log = sessionize_by_gap(log, gap)
    corpus = filter_support(build_corpus(log), min_item_count, min_session_len)
    return temporal_split(corpus, test_fraction, val_fraction, seed)


def save_corpus(corpus: SessionCorpus, path, meta: dict | None = None) -> None:
    lengths = np.array([len(s) for s in corpus.sessions], dtype=np.int64)
    flat = (np.concatenate(corpus.sessions) if corpus.sessions
            else np.zeros(0, dtype=np.int64)).astype(np.int64)
    arrays = {
        "session_lengths": lengths,
        "session_items": flat,
        "start_times": corpus.start_times.astype(np.float64),
        "end_times": corpus.end_times.astype(np.float64),
    }
    for name, idx in corpus.splits.items():
        arrays[f"split_{name}"] = idx.astype(np.int64)
    header = dict(meta or {})
    header.update({"format": "SBRC1", "version": 1, "item_keys": corpus.item_keys,
                   "session_keys": corpus.session_keys, "stats": corpus.stats()})
    write_container(path, CORPUS_MAGIC, header, arrays)


def load_corpus(path) -> tuple[SessionCorpus, dict]:
    meta, arrays = read_container(path, CORPUS_MAGIC)
    bounds = np.cumsum(arrays["session_lengths"])[:-1]
    sessions = list(np.split(arrays["session_items"], bounds)) if len(
        arrays["session_lengths"]) else []
    splits = {k[len("split_"):]: v for k, v in arrays.items() if k.startswith("split_")}
    corpus = SessionCorpus(meta["item_keys"], sessions, arrays["start_times"],
                           arrays["end_times"], meta["session_keys"], splits)
    return corpus, meta
