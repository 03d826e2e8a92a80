"""Synthetic session logs with planted structure, for tests, demos and benchmarks."""

from __future__ import annotations

import csv

import numpy as np

from .dataset import Event, EventLog, SessionCorpus, _densify, preprocess


def markov_events(num_items: int = 500, num_sessions: int = 5000, seed: int = 0,
                  latent_dim: int = 16, sharpness: float = 12.0, min_len: int = 2,
                  max_len: int = 4, session_gap: float = 60.0) -> EventLog:
    """Sessions from a first-order Markov chain with planted item similarity.

    Items get random unit vectors ``z``; the chain moves from ``i`` to ``j != i``
    with probability proportional to ``exp(sharpness * z_i . z_j)``, so
    transitions are symmetric and low rank. Start items are uniform. Sessions
    are spaced ``session_gap`` seconds apart with one second between clicks,
    so a temporal split cuts the log by position.
    """
    rng = np.random.Generator(np.random.Philox(seed))
    z = rng.normal(size=(num_items, latent_dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    logits = sharpness * (z @ z.T)
    np.fill_diagonal(logits, -np.inf)
    probs = np.exp(logits - logits.max(axis=1, keepdims=True))
    cdf = np.cumsum(probs / probs.sum(axis=1, keepdims=True), axis=1)
    events = []
    t = 0.0
    for s in range(num_sessions):
        length = int(rng.integers(min_len, max_len + 1))
        item = int(rng.integers(num_items))
        for pos in range(length):
            events.append(Event(f"s{s}", f"i{item}", t + pos))
            item = min(int(np.searchsorted(cdf[item], rng.random())), num_items - 1)
        t += session_gap
    return EventLog(events)


def markov_corpus(num_items: int = 500, num_sessions: int = 5000, seed: int = 0,
                  split_seed: int = 0, **options) -> SessionCorpus:
    """:func:`markov_events` run through the standard preprocessing chain."""
    log = markov_events(num_items, num_sessions, seed, **options)
    return preprocess(log, min_item_count=5, min_session_len=2, seed=split_seed)


def corpus_from_sessions(sessions, splits: dict[str, list[int]] | None = None) -> SessionCorpus:
    """Wrap integer sessions directly, keeping ids (items are ``0..max``).

    Without ``splits`` every session is used for train, validation and test,
    which is what memorization checks want.
    """
    seqs = [[int(x) for x in s] for s in sessions]
    m = 1 + max(max(s) for s in seqs)
    # seed the vocabulary in id order so dense ids equal the given ids
    keys = [str(i) for i in range(m)]
    corpus = _densify(["vocab"] + [str(i) for i in range(len(seqs))], [keys] + [
        [str(x) for x in s] for s in seqs], np.zeros(len(seqs) + 1), np.zeros(len(seqs) + 1))
    corpus.sessions = corpus.sessions[1:]
    corpus.session_keys = corpus.session_keys[1:]
    corpus.start_times = np.arange(len(seqs), dtype=np.float64)
    corpus.end_times = corpus.start_times.copy()
    if splits is None:
        every = np.arange(len(seqs), dtype=np.int64)
        splits = {"train": every, "validation": every, "test": every}
    corpus.splits = {k: np.asarray(v, dtype=np.int64) for k, v in splits.items()}
    return corpus


def memorization_sessions(num_sessions: int = 50, num_items: int = 60, length: int = 5,
                          seed: int = 0) -> list[list[int]]:
    """Sessions whose every prefix determines its next item.

    Each session starts with its own first item and continues with random
    items, so the whole training set is learnable with zero error.
    """
    if num_items < num_sessions:
        raise ValueError("need at least one distinct start item per session")
    rng = np.random.Generator(np.random.Philox(seed))
    starts = rng.permutation(num_items)[:num_sessions]
    return [[int(s)] + rng.integers(num_items, size=length - 1).tolist() for s in starts]


def write_events_tsv(log: EventLog, path, session_col: str = "session_id") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow([session_col, "item_id", "timestamp"])
        for ev in log.events:
            w.writerow([ev.session, ev.item, f"{ev.timestamp:.0f}"])
