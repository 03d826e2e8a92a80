"""Top-K metrics and the training-free baselines (POP, S-POP, Item-KNN)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import sparse

from .dataset import SessionCorpus, corpus_samples, make_batches
from .errors import ContractError


@dataclass
class RankResult:
    rank: int
    k: int

    @property
    def hit(self) -> bool:
        return self.rank <= self.k


def rank_of_target(scores, target: int, k: int = 20) -> RankResult:
    """1-based rank; equal scores rank lower ids first."""
    scores = np.asarray(scores)
    if not 0 <= target < len(scores):
        raise ContractError(f"target {target} outside [0, {len(scores)})")
    st = scores[target]
    higher = int((scores > st).sum())
    tied_before = int((scores[:target] == st).sum())
    return RankResult(1 + higher + tied_before, k)


def batch_ranks(scores: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Vectorised :func:`rank_of_target` over rows of ``scores [N, M]``."""
    targets = np.asarray(targets)
    n, m = scores.shape
    if len(targets) and (targets.min() < 0 or targets.max() >= m):
        raise ContractError("target outside the candidate range")
    st = scores[np.arange(n), targets][:, None]
    higher = (scores > st).sum(axis=1)
    tied_before = ((scores == st) & (np.arange(m)[None, :] < targets[:, None])).sum(axis=1)
    return 1 + higher + tied_before


@dataclass
class MetricReport:
    """Hit rate and MRR at ``k`` as fractions (``percent()`` gives table units)."""

    hr: float
    mrr: float
    n: int
    k: int = 20
    model: str = ""
    dataset: str = ""
    extra: dict = field(default_factory=dict)

    def percent(self) -> tuple[float, float]:
        return 100.0 * self.hr, 100.0 * self.mrr

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def csv_header(self) -> list[str]:
        return ["model", "dataset", f"HR@{self.k}", f"MRR@{self.k}"]

    def csv_row(self) -> list[str]:
        hr, mrr = self.percent()
        return [self.model, self.dataset, f"{hr:.2f}", f"{mrr:.2f}"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.csv_header())
        w.writerow(self.csv_row())
        return buf.getvalue()


def metrics_at_k(ranks, k: int = 20, **labels) -> MetricReport:
    ranks = np.asarray(ranks)
    if not len(ranks):
        raise ContractError("no ranks to aggregate")
    hit = ranks <= k
    # fixed-order float sums keep repeated evaluations bit-identical
    hr = float(hit.sum()) / len(ranks)
    mrr = float(np.where(hit, 1.0 / ranks, 0.0).sum()) / len(ranks)
    return MetricReport(hr, mrr, int(len(ranks)), k, **labels)


# ------------------------------------------------------------------ baselines


def item_counts(sessions, num_items: int) -> np.ndarray:
    counts = np.zeros(num_items, dtype=np.float64)
    for s in sessions:
        np.add.at(counts, np.asarray(s), 1.0)
    return counts


class Pop:
    """Train-set popularity; the same ranking for every query."""

    name = "POP"

    def __init__(self, corpus: SessionCorpus):
        self.counts = item_counts(corpus.split_sessions("train"), corpus.num_items)

    def scores(self, prefix) -> np.ndarray:
        return self.counts.copy()

    def score(self, batch) -> np.ndarray:
        return np.broadcast_to(self.counts, (len(batch), len(self.counts))).copy()


def pop_scores(corpus: SessionCorpus) -> np.ndarray:
    return Pop(corpus).counts


class SPop:
    """In-prefix frequency; ties (including all unseen items) fall back to POP."""

    name = "S-POP"

    def __init__(self, corpus: SessionCorpus):
        pop = item_counts(corpus.split_sessions("train"), corpus.num_items)
        # strictly below 1 so it can only break ties between equal prefix counts
        self.tiebreak = pop / (pop.max() + 1.0)

    def scores(self, prefix) -> np.ndarray:
        if len(prefix) == 0:
            raise ContractError("empty prefix")
        out = self.tiebreak.copy()
        np.add.at(out, np.asarray(prefix), 1.0)
        return out

    def score(self, batch) -> np.ndarray:
        n = len(batch)
        out = np.tile(self.tiebreak, (n, 1))
        width = batch.inputs.shape[1]
        for i in range(n):
            ids = batch.inputs[i, width - batch.lengths[i]:]
            np.add.at(out[i], ids, 1.0)
        return out


def spop_scores(prefix, corpus: SessionCorpus) -> np.ndarray:
    return SPop(corpus).scores(prefix)


class ItemKNN:
    """Session co-occurrence cosine to the last item of the prefix.

    ``score(j) = |S_i & S_j| / sqrt(|S_i| |S_j|)`` over train sessions, self excluded.
    """

    name = "Item-KNN"

    def __init__(self, corpus: SessionCorpus):
        sessions = corpus.split_sessions("train")
        m = corpus.num_items
        rows, cols = [], []
        for r, s in enumerate(sessions):
            uniq = np.unique(s)
            rows.extend([r] * len(uniq))
            cols.extend(uniq.tolist())
        inc = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(sessions), m))
        self.co = (inc.T @ inc).tocsr()
        self.support = np.asarray(inc.sum(axis=0)).ravel()
        self.num_items = m
        self.cold_queries = 0

    def scores(self, prefix) -> np.ndarray:
        i = int(prefix[-1])
        if not 0 <= i < self.num_items or self.support[i] == 0:
            self.cold_queries += 1
            return np.zeros(self.num_items)
        row = self.co.getrow(i).toarray().ravel()
        denom = np.sqrt(self.support[i] * np.maximum(self.support, 1.0))
        out = np.where(self.support > 0, row / denom, 0.0)
        out[i] = 0.0
        return out

    def score(self, batch) -> np.ndarray:
        return np.stack([self.scores(row[-1:]) for row in batch.inputs])


def itemknn_scores(prefix, model: ItemKNN) -> np.ndarray:
    return model.scores(prefix)


# ---------------------------------------------------------------- evaluation


def evaluate(scorer, corpus: SessionCorpus, split: str = "test", k: int = 20,
             batch_size: int = 500, model_name: str = "", dataset: str = "",
             samples=None) -> MetricReport:
    """Score every prefix sample of ``split`` and aggregate HR@k / MRR@k.

    ``scorer`` is anything with ``score(batch) -> [N, M]``; trained models score in
    eval mode (no dropout). Only ranks matter, so log-probabilities, logits and
    probabilities give identical reports.
    """
    samples = corpus_samples(corpus, split) if samples is None else samples
    if not samples:
        raise ContractError(f"split {split!r} has no samples")
    ranks = []
    for batch in make_batches(samples, batch_size, corpus.pad_id):
        ranks.append(batch_ranks(scorer.score(batch), batch.targets))
    name = model_name or getattr(scorer, "name", type(scorer).__name__)
    report = metrics_at_k(np.concatenate(ranks), k, model=name, dataset=dataset)
    if isinstance(scorer, ItemKNN):
        report.extra["cold_queries"] = scorer.cold_queries
    return report
