"""Query-time top-L recommendation against a precomputed candidate matrix.

Linear and decoupled decoders both reduce to ``scores = matrix @ q`` once the
candidate transform is precomputed, so they share one query path. The
optional graph index turns maximum inner product into nearest neighbour by
norm augmentation: each row ``v`` gains a coordinate ``sqrt(max|v|^2 - |v|^2)``
and the query gains a zero, after which squared L2 distance is
``|q|^2 + max|v|^2 - 2 q.v``.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as tn
from .container import INDEX_MAGIC, build_id, read_container, write_container
from .errors import ContractError, StaleIndexError, UnsupportedDecoderError


@dataclass
class TopLResult:
    items: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.items)

    def to_json(self) -> list[dict]:
        return [{"item": int(i), "score": float(s)} for i, s in zip(self.items, self.scores)]


def augment(matrix: np.ndarray) -> tuple[np.ndarray, float]:
    """Append the norm-completing coordinate; every row then has norm ``max|v|``."""
    sq = np.einsum("ij,ij->i", matrix, matrix)
    top = float(sq.max())
    extra = np.sqrt(np.maximum(top - sq, 0.0))
    return np.ascontiguousarray(np.hstack([matrix, extra[:, None]])), float(np.sqrt(top))


def _levels(n: int, m: int, seed: int) -> np.ndarray:
    u = np.random.Generator(np.random.Philox(seed)).random(n)
    return np.minimum(np.floor(-np.log1p(-u) / np.log(m)), 16).astype(np.int32)


@dataclass
class MipsIndex:
    """Layered proximity graph over norm-augmented candidate vectors."""

    augmented: np.ndarray
    max_norm: float
    m: int
    ef_construction: int
    ef_search: int
    seed: int
    graph: object = field(repr=False)

    def search(self, query: np.ndarray, k: int, ef: int | None = None) -> np.ndarray:
        q = np.ascontiguousarray(np.append(np.asarray(query, dtype=np.float64), 0.0))
        ids, _ = self.graph.search(q, k, ef or self.ef_search)
        return ids

    def export(self) -> dict[str, np.ndarray]:
        tables = self.graph.export()
        return {k: np.asarray(v) for k, v in tables.items()}


def build_mips_index(matrix: np.ndarray, m: int = 16, ef_construction: int = 200,
                     ef_search: int = 256, seed: int = 0, backend=None) -> MipsIndex:
    """Augment and insert every row into the graph (levels drawn from ``seed``)."""
    matrix = np.asarray(matrix, dtype=np.float64)
    if matrix.ndim != 2 or not len(matrix):
        raise ContractError("candidate matrix must be a non-empty 2-d array")
    aug, max_norm = augment(matrix)
    graph_cls = (backend or kernels).LayeredGraph
    graph = graph_cls(aug, _levels(len(aug), m, seed), m)
    graph.build(ef_construction)
    return MipsIndex(aug, max_norm, m, ef_construction, ef_search, seed, graph)


@dataclass
class CandidateIndex:
    """Query-ready candidate matrix ``[M, E]`` plus an optional graph index."""

    matrix: np.ndarray
    model_hash: str = ""
    built_at: float = 0.0
    mips: MipsIndex | None = None

    @property
    def num_items(self) -> int:
        return len(self.matrix)

    def matrix_hash(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.matrix).tobytes()).hexdigest()

    def with_graph(self, **options) -> "CandidateIndex":
        self.mips = build_mips_index(self.matrix, **options)
        return self


def precompute_candidates(model) -> CandidateIndex:
    """Candidate matrix as scored at query time (feed-forward applied for decoupled)."""
    if not model.decoder.indexable:
        raise UnsupportedDecoderError(
            f"{model.decoder.kind} decoder scores candidates non-linearly; "
            "query cost is linear in the pool size and cannot use a dot-product index")
    with tn.no_grad():
        matrix = model.decoder.transform_candidates(model.candidates()).data
    return CandidateIndex(np.ascontiguousarray(matrix.copy()), model.fingerprint(), time.time())


def _as_matrix(index) -> np.ndarray:
    return index.matrix if isinstance(index, CandidateIndex) else np.asarray(index, np.float64)


def topl_exact(query, index, L: int, backend=None) -> TopLResult:
    """Exact top-L by inner product: one scoring pass, bounded-heap selection."""
    if L < 1:
        raise ContractError("L must be >= 1")
    scores = np.ascontiguousarray(_as_matrix(index) @ np.asarray(query, dtype=np.float64))
    ids, vals = (backend or kernels).topl_select(scores, L)
    return TopLResult(ids, vals)


def topl_indexed(index: CandidateIndex, query, L: int, ef: int | None = None,
                 model_hash: str | None = None, backend=None) -> TopLResult:
    """Top-L through the graph, re-ranked by exact inner product."""
    if L < 1:
        raise ContractError("L must be >= 1")
    if model_hash is not None and model_hash != index.model_hash:
        raise StaleIndexError("index was built from a different model")
    if index.mips is None:
        raise ContractError("index has no graph; call with_graph() or use topl_exact")
    q = np.asarray(query, dtype=np.float64)
    cand = np.sort(index.mips.search(q, L, ef))
    scores = np.ascontiguousarray(index.matrix[cand] @ q)
    pos, vals = (backend or kernels).topl_select(scores, L)
    return TopLResult(cand[pos], vals)


def recommend(model, index: CandidateIndex, sequence, L: int = 20,
              exact: bool | None = None) -> TopLResult:
    """Top-L items for one session prefix (item ids)."""
    from .dataset import Sample, pad_batch

    seq = [int(x) for x in sequence]
    if not seq:
        raise ContractError("empty session")
    if any(not 0 <= x < model.num_items for x in seq):
        raise IndexError(f"item id out of range [0, {model.num_items})")
    batch = pad_batch([Sample(tuple(seq[-20:]), 0)], model.pad_id)
    q = model.session_vectors(batch)[0]
    if exact or (exact is None and index.mips is None):
        return topl_exact(q, index, L)
    return topl_indexed(index, q, L, model_hash=model.fingerprint())


def save_index(index: CandidateIndex, path, meta: dict | None = None) -> None:
    arrays = {"matrix": index.matrix}
    header = dict(meta or {})
    header.update({"format": "SBRI1", "version": 1, "model_hash": index.model_hash,
                   "built_at": index.built_at, "build": build_id(),
                   "matrix_hash": index.matrix_hash(), "graph": None})
    if index.mips is not None:
        tables = index.mips.export()
        header["graph"] = {"m": index.mips.m, "ef_construction": index.mips.ef_construction,
                           "ef_search": index.mips.ef_search, "seed": index.mips.seed,
                           "entry": int(tables.pop("entry")),
                           "top_level": int(tables.pop("top_level"))}
        for k, v in tables.items():
            arrays[f"graph_{k}"] = v
    write_container(path, INDEX_MAGIC, header, arrays)


def load_index(path) -> tuple[CandidateIndex, dict]:
    meta, arrays = read_container(path, INDEX_MAGIC)
    index = CandidateIndex(arrays["matrix"], meta["model_hash"], meta["built_at"])
    g = meta.get("graph")
    if g:
        aug, max_norm = augment(index.matrix)
        levels = arrays["graph_levels"].astype(np.int32)
        graph = kernels.LayeredGraph(aug, levels, g["m"])
        graph.restore(arrays["graph_links0"], arrays["graph_count0"], arrays["graph_links_up"],
                      arrays["graph_count_up"], g["entry"], g["top_level"])
        index.mips = MipsIndex(aug, max_norm, g["m"], g["ef_construction"], g["ef_search"],
                               g["seed"], graph)
    return index, meta
