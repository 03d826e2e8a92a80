"""Pure-Python versions of the compiled query kernels.

Same algorithms and tie rules as ``_kernels.pyx``; used when the extension is
not built or ``DNDREC_PURE=1`` is set.
"""

from __future__ import annotations

import heapq

import numpy as np


def topl_select(scores, L: int):
    """Top ``L`` by (score desc, id asc) with a bounded heap, then a final sort."""
    scores = np.asarray(scores, dtype=np.float64)
    k = min(L, len(scores))
    if k <= 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
    # min-heap on (score, -id): the root is the worst kept item
    heap: list[tuple[float, int]] = []
    for i, s in enumerate(scores.tolist()):
        key = (s, -i)
        if len(heap) < k:
            heapq.heappush(heap, key)
        elif key > heap[0]:
            heapq.heapreplace(heap, key)
    heap.sort(reverse=True)
    ids = np.array([-i for _, i in heap], dtype=np.int64)
    vals = np.array([s for s, _ in heap], dtype=np.float64)
    return ids, vals


class LayeredGraph:
    """Navigable small-world graph; see the compiled twin for the layout."""

    def __init__(self, data, levels, m: int):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.n, self.dim = self.data.shape
        self.levels = np.asarray(levels, dtype=np.int32)
        self.m = m
        self.m0 = 2 * m
        self.entry = -1
        self.top_level = -1
        self.links: list[list[list[int]]] = [
            [[] for _ in range(int(lv) + 1)] for lv in self.levels]

    def _dist(self, q, ids):
        diff = self.data[ids] - q
        return np.einsum("ij,ij->i", diff, diff)

    def _d1(self, q, j) -> float:
        diff = self.data[j] - q
        return float(diff @ diff)

    def _greedy(self, q, ep: int, level: int) -> int:
        best = self._d1(q, ep)
        changed = True
        while changed:
            changed = False
            for e in self.links[ep][level]:
                d = self._d1(q, e)
                if (d, e) < (best, ep):
                    best, ep, changed = d, e, True
        return ep

    def _search_layer(self, q, eps, ef: int, level: int) -> list[tuple[float, int]]:
        visited = set()
        cand: list[tuple[float, int]] = []
        res: list[tuple[float, int]] = []  # max-heap via negation
        for e in eps:
            if e in visited:
                continue
            visited.add(e)
            d = self._d1(q, e)
            heapq.heappush(cand, (d, e))
            heapq.heappush(res, (-d, -e))
            if len(res) > ef:
                heapq.heappop(res)
        while cand:
            dc, c = cand[0]
            worst = (-res[0][0], -res[0][1])
            if len(res) >= ef and worst < (dc, c):
                break
            heapq.heappop(cand)
            fresh = [e for e in self.links[c][level] if e not in visited]
            if not fresh:
                continue
            visited.update(fresh)
            for d, e in zip(self._dist(q, fresh).tolist(), fresh):
                worst = (-res[0][0], -res[0][1])
                if len(res) < ef or (d, e) < worst:
                    heapq.heappush(cand, (d, e))
                    heapq.heappush(res, (-d, -e))
                    if len(res) > ef:
                        heapq.heappop(res)
        return sorted((-d, -e) for d, e in res)

    def _select(self, base: int, cands: list[tuple[float, int]], limit: int) -> list[int]:
        chosen: list[int] = []
        rejected: list[int] = []
        for d, e in cands:
            if len(chosen) >= limit:
                break
            if e == base:
                continue
            if all(self._d1(self.data[e], r) >= d for r in chosen):
                chosen.append(e)
            else:
                rejected.append(e)
        for e in rejected:
            if len(chosen) >= limit:
                break
            chosen.append(e)
        return chosen

    def _connect(self, e: int, q: int, level: int) -> None:
        nb = self.links[e][level]
        if q in nb:
            return
        limit = self.m0 if level == 0 else self.m
        if len(nb) < limit:
            nb.append(q)
            return
        pool = nb + [q]
        dists = self._dist(self.data[e], pool).tolist()
        self.links[e][level] = self._select(e, sorted(zip(dists, pool)), limit)

    def _insert(self, node: int, ef: int) -> None:
        level = int(self.levels[node])
        if self.entry < 0:
            self.entry, self.top_level = node, level
            return
        q = self.data[node]
        ep = self.entry
        for lc in range(self.top_level, level, -1):
            ep = self._greedy(q, ep, lc)
        eps = [ep]
        for lc in range(min(level, self.top_level), -1, -1):
            found = self._search_layer(q, eps, ef, lc)
            picked = self._select(node, found, self.m)
            self.links[node][lc] = list(picked)
            for e in picked:
                self._connect(e, node, lc)
            eps = [e for _, e in found]
        if level > self.top_level:
            self.top_level, self.entry = level, node

    def build(self, ef_construction: int) -> None:
        for i in range(self.n):
            self._insert(i, ef_construction)

    def search(self, q, k: int, ef: int):
        if self.n == 0:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
        q = np.asarray(q, dtype=np.float64)
        ef = max(ef, k)
        ep = self.entry
        for lc in range(self.top_level, 0, -1):
            ep = self._greedy(q, ep, lc)
        found = self._search_layer(q, [ep], ef, 0)
        return (np.array([e for _, e in found], dtype=np.int64),
                np.array([d for d, _ in found], dtype=np.float64))

    def export(self):
        n_up = int((self.levels > 0).sum())
        max_level = max(int(self.levels.max()) if self.n else 0, 1)
        links0 = np.full((self.n, self.m0), -1, dtype=np.int32)
        count0 = np.zeros(self.n, dtype=np.int32)
        links_up = np.full((max(n_up, 1), max_level, self.m), -1, dtype=np.int32)
        count_up = np.zeros((max(n_up, 1), max_level), dtype=np.int32)
        row = 0
        for i, per_level in enumerate(self.links):
            count0[i] = len(per_level[0])
            links0[i, :len(per_level[0])] = per_level[0]
            if len(per_level) > 1:
                for lv in range(1, len(per_level)):
                    count_up[row, lv - 1] = len(per_level[lv])
                    links_up[row, lv - 1, :len(per_level[lv])] = per_level[lv]
                row += 1
        return {"levels": self.levels.copy(), "links0": links0, "count0": count0,
                "links_up": links_up, "count_up": count_up,
                "entry": self.entry, "top_level": self.top_level}

    def restore(self, links0, count0, links_up, count_up, entry: int, top_level: int):
        row = 0
        for i in range(self.n):
            lv = int(self.levels[i])
            self.links[i][0] = links0[i, :count0[i]].tolist()
            if lv > 0:
                for k in range(1, lv + 1):
                    self.links[i][k] = links_up[row, k - 1, :count_up[row, k - 1]].tolist()
                row += 1
        self.entry, self.top_level = int(entry), int(top_level)
