# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled query-path kernels: bounded top-L selection and a layered proximity graph.

Mirrors ``dndrec._fallback`` operation for operation. Ordering everywhere is
lexicographic on (key, id) so ties resolve by ascending item id.
"""

import numpy as np

from libc.stdlib cimport free, malloc, realloc


cdef inline bint before(double da, int ia, double db, int ib) noexcept nogil:
    return da < db or (da == db and ia < ib)


# ------------------------------------------------------------- binary heaps

cdef void minheap_push(double* d, int* ids, int* size, double dv, int iv) noexcept nogil:
    cdef int i = size[0]
    cdef int p
    size[0] += 1
    while i > 0:
        p = (i - 1) >> 1
        if before(dv, iv, d[p], ids[p]):
            d[i] = d[p]
            ids[i] = ids[p]
            i = p
        else:
            break
    d[i] = dv
    ids[i] = iv


cdef void minheap_pop(double* d, int* ids, int* size) noexcept nogil:
    cdef int n, i, c
    cdef double dv
    cdef int iv
    size[0] -= 1
    n = size[0]
    if n == 0:
        return
    dv = d[n]
    iv = ids[n]
    i = 0
    while True:
        c = 2 * i + 1
        if c >= n:
            break
        if c + 1 < n and before(d[c + 1], ids[c + 1], d[c], ids[c]):
            c += 1
        if before(d[c], ids[c], dv, iv):
            d[i] = d[c]
            ids[i] = ids[c]
            i = c
        else:
            break
    d[i] = dv
    ids[i] = iv


cdef void maxheap_push(double* d, int* ids, int* size, double dv, int iv) noexcept nogil:
    cdef int i = size[0]
    cdef int p
    size[0] += 1
    while i > 0:
        p = (i - 1) >> 1
        if before(d[p], ids[p], dv, iv):
            d[i] = d[p]
            ids[i] = ids[p]
            i = p
        else:
            break
    d[i] = dv
    ids[i] = iv


cdef void maxheap_pop(double* d, int* ids, int* size) noexcept nogil:
    cdef int n, i, c
    cdef double dv
    cdef int iv
    size[0] -= 1
    n = size[0]
    if n == 0:
        return
    dv = d[n]
    iv = ids[n]
    i = 0
    while True:
        c = 2 * i + 1
        if c >= n:
            break
        if c + 1 < n and before(d[c], ids[c], d[c + 1], ids[c + 1]):
            c += 1
        if before(dv, iv, d[c], ids[c]):
            d[i] = d[c]
            ids[i] = ids[c]
            i = c
        else:
            break
    d[i] = dv
    ids[i] = iv


# ----------------------------------------------------------- top-L select

def topl_select(const double[::1] scores, int L):
    """Top ``L`` of ``scores`` ordered by (score desc, id asc) in one bounded-heap pass."""
    cdef int n = scores.shape[0]
    cdef int k = L if L < n else n
    cdef int size = 0
    cdef int i
    cdef double key
    out_ids = np.empty(k, dtype=np.int64)
    out_val = np.empty(k, dtype=np.float64)
    if k <= 0:
        return out_ids, out_val
    cdef long long[::1] oi = out_ids
    cdef double[::1] ov = out_val
    # max-heap on (-score, id): the root is the worst kept item
    cdef double* hd = <double*> malloc(k * sizeof(double))
    cdef int* hi = <int*> malloc(k * sizeof(int))
    if hd == NULL or hi == NULL:
        free(hd)
        free(hi)
        raise MemoryError()
    with nogil:
        for i in range(n):
            key = -scores[i]
            if size < k:
                maxheap_push(hd, hi, &size, key, i)
            elif before(key, i, hd[0], hi[0]):
                maxheap_pop(hd, hi, &size)
                maxheap_push(hd, hi, &size, key, i)
        i = k - 1
        while size > 0:
            oi[i] = hi[0]
            ov[i] = -hd[0]
            maxheap_pop(hd, hi, &size)
            i -= 1
    free(hd)
    free(hi)
    return out_ids, out_val


# ------------------------------------------------------- proximity graph

cdef class LayeredGraph:
    """Navigable small-world graph over fixed vectors, searched by squared L2.

    Layer 0 keeps up to ``2m`` links per node, upper layers ``m``. Node levels
    are supplied by the caller so construction is reproducible from a seed.
    """

    cdef double[:, ::1] data
    cdef readonly int n, dim, m, m0, top_level, entry
    cdef int[::1] levels
    cdef int[:, ::1] links0
    cdef int[::1] count0
    cdef int[::1] upper_row
    cdef int[:, :, ::1] links_up
    cdef int[:, ::1] count_up
    cdef int[::1] visited
    cdef int tag
    cdef double* cd
    cdef int* ci
    cdef int ccap
    cdef double* wd
    cdef int* wi
    cdef int wcap

    def __cinit__(self):
        self.cd = NULL
        self.ci = NULL
        self.wd = NULL
        self.wi = NULL
        self.ccap = 0
        self.wcap = 0

    def __dealloc__(self):
        free(self.cd)
        free(self.ci)
        free(self.wd)
        free(self.wi)

    def __init__(self, double[:, ::1] data, int[::1] levels, int m):
        cdef int i, n_up = 0
        self.data = data
        self.n = data.shape[0]
        self.dim = data.shape[1]
        self.m = m
        self.m0 = 2 * m
        self.levels = levels
        self.top_level = -1
        self.entry = -1
        max_level = int(np.max(levels)) if self.n else 0
        upper_row = np.full(self.n, -1, dtype=np.int32)
        for i in range(self.n):
            if levels[i] > 0:
                upper_row[i] = n_up
                n_up += 1
        self.upper_row = upper_row
        self.links0 = np.full((self.n, self.m0), -1, dtype=np.int32)
        self.count0 = np.zeros(self.n, dtype=np.int32)
        self.links_up = np.full((max(n_up, 1), max(max_level, 1), m), -1, dtype=np.int32)
        self.count_up = np.zeros((max(n_up, 1), max(max_level, 1)), dtype=np.int32)
        self.visited = np.zeros(self.n, dtype=np.int32)
        self.tag = 0
        self._reserve_candidates(64)
        self._reserve_results(64)

    cdef int _reserve_candidates(self, int cap) except -1:
        cdef double* nd
        cdef int* ni
        if cap <= self.ccap:
            return 0
        nd = <double*> realloc(self.cd, cap * sizeof(double))
        if nd == NULL:
            raise MemoryError()
        self.cd = nd
        ni = <int*> realloc(self.ci, cap * sizeof(int))
        if ni == NULL:
            raise MemoryError()
        self.ci = ni
        self.ccap = cap
        return 0

    cdef int _reserve_results(self, int cap) except -1:
        cdef double* nd
        cdef int* ni
        if cap <= self.wcap:
            return 0
        nd = <double*> realloc(self.wd, cap * sizeof(double))
        if nd == NULL:
            raise MemoryError()
        self.wd = nd
        ni = <int*> realloc(self.wi, cap * sizeof(int))
        if ni == NULL:
            raise MemoryError()
        self.wi = ni
        self.wcap = cap
        return 0

    cdef inline double dist(self, const double* q, int j) noexcept nogil:
        cdef double acc = 0.0, t
        cdef int k
        cdef const double* row = &self.data[j, 0]
        for k in range(self.dim):
            t = q[k] - row[k]
            acc += t * t
        return acc

    cdef inline int* neighbors(self, int node, int level, int* count) noexcept nogil:
        cdef int r
        if level == 0:
            count[0] = self.count0[node]
            return &self.links0[node, 0]
        r = self.upper_row[node]
        count[0] = self.count_up[r, level - 1]
        return &self.links_up[r, level - 1, 0]

    cdef int greedy(self, const double* q, int ep, int level) except -1:
        cdef double best = self.dist(q, ep), d
        cdef int changed = 1, cnt, k, e
        cdef int* nb
        while changed:
            changed = 0
            nb = self.neighbors(ep, level, &cnt)
            for k in range(cnt):
                e = nb[k]
                d = self.dist(q, e)
                if before(d, e, best, ep):
                    best = d
                    ep = e
                    changed = 1
        return ep

    cdef int search_layer(self, const double* q, int* eps, int n_eps, int ef, int level) except -1:
        """Best-first search; leaves up to ``ef`` results in the max-heap (wd, wi)."""
        cdef int csize = 0, wsize = 0, k, cnt, e, c
        cdef double d, dc
        cdef int* nb
        self.tag += 1
        if self.tag == 2147483647:
            self.visited[:] = 0
            self.tag = 1
        self._reserve_results(ef + 1)
        self._reserve_candidates(n_eps + 64)
        for k in range(n_eps):
            e = eps[k]
            if self.visited[e] == self.tag:
                continue
            self.visited[e] = self.tag
            d = self.dist(q, e)
            minheap_push(self.cd, self.ci, &csize, d, e)
            maxheap_push(self.wd, self.wi, &wsize, d, e)
            if wsize > ef:
                maxheap_pop(self.wd, self.wi, &wsize)
        while csize > 0:
            dc = self.cd[0]
            c = self.ci[0]
            if wsize >= ef and before(self.wd[0], self.wi[0], dc, c):
                break
            minheap_pop(self.cd, self.ci, &csize)
            nb = self.neighbors(c, level, &cnt)
            if csize + cnt >= self.ccap:
                self._reserve_candidates(2 * (csize + cnt) + 64)
            for k in range(cnt):
                e = nb[k]
                if self.visited[e] == self.tag:
                    continue
                self.visited[e] = self.tag
                d = self.dist(q, e)
                if wsize < ef or before(d, e, self.wd[0], self.wi[0]):
                    minheap_push(self.cd, self.ci, &csize, d, e)
                    maxheap_push(self.wd, self.wi, &wsize, d, e)
                    if wsize > ef:
                        maxheap_pop(self.wd, self.wi, &wsize)
        return wsize

    cdef int drain_sorted(self, int wsize, double* out_d, int* out_i) except -1:
        """Empty the result heap into ascending (dist, id) order."""
        cdef int k = wsize - 1
        while wsize > 0:
            out_d[k] = self.wd[0]
            out_i[k] = self.wi[0]
            maxheap_pop(self.wd, self.wi, &wsize)
            k -= 1
        return 0

    cdef int select(self, int base, double* cand_d, int* cand_i, int n_cand, int limit,
                    int* out) except -1:
        """Diversity heuristic over ascending candidates, padded with the closest rejects."""
        cdef int n_sel = 0, k, r, e
        cdef bint good
        cdef int* rejected = <int*> malloc((n_cand + 1) * sizeof(int))
        cdef int n_rej = 0
        if rejected == NULL:
            raise MemoryError()
        for k in range(n_cand):
            if n_sel >= limit:
                break
            e = cand_i[k]
            if e == base:
                continue
            good = True
            for r in range(n_sel):
                if self.dist(&self.data[e, 0], out[r]) < cand_d[k]:
                    good = False
                    break
            if good:
                out[n_sel] = e
                n_sel += 1
            else:
                rejected[n_rej] = e
                n_rej += 1
        k = 0
        while n_sel < limit and k < n_rej:
            out[n_sel] = rejected[k]
            n_sel += 1
            k += 1
        free(rejected)
        return n_sel

    cdef int connect(self, int e, int q, int level) except -1:
        """Add link e -> q, re-selecting e's neighbourhood when full."""
        cdef int cnt, limit, k, n_new
        cdef int n_sel
        cdef int* nb = self.neighbors(e, level, &cnt)
        limit = self.m0 if level == 0 else self.m
        for k in range(cnt):
            if nb[k] == q:
                return 0
        if cnt < limit:
            nb[cnt] = q
            self._set_count(e, level, cnt + 1)
            return 0
        cdef double* pd = <double*> malloc((limit + 1) * sizeof(double))
        cdef int* pi = <int*> malloc((limit + 1) * sizeof(int))
        cdef int* picked = <int*> malloc(limit * sizeof(int))
        cdef int size = 0
        cdef const double* base = &self.data[e, 0]
        if pd == NULL or pi == NULL or picked == NULL:
            free(pd)
            free(pi)
            free(picked)
            raise MemoryError()
        for k in range(cnt):
            maxheap_push(pd, pi, &size, self.dist(base, nb[k]), nb[k])
        maxheap_push(pd, pi, &size, self.dist(base, q), q)
        n_new = size
        k = size - 1
        cdef double* sd = <double*> malloc(n_new * sizeof(double))
        cdef int* si = <int*> malloc(n_new * sizeof(int))
        while size > 0:
            sd[k] = pd[0]
            si[k] = pi[0]
            maxheap_pop(pd, pi, &size)
            k -= 1
        n_sel = self.select(e, sd, si, n_new, limit, picked)
        for k in range(n_sel):
            nb[k] = picked[k]
        for k in range(n_sel, limit):
            nb[k] = -1
        self._set_count(e, level, n_sel)
        free(pd)
        free(pi)
        free(picked)
        free(sd)
        free(si)
        return 0

    cdef inline void _set_count(self, int node, int level, int cnt) noexcept nogil:
        if level == 0:
            self.count0[node] = cnt
        else:
            self.count_up[self.upper_row[node], level - 1] = cnt

    def build(self, int ef_construction):
        cdef int i
        for i in range(self.n):
            self.insert(i, ef_construction)

    cdef int insert(self, int node, int ef) except -1:
        cdef int level = self.levels[node]
        cdef int ep, lc, wsize, k, n_sel, limit
        cdef const double* q = &self.data[node, 0]
        cdef double* sd
        cdef int* si
        cdef int* picked
        cdef int* eps
        cdef int n_eps
        if self.entry < 0:
            self.entry = node
            self.top_level = level
            return 0
        ep = self.entry
        lc = self.top_level
        while lc > level:
            ep = self.greedy(q, ep, lc)
            lc -= 1
        eps = <int*> malloc((ef + 1) * sizeof(int))
        sd = <double*> malloc((ef + 1) * sizeof(double))
        si = <int*> malloc((ef + 1) * sizeof(int))
        picked = <int*> malloc((self.m0 + 1) * sizeof(int))
        eps[0] = ep
        n_eps = 1
        lc = level if level < self.top_level else self.top_level
        while lc >= 0:
            wsize = self.search_layer(q, eps, n_eps, ef, lc)
            self.drain_sorted(wsize, sd, si)
            limit = self.m0 if lc == 0 else self.m
            n_sel = self.select(node, sd, si, wsize, self.m, picked)
            for k in range(n_sel):
                if lc == 0:
                    self.links0[node, k] = picked[k]
                else:
                    self.links_up[self.upper_row[node], lc - 1, k] = picked[k]
            self._set_count(node, lc, n_sel)
            for k in range(n_sel):
                self.connect(picked[k], node, lc)
            for k in range(wsize):
                eps[k] = si[k]
            n_eps = wsize
            lc -= 1
        free(eps)
        free(sd)
        free(si)
        free(picked)
        if level > self.top_level:
            self.top_level = level
            self.entry = node
        return 0

    def search(self, const double[::1] q, int k, int ef):
        """Up to ``max(k, ef)`` nearest ids by squared L2, ascending (dist, id)."""
        cdef int ep, lc, wsize
        if self.n == 0:
            return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.float64)
        if ef < k:
            ef = k
        ep = self.entry
        lc = self.top_level
        while lc > 0:
            ep = self.greedy(&q[0], ep, lc)
            lc -= 1
        wsize = self.search_layer(&q[0], &ep, 1, ef, 0)
        out_d = np.empty(wsize, dtype=np.float64)
        out_i32 = np.empty(wsize, dtype=np.int32)
        cdef double[::1] od = out_d
        cdef int[::1] oi = out_i32
        self.drain_sorted(wsize, &od[0], &oi[0])
        return out_i32.astype(np.int64), out_d

    def export(self):
        """Link tables as numpy arrays (for serialisation)."""
        return {
            "levels": np.asarray(self.levels).copy(),
            "links0": np.asarray(self.links0).copy(),
            "count0": np.asarray(self.count0).copy(),
            "links_up": np.asarray(self.links_up).copy(),
            "count_up": np.asarray(self.count_up).copy(),
            "entry": self.entry,
            "top_level": self.top_level,
        }

    def restore(self, links0, count0, links_up, count_up, int entry, int top_level):
        self.links0 = np.ascontiguousarray(links0, dtype=np.int32)
        self.count0 = np.ascontiguousarray(count0, dtype=np.int32)
        self.links_up = np.ascontiguousarray(links_up, dtype=np.int32)
        self.count_up = np.ascontiguousarray(count_up, dtype=np.int32)
        self.entry = entry
        self.top_level = top_level
