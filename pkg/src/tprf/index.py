"""Exact maximum-inner-product search over a :class:`VectorStore`."""

from __future__ import annotations

from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .store import VectorStore


@dataclass(frozen=True)
class ScoredList:
    """Ranked result for one query, best first.

    ``rows`` are the store row indices behind ``ids``; they let callers fetch
    feedback vectors without another id lookup.
    """

    query_id: str
    ids: tuple[str, ...]
    scores: tuple[float, ...]
    rows: tuple[int, ...] = field(default=(), repr=False, compare=False)

    @property
    def items(self) -> list[tuple[str, float]]:
        return list(zip(self.ids, self.scores))

    def __len__(self) -> int:
        return len(self.ids)


class DenseIndex:
    """Flat inner-product index. Read-only after construction, so ``search``
    may be called from several threads at once."""

    def __init__(self, store: VectorStore):
        self.store = store
        # id_rank[row] = position of that row's id in ascending id order (tie-break key)
        order = sorted(range(len(store)), key=store.ids.__getitem__)
        self._id_rank = np.empty(len(store), dtype=np.int64)
        self._id_rank[order] = np.arange(len(store))

    @property
    def dim(self) -> int:
        return self.store.dim

    def __len__(self) -> int:
        return len(self.store)

    def scores(self, query: np.ndarray) -> np.ndarray:
        q = np.asarray(query, dtype=np.float32)
        if q.shape != (self.dim,):
            raise ValidationError(f"query has shape {q.shape}, index dim is {self.dim}")
        return self.store.data @ q

    def search(self, query: np.ndarray, k: int, query_id: str = "") -> ScoredList:
        if k < 1:
            raise ValidationError(f"k must be >= 1, got {k}")
        s = self.scores(query)
        n = len(s)
        if n == 0:
            return ScoredList(query_id, (), (), ())
        if k < n:
            # everything tied with the k-th best score must stay a candidate
            kth = np.partition(s, n - k)[n - k]
            cand = np.flatnonzero(s >= kth)
        else:
            cand = np.arange(n)
        order = np.lexsort((self._id_rank[cand], -s[cand]))[:k]
        rows = cand[order]
        ids = self.store.ids
        return ScoredList(
            query_id,
            tuple(ids[r] for r in rows),
            tuple(float(x) for x in s[rows]),
            tuple(int(r) for r in rows),
        )

    def batch_search(self, queries: VectorStore, k: int, workers: int = 1) -> list[ScoredList]:
        """Search every query; result order follows ``queries`` whatever ``workers`` is."""
        if queries.dim != self.dim:
            raise ValidationError(f"query dim {queries.dim} != index dim {self.dim}")
        jobs = list(zip(queries.ids, queries.data))
        if workers <= 1 or len(jobs) < 2:
            return [self.search(q, k, qid) for qid, q in jobs]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda job: self.search(job[1], k, job[0]), jobs))


def search(store: VectorStore, query: np.ndarray, k: int, query_id: str = "") -> ScoredList:
    return DenseIndex(store).search(query, k, query_id)


def batch_search(
    store: VectorStore, queries: VectorStore, k: int, workers: int = 1
) -> list[ScoredList]:
    return DenseIndex(store).batch_search(queries, k, workers)


def ranks_of(result: ScoredList, ids: Sequence[str]) -> dict[str, int]:
    """1-based rank of each of ``ids`` found in ``result``."""
    pos = {pid: i + 1 for i, pid in enumerate(result.ids)}
    return {pid: pos[pid] for pid in ids if pid in pos}
