"""Two-stage PRF retrieval: first-stage search, query rewrite, second-stage search."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .baselines import RocchioParams, average_prf, rocchio_prf
from .errors import ConfigError, ValidationError
from .index import DenseIndex, ScoredList
from .metrics import RunFile
from .model import Parameters, encode, encode_batch
from .store import VectorStore

METHODS = ("none", "avg", "rocchio", "tprf")


@dataclass(frozen=True)
class PRFPipeline:
    """A retrieval method bound to an index.

    The second stage always searches the full index again; it is not a
    re-rank of first-stage candidates.
    """

    index: DenseIndex
    method: str = "none"
    k: int = 3
    final_k: int = 1000
    rocchio: RocchioParams = field(default_factory=RocchioParams)
    params: Parameters | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.method != "none" and self.k < 1:
            raise ConfigError(f"PRF depth k must be >= 1, got {self.k}")
        if self.final_k < 1:
            raise ConfigError(f"final_k must be >= 1, got {self.final_k}")
        if self.method == "tprf":
            if self.params is None:
                raise ConfigError("method 'tprf' requires a checkpoint")
            if self.params.config.model_dim != self.index.dim:
                raise ValidationError(
                    f"checkpoint model_dim {self.params.config.model_dim} "
                    f"!= store dim {self.index.dim}"
                )

    def with_depth(self, k: int) -> PRFPipeline:
        return replace(self, k=k)

    def feedback(self, query: np.ndarray, query_id: str = "") -> tuple[ScoredList, np.ndarray]:
        first = self.index.search(query, self.k, query_id)
        return first, self.index.store.data[list(first.rows)]

    def rewrite(self, query: np.ndarray, feedback: np.ndarray) -> np.ndarray:
        if self.method == "avg":
            return average_prf(query, feedback)
        if self.method == "rocchio":
            return rocchio_prf(query, feedback, self.rocchio)
        if self.method == "tprf":
            return encode(query, feedback, self.params)
        return np.asarray(query)

    def __call__(self, query: np.ndarray, query_id: str = "") -> ScoredList:
        query = np.asarray(query, dtype=np.float32)
        if self.method == "none":
            return self.index.search(query, self.final_k, query_id)
        _, fb = self.feedback(query, query_id)
        new_query = self.rewrite(query, fb).astype(np.float32, copy=False)
        return self.index.search(new_query, self.final_k, query_id)

    def run(self, queries: VectorStore) -> list[ScoredList]:
        """Rank every query; the TPRF path encodes all queries in one batch."""
        if queries.dim != self.index.dim:
            raise ValidationError(f"query dim {queries.dim} != index dim {self.index.dim}")
        if self.method != "tprf" or len(queries) == 0:
            return [self(q, qid) for qid, q in queries]
        firsts = [self.index.search(q, self.k, qid) for qid, q in queries]
        fb = np.stack([self.index.store.data[list(f.rows)] for f in firsts])
        new = encode_batch(queries.data, fb, self.params).astype(np.float32)
        return [self.index.search(v, self.final_k, qid) for qid, v in zip(queries.ids, new)]


def to_run(results: list[ScoredList], tag: str) -> RunFile:
    return RunFile({r.query_id: r.items for r in results}, tag)
