"""Dense embedding collections: the DFV1 binary format, text ingest and a
seeded synthetic corpus generator.

Binary layout (little-endian)::

    b"DFV1" | dim: u32 | count: u32 | count x (utf-8 id, b"\\0") | count*dim float32

Everything downstream (index, PRF, training) consumes :class:`VectorStore`.
"""

from __future__ import annotations

import math
import struct
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptionError, FormatError, ParseError, ValidationError

MAGIC = b"DFV1"
_HEADER = struct.Struct("<4sII")
DEFAULT_DIM = 768


class VectorStore:
    """Immutable id-addressed matrix of float32 embeddings."""

    __slots__ = ("dim", "ids", "data", "_row")

    def __init__(self, dim: int, ids: Sequence[str], data: np.ndarray):
        if not isinstance(dim, (int, np.integer)) or dim <= 0:
            raise ValidationError(f"dim must be a positive integer, got {dim!r}")
        ids = tuple(ids)
        arr = np.asarray(data, dtype=np.float32)
        if arr.size == 0 and arr.ndim < 2:
            arr = arr.reshape(0, dim)
        if arr.ndim != 2 or arr.shape[1] != dim:
            raise ValidationError(f"data must have shape (n, {dim}), got {arr.shape}")
        if arr.shape[0] != len(ids):
            raise ValidationError(f"{len(ids)} ids but {arr.shape[0]} rows")
        row: dict[str, int] = {}
        for i, pid in enumerate(ids):
            if not isinstance(pid, str) or not pid or "\0" in pid:
                raise ValidationError(f"invalid id {pid!r} at row {i}")
            if pid in row:
                raise ValidationError(f"duplicate id {pid!r}")
            row[pid] = i
        if not np.all(np.isfinite(arr)):
            raise ValidationError("store contains non-finite values")
        if arr.flags.writeable:
            arr = arr.copy()
            arr.flags.writeable = False
        self.dim = int(dim)
        self.ids = ids
        self.data = arr
        self._row = row

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self) -> Iterator[tuple[str, np.ndarray]]:
        return zip(self.ids, self.data)

    def __contains__(self, pid: object) -> bool:
        return pid in self._row

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, VectorStore):
            return NotImplemented
        return (
            self.dim == other.dim
            and self.ids == other.ids
            and np.array_equal(self.data, other.data)
        )

    def __repr__(self) -> str:
        return f"VectorStore(dim={self.dim}, n={len(self)})"

    def row_of(self, pid: str) -> int:
        try:
            return self._row[pid]
        except KeyError:
            raise KeyError(f"unknown id {pid!r}") from None

    def vector(self, pid: str) -> np.ndarray:
        return self.data[self.row_of(pid)]

    def subset(self, ids: Iterable[str]) -> VectorStore:
        """Return a new store holding ``ids`` in the given order."""
        ids = list(ids)
        rows = [self.row_of(pid) for pid in ids]
        return VectorStore(self.dim, ids, self.data[rows])


class Qrels(Mapping):
    """Graded relevance judgments keyed by ``(query_id, passage_id)``."""

    def __init__(self, entries: Mapping[tuple[str, str], int] | Iterable = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        self._entries: dict[tuple[str, str], int] = {}
        self._by_query: dict[str, dict[str, int]] = {}
        for (qid, pid), grade in items:
            if isinstance(grade, bool) or int(grade) != grade or grade < 0:
                raise ValidationError(f"grade for ({qid}, {pid}) must be a non-negative int")
            if (qid, pid) in self._entries:
                raise ValidationError(f"duplicate judgment for ({qid}, {pid})")
            self._entries[(qid, pid)] = int(grade)
            self._by_query.setdefault(qid, {})[pid] = int(grade)

    def __getitem__(self, key: tuple[str, str]) -> int:
        return self._entries[key]

    def __iter__(self):
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        return f"Qrels(queries={len(self._by_query)}, judgments={len(self)})"

    def queries(self) -> list[str]:
        return list(self._by_query)

    def for_query(self, qid: str) -> dict[str, int]:
        """Judgments of one query as ``{passage_id: grade}`` (empty if unjudged)."""
        return dict(self._by_query.get(qid, {}))

    def relevant(self, qid: str, min_grade: int = 1) -> list[str]:
        return [pid for pid, g in self._by_query.get(qid, {}).items() if g >= min_grade]

    def restrict(self, qids: Iterable[str]) -> Qrels:
        keep = set(qids)
        return Qrels({k: g for k, g in self._entries.items() if k[0] in keep})


# -- binary format ---------------------------------------------------------------------------------


def save_store(store: VectorStore, path: str | Path) -> None:
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, store.dim, len(store)))
        for pid in store.ids:
            f.write(pid.encode("utf-8") + b"\0")
        f.write(np.ascontiguousarray(store.data, dtype="<f4").tobytes())


def load_store(path: str | Path, mmap: bool = False) -> VectorStore:
    """Read a DFV1 file.

    With ``mmap=True`` the payload is memory-mapped read-only instead of
    copied into memory.
    """
    path = Path(path)
    with open(path, "rb") as f:
        if mmap:
            import mmap as _mmap

            try:
                raw = _mmap.mmap(f.fileno(), 0, access=_mmap.ACCESS_READ)
            except ValueError:  # empty file cannot be mapped
                raw = b""
        else:
            raw = f.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {bytes(raw[:4])!r}, expected {MAGIC!r}")
    if len(raw) < _HEADER.size:
        raise CorruptionError(f"{path}: truncated header")
    _, dim, count = _HEADER.unpack(raw[: _HEADER.size])
    if dim == 0:
        raise FormatError(f"{path}: dim must be positive")
    pos = _HEADER.size
    ids = []
    for i in range(count):
        end = raw.find(b"\0", pos)
        if end < 0:
            raise CorruptionError(f"{path}: truncated id table at entry {i}")
        ids.append(bytes(raw[pos:end]).decode("utf-8"))
        pos = end + 1
    expected = count * dim * 4
    have = len(raw) - pos
    if have < expected:
        raise CorruptionError(
            f"{path}: payload holds {have // (4 * dim)} of {count} declared rows"
        )
    if have > expected:
        raise CorruptionError(f"{path}: {have - expected} trailing bytes after payload")
    if mmap and count:
        data = np.memmap(path, dtype="<f4", mode="r", offset=pos, shape=(count, dim))
    else:
        data = np.frombuffer(raw, dtype="<f4", count=count * dim, offset=pos).reshape(count, dim)
    return VectorStore(dim, ids, data)


# -- text ingest -----------------------------------------------------------------------------------


def ingest_text(path: str | Path, dim: int = DEFAULT_DIM) -> VectorStore:
    """Parse ``id<TAB>v1,v2,...`` lines; ``#`` lines and blank lines are skipped."""
    ids: list[str] = []
    rows: list[np.ndarray] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            pid, sep, values = line.partition("\t")
            pid = pid.strip()
            if not sep or not pid:
                raise ParseError("expected 'id<TAB>comma-separated floats'", lineno)
            parts = values.split(",")
            if len(parts) != dim:
                raise ParseError(f"expected {dim} values, got {len(parts)}", lineno)
            try:
                vec = np.array([float(p) for p in parts], dtype=np.float32)
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if not np.all(np.isfinite(vec)):
                raise ValidationError(f"line {lineno}: non-finite value for id {pid!r}")
            if pid in seen:
                raise ValidationError(f"line {lineno}: duplicate id {pid!r}")
            seen.add(pid)
            ids.append(pid)
            rows.append(vec)
    data = np.stack(rows) if rows else np.zeros((0, dim), dtype=np.float32)
    return VectorStore(dim, ids, data)


# -- synthetic data --------------------------------------------------------------------------------

SYNTHETIC_GRADE = 2


@dataclass(frozen=True)
class SyntheticConfig:
    """Clustered corpus: per cluster a few noisy copies of a unit center
    (judged relevant) padded with uniform random unit vectors.

    ``queries_per_cluster`` > 1 draws extra independent noisy queries per
    center (for train/validation splits); the corpus does not depend on it.
    """

    n_clusters: int = 8
    passages_per_cluster: int = 100
    relevant_per_cluster: int = 5
    dim: int = 64
    sigma_rel: float = 0.3
    sigma_query: float = 0.6
    seed: int = 7
    queries_per_cluster: int = 1

    def __post_init__(self):
        for name in ("n_clusters", "passages_per_cluster", "relevant_per_cluster", "dim",
                     "queries_per_cluster"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ValidationError(f"{name} must be a positive integer, got {v!r}")
        if self.relevant_per_cluster > self.passages_per_cluster:
            raise ValidationError("relevant_per_cluster exceeds passages_per_cluster")
        for name in ("sigma_rel", "sigma_query"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise ValidationError(f"{name} must be finite and >= 0, got {v!r}")
        if not 0 <= self.seed < 2**64:
            raise ValidationError("seed must fit in an unsigned 64-bit integer")


def _unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def query_id(cluster: int, j: int) -> str:
    return f"q{cluster:03d}-{j:03d}"


def generate_synthetic(cfg: SyntheticConfig) -> tuple[VectorStore, VectorStore, Qrels]:
    """Return ``(corpus, queries, qrels)``; a pure function of ``cfg``."""
    center_ss, corpus_ss, query_ss = np.random.SeedSequence(cfg.seed).spawn(3)
    centers = _unit_rows(np.random.default_rng(center_ss), cfg.n_clusters, cfg.dim)

    rng = np.random.default_rng(corpus_ss)
    n_rel = cfg.relevant_per_cluster
    n_rand = cfg.passages_per_cluster - n_rel
    blocks = []
    for c in range(cfg.n_clusters):
        rel = centers[c] + cfg.sigma_rel * rng.standard_normal((n_rel, cfg.dim))
        blocks.append(rel)
        if n_rand:
            blocks.append(_unit_rows(rng, n_rand, cfg.dim))
    corpus_data = np.concatenate(blocks).astype(np.float32)
    width = len(str(cfg.n_clusters * cfg.passages_per_cluster - 1))
    pids = [f"p{i:0{width}d}" for i in range(len(corpus_data))]

    judgments = {}
    qrng = np.random.default_rng(query_ss)
    qids, qrows = [], []
    for c in range(cfg.n_clusters):
        base = c * cfg.passages_per_cluster
        noise = qrng.standard_normal((cfg.queries_per_cluster, cfg.dim))
        for j in range(cfg.queries_per_cluster):
            qid = query_id(c, j)
            qids.append(qid)
            qrows.append(centers[c] + cfg.sigma_query * noise[j])
            for r in range(n_rel):
                judgments[(qid, pids[base + r])] = SYNTHETIC_GRADE

    corpus = VectorStore(cfg.dim, pids, corpus_data)
    queries = VectorStore(cfg.dim, qids, np.asarray(qrows, dtype=np.float32))
    return corpus, queries, Qrels(judgments)


def split_synthetic_queries(
    queries: VectorStore, qrels: Qrels, val_per_cluster: int
) -> tuple[VectorStore, Qrels, VectorStore, Qrels]:
    """Hold out the last ``val_per_cluster`` queries of every cluster for validation."""
    per_cluster: dict[str, list[str]] = {}
    for qid in queries.ids:
        per_cluster.setdefault(qid.split("-")[0], []).append(qid)
    train_ids, val_ids = [], []
    for qids in per_cluster.values():
        if not 0 <= val_per_cluster < len(qids):
            raise ValidationError(
                f"val_per_cluster must leave at least one training query (cluster has {len(qids)})"
            )
        cut = len(qids) - val_per_cluster
        train_ids += qids[:cut]
        val_ids += qids[cut:]
    return (
        queries.subset(train_ids),
        qrels.restrict(train_ids),
        queries.subset(val_ids),
        qrels.restrict(val_ids),
    )
