"""Query-latency harness, PRF-depth sweeps and model-size accounting.

All timings use :func:`time.perf_counter_ns`, a monotonic clock, on a single
thread.
"""

from __future__ import annotations

import csv
import io
import math
import os
import platform
import tempfile
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import TPRFError, ValidationError
from .model import ModelConfig, encode, init_params, param_count, save_checkpoint, size_bytes
from .store import VectorStore

# Reference sizes/latencies for comparison only; never asserted.
REPORTED_SIZES_MB = {
    "TPRF l=1,h=1": 62.7,
    "TPRF l=6 (smallest grid model)": 299.2,
    "TPRF l=8": 393.8,
    "TPRF largest (l=12)": 582.9,
    "ANCE-PRF": 503.4,
}
REPORTED_LATENCY_S_PER_100 = {
    "TPRF l=1,h=1": 0.185,
    "TPRF smallest grid model": 0.235,
    "TPRF largest": 0.533,
}


class PipelineFailure(TPRFError):
    def __init__(self, query_id: str, cause: Exception):
        self.query_id = query_id
        super().__init__(f"pipeline failed on query {query_id!r}: {cause}")


def environment() -> str:
    return (
        f"python {platform.python_version()}; numpy {np.__version__}; "
        f"{platform.machine()} {os.cpu_count()} cores; build=release; workers=1"
    )


def running_stats(samples: Sequence[float]) -> tuple[float, float, float, float]:
    """Single-pass (Welford) mean, sample stddev, min and max."""
    n, mean, m2 = 0, 0.0, 0.0
    lo, hi = math.inf, -math.inf
    for x in samples:
        n += 1
        delta = x - mean
        mean += delta / n
        m2 += delta * (x - mean)
        lo, hi = min(lo, x), max(hi, x)
    if n == 0:
        raise ValidationError("no samples")
    std = math.sqrt(m2 / (n - 1)) if n > 1 else 0.0
    return mean, std, lo, hi


@dataclass(frozen=True)
class LatencyReport:
    method: str
    k: int
    n_queries: int
    mean_ms: float
    stddev_ms: float
    min_ms: float
    max_ms: float
    environment: str
    query_ids: tuple[str, ...] = ()

    TSV_HEADER = "method\tk\tn_queries\tmean_ms\tstddev_ms\tmin_ms\tmax_ms\tenvironment"

    def tsv(self) -> str:
        return (
            f"{self.method}\t{self.k}\t{self.n_queries}\t{self.mean_ms:.4f}\t"
            f"{self.stddev_ms:.4f}\t{self.min_ms:.4f}\t{self.max_ms:.4f}\t{self.environment}"
        )


def sample_queries(queries: VectorStore, n: int, seed: int) -> list[str]:
    if not 1 <= n <= len(queries):
        raise ValidationError(f"need 1 <= n <= {len(queries)} queries, got {n}")
    picks = np.random.default_rng(seed).choice(len(queries), n, replace=False)
    return [queries.ids[i] for i in picks]


def measure_latency(
    pipeline: Callable,
    queries: VectorStore,
    n: int = 100,
    warmup: int = 10,
    seed: int = 0,
    method: str | None = None,
    k: int | None = None,
) -> LatencyReport:
    """Time ``pipeline(vector, query_id)`` end to end for ``n`` sampled queries.

    The first ``warmup`` calls (cycling through the sample) are not timed.
    """
    if warmup < 0:
        raise ValidationError("warmup must be >= 0")
    qids = sample_queries(queries, n, seed)
    vecs = [queries.vector(q) for q in qids]
    for i in range(warmup):
        j = i % n
        _call(pipeline, vecs[j], qids[j])
    times = []
    clock = time.perf_counter_ns
    for qid, v in zip(qids, vecs):
        t0 = clock()
        _call(pipeline, v, qid)
        times.append((clock() - t0) / 1e6)
    mean, std, lo, hi = running_stats(times)
    return LatencyReport(
        method if method is not None else getattr(pipeline, "method", type(pipeline).__name__),
        k if k is not None else getattr(pipeline, "k", 0),
        n,
        mean,
        std,
        lo,
        hi,
        environment(),
        tuple(qids),
    )


def _call(pipeline, vec, qid):
    try:
        return pipeline(vec, qid)
    except Exception as exc:
        raise PipelineFailure(qid, exc) from exc


def sweep_prf_depth(
    pipeline, ks: Sequence[int], queries: VectorStore, n: int = 100, warmup: int = 10, seed: int = 0
) -> list[LatencyReport]:
    """One :class:`LatencyReport` per depth; ``pipeline`` must offer ``with_depth(k)``."""
    ks = list(ks)
    if not ks or any(k < 1 for k in ks) or ks != sorted(ks):
        raise ValidationError(f"ks must be ascending and >= 1, got {ks}")
    return [
        measure_latency(pipeline.with_depth(k), queries, n, warmup, seed, k=k) for k in ks
    ]


def sweep_csv(reports: Sequence[LatencyReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["k", "mean_ms", "stddev_ms", "method"])
    for r in reports:
        w.writerow([r.k, f"{r.mean_ms:.6f}", f"{r.stddev_ms:.6f}", r.method])
    return buf.getvalue()


def encode_latency(params, k: int, n: int = 100, warmup: int = 10, seed: int = 0) -> LatencyReport:
    """Latency of the encoder alone on random ``(k+1, d)`` inputs."""
    d = params.config.model_dim
    rng = np.random.default_rng(seed)
    inputs = rng.standard_normal((n, k + 1, d)).astype(params.dtype)
    for i in range(warmup):
        encode(inputs[i % n, 0], inputs[i % n, 1:], params)
    times = []
    for x in inputs:
        t0 = time.perf_counter_ns()
        encode(x[0], x[1:], params)
        times.append((time.perf_counter_ns() - t0) / 1e6)
    mean, std, lo, hi = running_stats(times)
    return LatencyReport("tprf-encode", k, n, mean, std, lo, hi, environment())


@dataclass(frozen=True)
class TextPRFCostModel:
    """Stand-in for a text-concatenation PRF encoder (ANCE-PRF style).

    Input length is ``query_tokens + k * passage_tokens`` truncated at
    ``max_tokens``; cost is quadratic in the kept length (self-attention).
    The defaults truncate first at k = 5 and scale the saturated cost to
    1250 ms/query (about 125 s per 100 queries).
    """

    query_tokens: int = 10
    passage_tokens: int = 104
    max_tokens: int = 512
    base_ms: float = 0.0
    saturated_ms: float = 1250.0

    def tokens(self, k: int) -> int:
        return min(self.query_tokens + k * self.passage_tokens, self.max_tokens)

    def latency_ms(self, k: int) -> float:
        return self.base_ms + self.saturated_ms * (self.tokens(k) / self.max_tokens) ** 2

    def plateau_depth(self) -> int:
        """Smallest k from which the modeled latency stops growing."""
        k = 0
        while self.tokens(k) < self.max_tokens:
            k += 1
        return k


@dataclass(frozen=True)
class SizeReport:
    param_count: int
    raw_bytes: int
    checkpoint_bytes: int
    checkpoint_with_optimizer_bytes: int | None = None

    def tsv(self) -> str:
        rows = [
            ("param_count", self.param_count),
            ("raw_bytes", self.raw_bytes),
            ("checkpoint_bytes", self.checkpoint_bytes),
        ]
        if self.checkpoint_with_optimizer_bytes is not None:
            rows.append(("checkpoint_with_optimizer_bytes", self.checkpoint_with_optimizer_bytes))
        lines = [f"{k}\t{v}\t{v / 1e6:.1f} MB" if "bytes" in k else f"{k}\t{v}" for k, v in rows]
        lines += [f"reference\t{name}\t{mb} MB" for name, mb in REPORTED_SIZES_MB.items()]
        return "\n".join(lines) + "\n"


def model_size_report(config: ModelConfig, with_optimizer: bool = False) -> SizeReport:
    """Parameter count and raw bytes from the shape formula; checkpoint bytes
    measured by actually serializing a freshly initialized model."""
    params = init_params(config, 0)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "model.tprf"
        save_checkpoint(path, params)
        ckpt = path.stat().st_size
        full = None
        if with_optimizer:
            zeros = params.zeros_like()
            save_checkpoint(path, params, (0, zeros, zeros))
            full = path.stat().st_size
    return SizeReport(param_count(config), size_bytes(config), ckpt, full)
