"""TREC-style effectiveness metrics, run/qrels files and paired significance tests.

Conventions (trec_eval lineage):

* nDCG uses raw grades with linear gain and a ``log2(rank + 1)`` discount.
* MAP, RR and recall binarize grades at ``rel_threshold`` (default 2, the
  TREC DL passage convention).
* Unjudged passages count as grade 0. Queries without any positive grade are
  excluded from averages with a warning.
"""

from __future__ import annotations

import math
import warnings
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ParseError, ValidationError
from .store import Qrels

DEFAULT_REL_THRESHOLD = 2
METRICS = ("MAP", "RR", "R@1000", "nDCG@1", "nDCG@3", "nDCG@10", "nDCG@100")
SIGNIFICANCE_LEVEL = 0.05


class UnjudgedQuery(ValidationError):
    """Query has no positively graded passage, so normalized metrics are undefined."""


# -- per-query metrics -----------------------------------------------------------------------------


def _gain(grade: int, gain: str) -> float:
    if gain == "linear":
        return float(grade)
    if gain == "exp":
        return 2.0**grade - 1.0
    raise ValidationError(f"unknown gain {gain!r}")


def dcg_at(grades: Sequence[int], cutoff: int, gain: str = "linear") -> float:
    return sum(_gain(g, gain) / math.log2(i + 2) for i, g in enumerate(grades[:cutoff]))


def ndcg_at(
    ranking: Sequence[str], judgments: Mapping[str, int], cutoff: int, gain: str = "linear"
) -> float:
    if cutoff < 1:
        raise ValidationError(f"cutoff must be >= 1, got {cutoff}")
    ideal = sorted((g for g in judgments.values() if g > 0), reverse=True)
    if not ideal:
        raise UnjudgedQuery("query has no relevant judgments")
    got = [judgments.get(pid, 0) for pid in ranking[:cutoff]]
    return dcg_at(got, cutoff, gain) / dcg_at(ideal, cutoff, gain)


def _binary(judgments: Mapping[str, int], threshold: int) -> set[str]:
    if not any(g > 0 for g in judgments.values()):
        raise UnjudgedQuery("query has no relevant judgments")
    return {pid for pid, g in judgments.items() if g >= threshold}


def average_precision(
    ranking: Sequence[str], judgments: Mapping[str, int], threshold: int = DEFAULT_REL_THRESHOLD
) -> float:
    rel = _binary(judgments, threshold)
    if not rel:
        return 0.0
    hits, total = 0, 0.0
    for i, pid in enumerate(ranking, start=1):
        if pid in rel:
            hits += 1
            total += hits / i
    return total / len(rel)


def reciprocal_rank(
    ranking: Sequence[str], judgments: Mapping[str, int], threshold: int = DEFAULT_REL_THRESHOLD
) -> float:
    rel = _binary(judgments, threshold)
    for i, pid in enumerate(ranking, start=1):
        if pid in rel:
            return 1.0 / i
    return 0.0


def recall_at(
    ranking: Sequence[str],
    judgments: Mapping[str, int],
    cutoff: int,
    threshold: int = DEFAULT_REL_THRESHOLD,
) -> float:
    rel = _binary(judgments, threshold)
    if not rel:
        return 0.0
    return len(rel.intersection(ranking[:cutoff])) / len(rel)


def query_metrics(
    ranking: Sequence[str],
    judgments: Mapping[str, int],
    threshold: int = DEFAULT_REL_THRESHOLD,
    gain: str = "linear",
) -> dict[str, float]:
    """All reported metrics for one query, keyed as in :data:`METRICS`."""
    return {
        "MAP": average_precision(ranking, judgments, threshold),
        "RR": reciprocal_rank(ranking, judgments, threshold),
        "R@1000": recall_at(ranking, judgments, 1000, threshold),
        "nDCG@1": ndcg_at(ranking, judgments, 1, gain),
        "nDCG@3": ndcg_at(ranking, judgments, 3, gain),
        "nDCG@10": ndcg_at(ranking, judgments, 10, gain),
        "nDCG@100": ndcg_at(ranking, judgments, 100, gain),
    }


def mean_ndcg(rankings: Mapping[str, Sequence[str]], qrels: Qrels, cutoff: int = 10) -> float:
    """Mean nDCG@cutoff over the judged queries of ``rankings`` (0.0 when none are judged)."""
    vals = []
    for qid, ranking in rankings.items():
        try:
            vals.append(ndcg_at(ranking, qrels.for_query(qid), cutoff))
        except UnjudgedQuery:
            continue
    return math.fsum(vals) / len(vals) if vals else 0.0


def mean_recall(
    rankings: Mapping[str, Sequence[str]], qrels: Qrels, cutoff: int, threshold: int = 1
) -> float:
    vals = []
    for qid, ranking in rankings.items():
        try:
            vals.append(recall_at(ranking, qrels.for_query(qid), cutoff, threshold))
        except UnjudgedQuery:
            continue
    return math.fsum(vals) / len(vals) if vals else 0.0


# -- significance ----------------------------------------------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > tiny else tiny)
    h = d
    for m in range(1, 10_000):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > tiny else tiny)
        c = 1.0 + aa / c
        c = c if abs(c) > tiny else tiny
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)``."""
    if not 0.0 <= x <= 1.0:
        raise ValidationError(f"x must lie in [0, 1], got {x}")
    if x in (0.0, 1.0):
        return x
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )  # fmt: skip
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf2(t: float, dof: int) -> float:
    """Two-tailed p-value ``P(|T| >= |t|)`` for Student's t with ``dof`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc(dof / 2.0, 0.5, dof / (dof + t * t))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    degenerate: bool = False


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Paired two-tailed t-test of ``a - b``.

    All-zero differences give ``p = 1`` with ``degenerate=True``.
    """
    if len(a) != len(b):
        raise ValidationError(f"paired samples differ in length: {len(a)} vs {len(b)}")
    n = len(a)
    if n < 2:
        raise ValidationError("paired t-test needs at least 2 pairs")
    diffs = [x - y for x, y in zip(a, b)]
    if all(d == 0 for d in diffs):
        return TTestResult(0.0, 1.0, True)
    mean = math.fsum(diffs) / n
    var = math.fsum((d - mean) ** 2 for d in diffs) / (n - 1)
    if var == 0.0:
        return TTestResult(math.copysign(math.inf, mean), 0.0)
    t = mean / math.sqrt(var / n)
    return TTestResult(t, min(1.0, student_t_sf2(t, n - 1)))


def bonferroni(p_values: Iterable[float], m_comparisons: int) -> list[float]:
    if m_comparisons < 1:
        raise ValidationError("m_comparisons must be >= 1")
    return [min(1.0, m_comparisons * p) for p in p_values]


# -- TREC files ------------------------------------------------------------------------------------


@dataclass
class RunFile:
    """Rankings per query (best first) plus a run tag."""

    rankings: dict[str, list[tuple[str, float]]] = field(default_factory=dict)
    tag: str = "run"

    def ids(self, qid: str) -> list[str]:
        return [pid for pid, _ in self.rankings[qid]]

    def id_rankings(self) -> dict[str, list[str]]:
        return {qid: self.ids(qid) for qid in self.rankings}


def format_score(score: float) -> str:
    return repr(float(score))


def write_run(run: RunFile, path: str | Path) -> None:
    lines = []
    for qid, items in run.rankings.items():
        for rank, (pid, score) in enumerate(items, start=1):
            lines.append(f"{qid} Q0 {pid} {rank} {format_score(score)} {run.tag}\n")
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_run(path: str | Path) -> RunFile:
    """Parse ``qid Q0 docid rank score tag``; per-query order follows the rank column."""
    rows: dict[str, list[tuple[int, str, float]]] = {}
    tag = None
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 6:
                raise ParseError(f"expected 6 fields, got {len(parts)}", lineno)
            qid, _, pid, rank, score, run_tag = parts
            try:
                rows.setdefault(qid, []).append((int(rank), pid, float(score)))
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            tag = tag or run_tag
    rankings = {}
    for qid, items in rows.items():
        items.sort(key=lambda r: r[0])
        if [r[0] for r in items] != list(range(1, len(items) + 1)):
            raise ValidationError(f"query {qid}: ranks are not contiguous from 1")
        if any(items[i][2] < items[i + 1][2] for i in range(len(items) - 1)):
            raise ValidationError(f"query {qid}: scores increase with rank")
        if len({pid for _, pid, _ in items}) != len(items):
            raise ValidationError(f"query {qid}: duplicate passage ids")
        rankings[qid] = [(pid, score) for _, pid, score in items]
    return RunFile(rankings, tag or "run")


def write_qrels(qrels: Qrels, path: str | Path) -> None:
    lines = [f"{qid} 0 {pid} {grade}\n" for (qid, pid), grade in qrels.items()]
    Path(path).write_text("".join(lines), encoding="utf-8")


def read_qrels(path: str | Path) -> Qrels:
    entries = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ParseError(f"expected 4 fields, got {len(parts)}", lineno)
            qid, _, pid, grade = parts
            try:
                entries.append(((qid, pid), int(grade)))
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
    return Qrels(entries)


# -- reports ---------------------------------------------------------------------------------------


@dataclass
class MetricReport:
    tag: str
    per_query: dict[str, dict[str, float]]
    means: dict[str, float]
    p_values: dict[str, float] | None = None  # Bonferroni-adjusted, vs ``baseline``
    baseline: str | None = None
    degenerate: dict[str, bool] | None = None

    def significant(self, metric: str) -> bool:
        return self.p_values is not None and self.p_values[metric] < SIGNIFICANCE_LEVEL


def evaluate(
    run: RunFile,
    qrels: Qrels,
    threshold: int = DEFAULT_REL_THRESHOLD,
    gain: str = "linear",
) -> MetricReport:
    """Per-query and mean metrics over the judged queries present in ``run``."""
    per_query = {}
    skipped = []
    for qid in run.rankings:
        try:
            per_query[qid] = query_metrics(run.ids(qid), qrels.for_query(qid), threshold, gain)
        except UnjudgedQuery:
            skipped.append(qid)
    if skipped:
        warnings.warn(f"{len(skipped)} unjudged queries excluded: {', '.join(skipped[:5])}")
    means = {
        m: (math.fsum(v[m] for v in per_query.values()) / len(per_query) if per_query else 0.0)
        for m in METRICS
    }
    return MetricReport(run.tag, per_query, means)


def compare(
    report: MetricReport, baseline: MetricReport, metrics: Sequence[str] = METRICS
) -> MetricReport:
    """Attach Bonferroni-adjusted paired t-test p-values against ``baseline``."""
    if set(report.per_query) != set(baseline.per_query):
        only_a = sorted(set(report.per_query) - set(baseline.per_query))
        only_b = sorted(set(baseline.per_query) - set(report.per_query))
        raise ValidationError(
            f"query sets differ: only in {report.tag}: {only_a[:10]}; "
            f"only in {baseline.tag}: {only_b[:10]}"
        )
    qids = sorted(report.per_query)
    raw, degenerate = {}, {}
    for m in metrics:
        res = paired_ttest(
            [report.per_query[q][m] for q in qids], [baseline.per_query[q][m] for q in qids]
        )
        raw[m] = res.p
        degenerate[m] = res.degenerate
    adjusted = dict(zip(metrics, bonferroni([raw[m] for m in metrics], len(metrics))))
    return MetricReport(
        report.tag, report.per_query, report.means, adjusted, baseline.tag, degenerate
    )


def format_table(reports: Sequence[MetricReport], metrics: Sequence[str] = METRICS) -> str:
    """Tab-separated table, one row per run; ``*`` marks p < 0.05 vs the compared baseline."""
    lines = ["run\t" + "\t".join(metrics)]
    for r in reports:
        cells = [f"{r.means[m]:.4f}{'*' if r.significant(m) else ''}" for m in metrics]
        lines.append(r.tag + "\t" + "\t".join(cells))
    for r in reports:
        if r.p_values is not None:
            cells = [f"{r.p_values[m]:.4g}" for m in metrics]
            lines.append(f"p({r.tag} vs {r.baseline})\t" + "\t".join(cells))
    return "\n".join(lines) + "\n"
