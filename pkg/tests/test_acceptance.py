"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v -s`` or ``python tests/test_acceptance.py``.
"""

import contextlib
import math
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import scipy.stats

sys.path.insert(0, str(Path(__file__).parent))

from test_index import naive_topk  # noqa: E402
from test_metrics import TOY, FN, T_SAMPLES  # noqa: E402
from test_train import gradient_check  # noqa: E402

from tprf.bench import TextPRFCostModel, measure_latency  # noqa: E402
from tprf.cli import main  # noqa: E402
from tprf.index import DenseIndex, search  # noqa: E402
from tprf.metrics import mean_ndcg, mean_recall, paired_ttest  # noqa: E402
from tprf.model import ModelConfig, encode, init_params, param_count, size_bytes  # noqa: E402
from tprf.pipeline import PRFPipeline  # noqa: E402
from tprf.store import VectorStore  # noqa: E402
from tprf.train import TrainConfig, loss_from_scores, train  # noqa: E402

LEARN_MODEL = ModelConfig(layers=2, heads=4, model_dim=64, ffn_dim=128, dropout=0.1)
LEARN_TRAIN = TrainConfig(lr=1e-3, batch_size=32, epochs=20, seed=0)


@pytest.fixture
def criterion(pytestconfig):
    """Yields a context manager that prints ``[PASS]``/``[FAIL]`` for the named criterion."""
    capman = pytestconfig.pluginmanager.getplugin("capturemanager")

    @contextlib.contextmanager
    def check(name):
        t0 = time.perf_counter()
        notes = []
        try:
            yield notes
        except BaseException as exc:
            detail = "; ".join(notes + [" ".join(str(exc).split())[:200]])
            _report(capman, f"[FAIL] {name}: {detail}")
            raise
        extra = "; " + "; ".join(notes) if notes else ""
        _report(capman, f"[PASS] {name} ({time.perf_counter() - t0:.1f}s{extra})")

    return check


def _report(capman, line):
    with capman.global_and_fixture_disabled() if capman else contextlib.nullcontext():
        print("\nACCEPTANCE " + line, flush=True)


def test_gradient_correctness(criterion):
    with criterion("gradient check vs finite differences, l=1..2, rel err < 1e-4, < 60 s"):
        t0 = time.perf_counter()
        worst = max(gradient_check(layers) for layers in (1, 2))
        elapsed = time.perf_counter() - t0
        assert worst < 1e-4, f"worst relative error {worst:.3g}"
        assert elapsed < 60, f"took {elapsed:.1f}s"


def test_loss_oracle(criterion):
    with criterion("contrastive loss: ln 2, ln 21, permutation and shift invariance within 1e-9"):
        assert abs(loss_from_scores(0.7, [0.7]) - math.log(2)) < 1e-9
        assert abs(loss_from_scores(0.7, [0.7] * 20) - math.log(21)) < 1e-9
        rng = np.random.default_rng(0)
        for _ in range(25):
            pos, negs = rng.standard_normal(), rng.standard_normal(20)
            base = loss_from_scores(pos, negs)
            assert abs(loss_from_scores(pos, rng.permutation(negs)) - base) < 1e-9
            c = rng.uniform(-100, 100)
            assert abs(loss_from_scores(pos + c, negs + c) - base) < 1e-9


def test_exact_search_oracle(criterion):
    with criterion("exact search id-identical to naive full sort on 50 seeded cases"):
        rng = np.random.default_rng(77)
        for case in range(50):
            n, dim, k = int(rng.integers(1, 400)), int(rng.integers(1, 32)), int(rng.integers(1, 150))
            data = rng.integers(-3, 4, size=(n, dim)).astype(np.float32)
            ids = [f"d{int(i)}" for i in rng.permutation(5 * n)[:n]]
            q = rng.integers(-2, 3, size=dim).astype(np.float32)
            got = list(search(VectorStore(dim, ids, data), q, k).ids)
            assert got == naive_topk(data, ids, q, k), f"case {case}"


def test_metric_oracles(criterion):
    with criterion("metrics match >= 10 hand-computed toys (1e-9); t-test matches scipy (1e-6)"):
        assert len(TOY) >= 10
        for ranking, judgments, metric, kwargs, expected in TOY:
            assert abs(FN[metric](ranking, judgments, **kwargs) - expected) < 1e-9
        assert len(T_SAMPLES) == 5
        for a, b in T_SAMPLES:
            ours, ref = paired_ttest(a, b), scipy.stats.ttest_rel(a, b)
            assert abs(ours.t - ref.statistic) < 1e-6 and abs(ours.p - ref.pvalue) < 1e-6


def _ndcg(index, queries, qrels, **kw):
    results = PRFPipeline(index, final_k=10, **kw).run(queries)
    return mean_ndcg({r.query_id: list(r.ids) for r in results}, qrels, 10)


def test_end_to_end_learning(criterion, pinned_split):
    corpus, tq, tqrels, vq, vqrels = pinned_split
    with criterion("trained TPRF val nDCG@10 > untrained TPRF and > raw query, <= 20 epochs, < 10 min") as notes:
        t0 = time.perf_counter()
        res = train(corpus, tq, tqrels, vq, vqrels, LEARN_MODEL, LEARN_TRAIN)
        elapsed = time.perf_counter() - t0
        index = DenseIndex(corpus)
        raw = _ndcg(index, vq, vqrels)
        untrained = _ndcg(index, vq, vqrels, method="tprf", k=3, params=init_params(LEARN_MODEL, 0))
        trained = _ndcg(index, vq, vqrels, method="tprf", k=3, params=res.best_params)
        notes.append(f"raw {raw:.4f}, untrained {untrained:.4f}, trained {trained:.4f} "
                     f"at epoch {res.best_epoch}")
        assert trained == pytest.approx(res.best_ndcg10, abs=1e-12)
        assert res.initial_ndcg10 == pytest.approx(untrained, abs=1e-12)
        assert len(res.log) <= 20
        assert trained > untrained and trained > raw
        assert elapsed < 600


def test_average_prf_recall(criterion, pinned):
    corpus, queries, qrels = pinned
    with criterion("Average-PRF mean Recall@100 >= raw-query Recall@100 on the pinned corpus"):
        index = DenseIndex(corpus)

        def recall(method):
            results = PRFPipeline(index, method, k=3, final_k=100).run(queries)
            return mean_recall({r.query_id: list(r.ids) for r in results}, qrels, 100)

        assert recall("avg") >= recall("none")


def test_scalability(criterion, pinned_split):
    corpus, _, _, vq, _ = pinned_split
    with criterion("encode at k=100; latency(k=100) <= 5x latency(k=3); text-PRF model plateaus at k=5") as notes:
        params = init_params(LEARN_MODEL, 0)
        rng = np.random.default_rng(0)
        out = encode(rng.standard_normal(64), rng.standard_normal((100, 64)), params)
        assert out.shape == (64,) and np.all(np.isfinite(out))
        pipe = PRFPipeline(DenseIndex(corpus), "tprf", k=3, params=params)
        lat3 = measure_latency(pipe, vq, n=100, warmup=10).mean_ms
        lat100 = measure_latency(pipe.with_depth(100), vq, n=100, warmup=10).mean_ms
        notes.append(f"k=3 {lat3:.3f} ms, k=100 {lat100:.3f} ms, ratio {lat100 / lat3:.2f}")
        assert lat100 <= 5 * lat3
        assert TextPRFCostModel().plateau_depth() == 5


def test_size_accounting(criterion):
    with criterion("param_count(l=1, d=768, ffn=1024) == 3,943,168; bytes linear in l; independent of h"):
        one = param_count(ModelConfig(1, 1, 768, 1024))
        assert all(size_bytes(ModelConfig(l, 1)) == l * size_bytes(ModelConfig(1, 1)) for l in range(1, 13))
        assert all(param_count(ModelConfig(6, h)) == 6 * one for h in (1, 4, 6, 12))
        assert one == 3_943_168, f"param_count is {one:,}"


def test_determinism(criterion, tmp_path):
    with criterion("synth, search and single-worker train are byte-identical across identical runs"):
        synth = ["--clusters", "4", "--passages-per-cluster", "60", "--dim", "16",
                 "--queries-per-cluster", "6", "--val-per-cluster", "2", "--seed", "11"]  # fmt: skip
        for rep in ("a", "b"):
            d = tmp_path / rep
            assert main(["synth", "--out-dir", str(d), *synth]) == 0
            assert main(["search", "--corpus", str(d / "corpus.dfv"), "--queries", str(d / "queries.dfv"),
                         "--prf", "avg", "--output", str(d / "run.txt")]) == 0
            assert main(["train", "--corpus", str(d / "corpus.dfv"),
                         "--train-queries", str(d / "train_queries.dfv"),
                         "--val-queries", str(d / "val_queries.dfv"), "--qrels", str(d / "qrels.txt"),
                         "--out-dir", str(d / "model"), "--layers", "1", "--heads", "2",
                         "--model-dim", "16", "--ffn-dim", "32", "--lr", "1e-3", "--batch-size", "8",
                         "--epochs", "2", "--negatives", "5", "--seed", "3"]) == 0
        files = ["corpus.dfv", "queries.dfv", "qrels.txt", "train_queries.dfv", "val_queries.dfv",
                 "run.txt", "model/epoch-001.tprf", "model/epoch-002.tprf", "model/best"]
        for name in files:
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
        logs = [[line.split("\t")[:3] for line in (tmp_path / r / "model" / "train_log.tsv").read_text().splitlines()]
                for r in ("a", "b")]
        assert logs[0] == logs[1]


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
