import math
import warnings

import numpy as np
import pytest

import tprf.train as train_mod
from tprf.errors import ValidationError
from tprf.index import DenseIndex
from tprf.model import ModelConfig, encode, init_params, load_checkpoint
from tprf.store import Qrels, SyntheticConfig, VectorStore, generate_synthetic, split_synthetic_queries
from tprf.train import (
    OptimizerState,
    TrainConfig,
    TrainingDiverged,
    TrainingExample,
    adamw_step,
    build_examples,
    grad,
    grid_configs,
    loss,
    loss_and_grad,
    loss_from_scores,
    resolve_best,
    train,
)

LN2 = math.log(2.0)
LN21 = math.log(21.0)


def random_example(d, k, n_neg, rng, qid="q"):
    return TrainingExample(
        qid,
        rng.standard_normal(d),
        rng.standard_normal((k, d)),
        "pos",
        rng.standard_normal(d),
        [f"n{i}" for i in range(n_neg)],
        rng.standard_normal((n_neg, d)),
    )


def perturbed_params(config, seed):
    rng = np.random.default_rng(seed)
    params = init_params(config, seed).astype(np.float64)
    for layer in params.layers:
        for n in layer:
            layer[n] = layer[n] + 0.1 * rng.standard_normal(layer[n].shape)
    return params


def gradient_check(layers, seed=0, h=1e-4):
    """Return the worst relative error over every parameter entry.

    The numeric gradient is a Richardson-extrapolated central difference
    (steps h and h/2), which cancels the O(h^2) truncation term; plain central
    differences at h=1e-4 are off by ~1e-9 absolute, too much for entries whose
    gradient is itself ~1e-7.
    """
    config = ModelConfig(layers, 2, 8, 16, 0.0)
    params = perturbed_params(config, seed)
    rng = np.random.default_rng(seed + 100)
    batch = [random_example(8, 2, 4, rng, f"q{i}") for i in range(3)]
    _, analytic = loss_and_grad(params, batch)

    def central(flat, i, step):
        old = flat[i]
        flat[i] = old + step
        up = loss_and_grad(params, batch)[0]
        flat[i] = old - step
        down = loss_and_grad(params, batch)[0]
        flat[i] = old
        return (up - down) / (2 * step)

    worst = 0.0
    for (_, _, arr), (_, _, g) in zip(params.arrays(), analytic.arrays()):
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            numeric = (4 * central(flat, i, h / 2) - central(flat, i, h)) / 3
            err = abs(gflat[i] - numeric) / max(abs(gflat[i]), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst


class TestLoss:
    def test_one_equal_negative(self):
        assert loss_from_scores(3.0, [3.0]) == pytest.approx(LN2, abs=1e-9)

    def test_twenty_equal_negatives(self):
        assert loss_from_scores(-1.5, [-1.5] * 20) == pytest.approx(LN21, abs=1e-9)

    def test_vector_form(self):
        q = np.array([1.0, 0.0])
        assert loss(q, [2.0, 5.0], [[2.0, -3.0]]) == pytest.approx(LN2, abs=1e-9)

    def test_saturation_is_stable(self):
        assert loss_from_scores(1000.0, [0.0]) == pytest.approx(0.0, abs=1e-300)
        assert loss_from_scores(0.0, [1000.0]) == pytest.approx(1000.0, abs=1e-9)

    def test_permutation_and_shift_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            pos, negs = rng.standard_normal(), rng.standard_normal(20)
            base = loss_from_scores(pos, negs)
            assert loss_from_scores(pos, rng.permutation(negs)) == pytest.approx(base, abs=1e-9)
            c = rng.uniform(-50, 50)
            assert loss_from_scores(pos + c, negs + c) == pytest.approx(base, abs=1e-9)

    def test_requires_negative(self):
        with pytest.raises(ValidationError):
            loss_from_scores(1.0, [])


class TestGradient:
    @pytest.mark.parametrize("layers", [1, 2])
    def test_finite_differences(self, layers):
        assert gradient_check(layers) < 1e-4

    def test_matches_scalar_loss(self):
        config = ModelConfig(1, 2, 8, 16, 0.0)
        params = perturbed_params(config, 1)
        ex = random_example(8, 2, 3, np.random.default_rng(1))
        value, _ = loss_and_grad(params, [ex])
        new_q = encode(ex.query, ex.feedback, params)
        assert value == pytest.approx(loss(new_q, ex.positive, ex.negatives), abs=1e-9)

    def test_saturated_gradient_vanishes(self):
        config = ModelConfig(1, 2, 8, 16, 0.0)
        params = perturbed_params(config, 2)
        rng = np.random.default_rng(2)
        q, fb = rng.standard_normal(8), rng.standard_normal((2, 8))
        out = encode(q, fb, params)
        ex = TrainingExample("q", q, fb, "p", 100 * out, ["n"], -100 * out[None, :])
        g = grad(params, [ex])
        norm = math.sqrt(sum(float((a**2).sum()) for _, _, a in g.arrays()))
        assert norm < 1e-6

    def test_copies_average_to_single(self):
        config = ModelConfig(1, 2, 8, 16, 0.0)
        params = perturbed_params(config, 3)
        ex = random_example(8, 2, 3, np.random.default_rng(3))
        one = grad(params, [ex])
        many = grad(params, [ex] * 5)
        for (_, _, a), (_, _, b) in zip(one.arrays(), many.arrays()):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_ragged_negatives_are_masked(self):
        config = ModelConfig(1, 2, 8, 16, 0.0)
        params = perturbed_params(config, 4)
        rng = np.random.default_rng(4)
        a, b = random_example(8, 2, 2, rng, "a"), random_example(8, 2, 5, rng, "b")
        joint, _ = loss_and_grad(params, [a, b])
        la, _ = loss_and_grad(params, [a])
        lb, _ = loss_and_grad(params, [b])
        assert joint == pytest.approx((la + lb) / 2, abs=1e-12)


class TestAdamW:
    def setup_method(self):
        self.params = perturbed_params(ModelConfig(1, 2, 8, 16, 0.0), 0)

    def test_zero_gradient_no_decay_is_noop(self):
        cfg = TrainConfig(lr=1e-3, weight_decay=0.0)
        new, state = adamw_step(self.params, self.params.zeros_like(),
                                OptimizerState.zeros_like(self.params), cfg)
        assert new.equals(self.params) and state.step == 1

    def test_first_step_size_is_lr(self):
        cfg = TrainConfig(lr=1e-3, weight_decay=0.0)
        rng = np.random.default_rng(0)
        g = self.params.zeros_like()
        for layer in g.layers:
            for n in layer:
                layer[n] = rng.standard_normal(layer[n].shape)
        new, _ = adamw_step(self.params, g, OptimizerState.zeros_like(self.params), cfg)
        for (_, _, a), (_, _, b), (_, _, gg) in zip(new.arrays(), self.params.arrays(), g.arrays()):
            np.testing.assert_allclose(b - a, 1e-3 * np.sign(gg), rtol=1e-4)

    def test_decay_only_on_weights(self):
        cfg = TrainConfig(lr=0.1, weight_decay=0.5)
        new, _ = adamw_step(self.params, self.params.zeros_like(),
                            OptimizerState.zeros_like(self.params), cfg)
        for (_, name, a), (_, _, b) in zip(new.arrays(), self.params.arrays()):
            if name.startswith("W_"):
                np.testing.assert_allclose(a, b * 0.95, rtol=1e-12)
            else:
                np.testing.assert_array_equal(a, b)

    def test_rejects_non_finite_gradient(self):
        g = self.params.zeros_like()
        g.layers[0]["b_Q"][0] = np.nan
        with pytest.raises(ValidationError):
            adamw_step(self.params, g, OptimizerState.zeros_like(self.params), TrainConfig())


@pytest.fixture(scope="module")
def small_data():
    corpus, queries, qrels = generate_synthetic(
        SyntheticConfig(4, 250, 5, 16, 0.3, 0.6, 1, queries_per_cluster=6)
    )
    return (corpus, *split_synthetic_queries(queries, qrels, 2))


class TestExamples:
    def test_negatives_from_rank_window(self, small_data):
        corpus, tq, tqrels, _, _ = small_data
        index = DenseIndex(corpus)
        cfg = TrainConfig(n_negatives=20, negative_rank_range=(10, 200))
        examples = build_examples(tq, tqrels, index, cfg)
        assert len(examples) == len(tq)
        for ex in examples:
            ranked = index.search(tq.vector(ex.query_id), 200).ids
            assert len(ex.negative_ids) == 20
            for nid in ex.negative_ids:
                assert 10 <= ranked.index(nid) + 1 <= 200
                assert tqrels.get((ex.query_id, nid), 0) == 0
            assert ex.positive_id in tqrels.relevant(ex.query_id)
            np.testing.assert_array_equal(ex.feedback, corpus.data[list(index.search(ex.query, 3).rows)])

    def test_positive_forced_even_if_not_retrieved(self):
        data = np.eye(4)[[0, 0, 1, 2, 3]] * np.array([[5], [4], [1], [1], [-9]])
        corpus = VectorStore(4, ["a", "b", "c", "d", "far"], data)
        queries = VectorStore(4, ["q"], [[1.0, 0, 0, 0]])
        qrels = Qrels({("q", "far"): 2})
        cfg = TrainConfig(n_negatives=2, negative_rank_range=(1, 3), prf_depth=1)
        (ex,) = build_examples(queries, qrels, DenseIndex(corpus), cfg)
        assert ex.positive_id == "far"
        assert "far" not in ex.negative_ids

    def test_skip_warning(self):
        corpus = VectorStore(2, ["a", "b", "c"], np.eye(3, 2))
        queries = VectorStore(2, ["q"], [[1.0, 0]])
        with pytest.warns(UserWarning, match="skipped"):
            assert build_examples(queries, Qrels({}), DenseIndex(corpus), TrainConfig()) == []


class TestTrainLoop:
    cfg = ModelConfig(1, 2, 16, 32, 0.1)

    def test_lr_zero_keeps_weights(self, small_data, tmp_path):
        corpus, tq, tqrels, vq, vqrels = small_data
        res = train(corpus, tq, tqrels, vq, vqrels, self.cfg,
                    TrainConfig(lr=0.0, batch_size=4, epochs=3, n_negatives=5), tmp_path)
        init = init_params(self.cfg, 0)
        assert len(res.log) == 3
        for path in res.checkpoints:
            assert load_checkpoint(path).equals(init)
        assert {e.val_ndcg10 for e in res.log} == {res.initial_ndcg10}
        assert res.best_epoch == 1

    def test_outputs(self, small_data, tmp_path):
        corpus, tq, tqrels, vq, vqrels = small_data
        res = train(corpus, tq, tqrels, vq, vqrels, self.cfg,
                    TrainConfig(lr=1e-3, batch_size=4, epochs=2, n_negatives=5), tmp_path)
        lines = (tmp_path / "train_log.tsv").read_text().splitlines()
        assert lines[0] == "epoch\tmean_loss\tval_ndcg10\twall_seconds"
        assert [int(x.split("\t")[0]) for x in lines[1:]] == [1, 2]
        assert resolve_best(tmp_path) == res.best_path
        assert load_checkpoint(res.best_path).equals(res.best_params)
        assert res.best_ndcg10 == max(e.val_ndcg10 for e in res.log)

    def test_deterministic(self, small_data, tmp_path):
        corpus, tq, tqrels, vq, vqrels = small_data
        tc = TrainConfig(lr=1e-3, batch_size=4, epochs=2, n_negatives=5, seed=4)
        for sub in ("a", "b"):
            train(corpus, tq, tqrels, vq, vqrels, self.cfg, tc, tmp_path / sub)
        for name in ("epoch-001.tprf", "epoch-002.tprf", "best"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_divergence_reports_last_good(self, small_data, tmp_path, monkeypatch):
        corpus, tq, tqrels, vq, vqrels = small_data
        real = train_mod.loss_and_grad
        calls = {"n": 0}

        def flaky(params, batch, rng=None):
            calls["n"] += 1
            if calls["n"] > 1:
                raise train_mod.NonFiniteLoss(0, float("nan"))
            return real(params, batch, rng)

        monkeypatch.setattr(train_mod, "loss_and_grad", flaky)
        tc = TrainConfig(lr=1e-3, batch_size=len(tq), epochs=3, n_negatives=5)
        with pytest.raises(TrainingDiverged) as err:
            train(corpus, tq, tqrels, vq, vqrels, self.cfg, tc, tmp_path)
        assert err.value.epoch == 2
        assert err.value.last_good == tmp_path / "epoch-001.tprf"

    def test_dim_mismatch(self, small_data):
        corpus, tq, tqrels, vq, vqrels = small_data
        with pytest.raises(ValidationError):
            train(corpus, tq, tqrels, vq, vqrels, ModelConfig(1, 2, 8, 16), TrainConfig(epochs=1))


def test_grid_shape():
    configs = grid_configs([6, 8, 10, 12], [4, 6, 12])
    assert len(configs) == 13
    assert (configs[-1].layers, configs[-1].heads) == (1, 1)
    assert len(grid_configs([1, 6], [1, 4])) == 4


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(negative_rank_range=(200, 10))
    with pytest.raises(ValidationError):
        TrainConfig(lr=-1.0)
