"""Supervised TPRF training with hard negatives and AdamW."""

from __future__ import annotations

import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tape
from .errors import TPRFError, ValidationError
from .index import DenseIndex
from .metrics import mean_ndcg
from .model import (
    NO_DECAY,
    ModelConfig,
    Parameters,
    encoder_forward,
    init_params,
    save_checkpoint,
)
from .pipeline import PRFPipeline
from .store import Qrels, VectorStore

log = logging.getLogger(__name__)

BEST_POINTER = "best"
LOG_NAME = "train_log.tsv"


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-5
    batch_size: int = 512
    epochs: int = 50
    n_negatives: int = 20
    negative_rank_range: tuple[int, int] = (10, 200)
    prf_depth: int = 3
    seed: int = 0
    adamw_beta1: float = 0.9  # artifact default
    adamw_beta2: float = 0.999  # artifact default
    adamw_eps: float = 1e-8  # artifact default
    weight_decay: float = 0.01  # artifact default

    def __post_init__(self):
        low, high = self.negative_rank_range
        if not 1 <= low < high:
            raise ValidationError(f"negative_rank_range needs 1 <= low < high, got {low, high}")
        if not self.lr >= 0:
            raise ValidationError(f"lr must be >= 0, got {self.lr}")
        for name in ("batch_size", "epochs", "n_negatives", "prf_depth"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be >= 1")


@dataclass
class TrainingExample:
    query_id: str
    query: np.ndarray
    feedback: np.ndarray  # (k, d)
    positive_id: str
    positive: np.ndarray
    negative_ids: list[str]
    negatives: np.ndarray  # (n_neg, d)

    def __post_init__(self):
        if len(self.negative_ids) == 0:
            raise ValidationError(f"{self.query_id}: negatives must be non-empty")
        if self.positive_id in self.negative_ids:
            raise ValidationError(f"{self.query_id}: positive also sampled as a negative")


@dataclass
class OptimizerState:
    m: Parameters
    v: Parameters
    step: int = 0

    @classmethod
    def zeros_like(cls, params: Parameters) -> OptimizerState:
        return cls(params.zeros_like(), params.zeros_like(), 0)


class NonFiniteLoss(TPRFError):
    def __init__(self, index: int, value: float):
        self.index = index
        super().__init__(f"non-finite loss {value} at batch example {index}")


class TrainingDiverged(TPRFError):
    def __init__(self, epoch: int, last_good: Path | None):
        self.epoch = epoch
        self.last_good = last_good
        super().__init__(f"mean loss became non-finite in epoch {epoch}; last good: {last_good}")


# -- examples --------------------------------------------------------------------------------------


def build_examples(
    queries: VectorStore, qrels: Qrels, index: DenseIndex, cfg: TrainConfig
) -> list[TrainingExample]:
    """One example per query: top-k feedback, a sampled judged positive and
    ``n_negatives`` unjudged negatives from first-stage ranks ``[low, high]``."""
    rng = np.random.default_rng(cfg.seed)
    low, high = cfg.negative_rank_range
    data = index.store.data
    examples, skipped, short = [], 0, 0
    for qid, q in queries:
        positives = sorted(p for p in qrels.relevant(qid) if p in index.store)
        if not positives:
            skipped += 1
            continue
        ranked = index.search(q, high, qid)
        judged = set(qrels.relevant(qid))
        window = [
            (pid, row)
            for pid, row in zip(ranked.ids[low - 1 : high], ranked.rows[low - 1 : high])
            if pid not in judged
        ]
        if not window:
            skipped += 1
            continue
        if len(window) < cfg.n_negatives:
            short += 1
            picks = np.arange(len(window))
        else:
            picks = np.sort(rng.choice(len(window), cfg.n_negatives, replace=False))
        pos_id = positives[rng.integers(len(positives))]
        examples.append(
            TrainingExample(
                qid,
                np.asarray(q),
                data[list(ranked.rows[: cfg.prf_depth])],
                pos_id,
                index.store.vector(pos_id),
                [window[i][0] for i in picks],
                data[[window[i][1] for i in picks]],
            )
        )
    if skipped:
        warnings.warn(f"skipped {skipped} queries without usable relevant/negative passages")
    if short:
        warnings.warn(
            f"{short} queries had fewer than {cfg.n_negatives} negatives in the rank window; "
            "used all available"
        )
    return examples


# -- loss and gradients ----------------------------------------------------------------------------


def loss_from_scores(pos_score: float, neg_scores) -> float:
    """``-log(e^pos / (e^pos + sum e^neg))`` via max-subtracted log-sum-exp."""
    neg = np.asarray(neg_scores, dtype=np.float64)
    if neg.size == 0:
        raise ValidationError("need at least one negative")
    z = np.concatenate([[float(pos_score)], neg.ravel()])
    zmax = z.max()
    return float(zmax + math.log(np.exp(z - zmax).sum()) - z[0])


def loss(new_query, positive, negatives) -> float:
    q = np.asarray(new_query, dtype=np.float64)
    negs = np.asarray(negatives, dtype=np.float64)
    if negs.size == 0:
        raise ValidationError("need at least one negative")
    negs = negs.reshape(-1, q.shape[0]) if negs.ndim == 1 else negs
    pos = np.asarray(positive, dtype=np.float64)
    if pos.shape != q.shape or negs.shape[1] != q.shape[0]:
        raise ValidationError("dimension mismatch between query and passages")
    return loss_from_scores(q @ pos, negs @ q)


def _batch_arrays(batch: list[TrainingExample], dtype):
    k = batch[0].feedback.shape[0]
    if any(ex.feedback.shape[0] != k for ex in batch):
        raise ValidationError("all examples in a batch need the same PRF depth")
    stacked = np.stack(
        [np.concatenate([ex.query[None, :], ex.feedback]) for ex in batch]
    ).astype(dtype)
    m = 1 + max(len(ex.negative_ids) for ex in batch)
    d = stacked.shape[-1]
    cands = np.zeros((len(batch), m, d), dtype=dtype)
    mask = np.zeros((len(batch), m), dtype=bool)
    for i, ex in enumerate(batch):
        n = 1 + len(ex.negative_ids)
        cands[i, 0] = ex.positive
        cands[i, 1:n] = ex.negatives
        mask[i, :n] = True
    return stacked, cands, mask


def loss_and_grad(
    params: Parameters,
    batch: list[TrainingExample],
    dropout_rng: np.random.Generator | None = None,
) -> tuple[float, Parameters]:
    """Mean batch loss and its gradient w.r.t. every parameter.

    Dropout is active iff ``dropout_rng`` is given and the config's rate is > 0.
    """
    if not batch:
        raise ValidationError("batch must be non-empty")
    stacked, cands, mask = _batch_arrays(batch, params.dtype)
    tape = Tape()
    nodes = [{n: tape.param(a) for n, a in layer.items()} for layer in params.layers]
    out = encoder_forward(
        tape, stacked, nodes, params.config, dropout_active=dropout_rng is not None, rng=dropout_rng
    )
    b, d = out.shape
    logits = tape.reshape(
        tape.matmul(tape.reshape(out, (b, 1, d)), tape.const(np.swapaxes(cands, 1, 2))), (b, -1)
    )
    per_example = tape.softmax_xent(logits, mask)
    bad = np.flatnonzero(~np.isfinite(per_example.value))
    if bad.size:
        raise NonFiniteLoss(int(bad[0]), float(per_example.value[bad[0]]))
    total = tape.mean(per_example, axis=0)
    tape.backward(total)
    grads = Parameters(
        params.config,
        [
            {n: (node.grad if node.grad is not None else np.zeros_like(node.value))
             for n, node in layer.items()}
            for layer in nodes
        ],
    )  # fmt: skip
    return float(total.value), grads


def grad(
    params: Parameters,
    batch: list[TrainingExample],
    config: ModelConfig | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> Parameters:
    if config is not None and config != params.config:
        raise ValidationError("config does not match params")
    return loss_and_grad(params, batch, dropout_rng)[1]


def adamw_step(
    params: Parameters, grads: Parameters, state: OptimizerState, cfg: TrainConfig
) -> tuple[Parameters, OptimizerState]:
    """Decoupled-weight-decay Adam with bias correction; biases and layer-norm
    parameters are not decayed."""
    if not grads.is_finite():
        raise ValidationError("non-finite gradient entries")
    b1, b2 = cfg.adamw_beta1, cfg.adamw_beta2
    step = state.step + 1
    c1 = 1.0 - b1**step
    c2 = 1.0 - b2**step
    new_p, new_m, new_v = [], [], []
    for pl, gl, ml, vl in zip(params.layers, grads.layers, state.m.layers, state.v.layers):
        P, M, V = {}, {}, {}
        for n, p in pl.items():
            g = gl[n]
            m = b1 * ml[n] + (1.0 - b1) * g
            v = b2 * vl[n] + (1.0 - b2) * g * g
            if n not in NO_DECAY and cfg.weight_decay:
                p = p * (1.0 - cfg.lr * cfg.weight_decay)
            P[n] = (p - cfg.lr * (m / c1) / (np.sqrt(v / c2) + cfg.adamw_eps)).astype(p.dtype)
            M[n], V[n] = m, v
        new_p.append(P)
        new_m.append(M)
        new_v.append(V)
    return (
        Parameters(params.config, new_p),
        OptimizerState(Parameters(params.config, new_m), Parameters(params.config, new_v), step),
    )


# -- training loop ---------------------------------------------------------------------------------


@dataclass
class EpochLog:
    epoch: int
    mean_loss: float
    val_ndcg10: float
    wall_seconds: float

    def tsv(self) -> str:
        return f"{self.epoch}\t{self.mean_loss:.8f}\t{self.val_ndcg10:.6f}\t{self.wall_seconds:.3f}"


@dataclass
class TrainResult:
    best_params: Parameters
    best_epoch: int
    best_ndcg10: float
    initial_ndcg10: float
    log: list[EpochLog] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)
    best_path: Path | None = None


def validation_ndcg(
    index: DenseIndex, queries: VectorStore, qrels: Qrels, params: Parameters, k: int
) -> float:
    """Mean nDCG@10 of the full two-stage TPRF pipeline."""
    results = PRFPipeline(index, "tprf", k=k, final_k=10, params=params).run(queries)
    return mean_ndcg({r.query_id: list(r.ids) for r in results}, qrels, 10)


def train(
    corpus: VectorStore,
    train_queries: VectorStore,
    qrels: Qrels,
    val_queries: VectorStore,
    val_qrels: Qrels,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: str | Path | None = None,
    init: Parameters | None = None,
) -> TrainResult:
    """Train, validate after every epoch and keep the best-nDCG@10 checkpoint.

    With ``out_dir`` set, writes ``epoch-NNN.tprf`` per epoch, a ``best``
    pointer file naming the best one, and ``train_log.tsv``.
    """
    tc = train_config
    if corpus.dim != model_config.model_dim:
        raise ValidationError(f"corpus dim {corpus.dim} != model_dim {model_config.model_dim}")
    index = DenseIndex(corpus)
    examples = build_examples(train_queries, qrels, index, tc)
    if not examples:
        raise ValidationError("no training examples could be built")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / LOG_NAME).write_text("epoch\tmean_loss\tval_ndcg10\twall_seconds\n")

    start = init if init is not None else init_params(model_config, tc.seed)
    params = start.astype(np.float64)
    state = OptimizerState.zeros_like(params)
    rng = np.random.default_rng(np.random.SeedSequence(tc.seed).spawn(1)[0])
    dropout_rng = rng if model_config.dropout > 0 else None

    initial = validation_ndcg(index, val_queries, val_qrels, start.astype(np.float32), tc.prf_depth)
    result = TrainResult(start.astype(np.float32), 0, initial, initial)
    best_val = -math.inf
    last_good: Path | None = None
    for epoch in range(1, tc.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(examples))
        total = 0.0
        for s in range(0, len(order), tc.batch_size):
            batch = [examples[i] for i in order[s : s + tc.batch_size]]
            try:
                batch_loss, g = loss_and_grad(params, batch, dropout_rng)
            except NonFiniteLoss:
                raise TrainingDiverged(epoch, last_good) from None
            total += batch_loss * len(batch)
            params, state = adamw_step(params, g, state, tc)
        mean_loss = total / len(examples)
        if not math.isfinite(mean_loss) or not params.is_finite():
            raise TrainingDiverged(epoch, last_good)

        snapshot = params.astype(np.float32)
        val = validation_ndcg(index, val_queries, val_qrels, snapshot, tc.prf_depth)
        entry = EpochLog(epoch, mean_loss, val, time.perf_counter() - t0)
        result.log.append(entry)
        log.info("epoch %d loss %.6f val nDCG@10 %.4f", epoch, mean_loss, val)
        if val > best_val:
            best_val = val
            result.best_params, result.best_epoch, result.best_ndcg10 = snapshot, epoch, val
        if out is not None:
            path = out / f"epoch-{epoch:03d}.tprf"
            save_checkpoint(path, snapshot)
            result.checkpoints.append(path)
            last_good = path
            with open(out / LOG_NAME, "a") as f:
                f.write(entry.tsv() + "\n")
            (out / BEST_POINTER).write_text(f"epoch-{result.best_epoch:03d}.tprf\n")
            result.best_path = out / f"epoch-{result.best_epoch:03d}.tprf"
    return result


def resolve_best(out_dir: str | Path) -> Path:
    out = Path(out_dir)
    return out / (out / BEST_POINTER).read_text().strip()


def grid_configs(
    layers: list[int],
    heads: list[int],
    include_smallest: bool = True,
    model_dim: int = 768,
    ffn_dim: int = 1024,
    dropout: float = 0.2,
) -> list[ModelConfig]:
    """Every ``layers x heads`` combination, plus the 1-layer/1-head model."""
    configs = [ModelConfig(l, h, model_dim, ffn_dim, dropout) for l in layers for h in heads]
    if include_smallest and all((c.layers, c.heads) != (1, 1) for c in configs):
        configs.append(ModelConfig(1, 1, model_dim, ffn_dim, dropout))
    return configs
