"""Command-line entry point: ``tprf <command> [options]``.

Every option can also come from ``--config FILE`` holding ``key = value``
lines (keys are option names with or without leading dashes, ``-`` or
``_``); explicit command-line flags win over the file.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

from . import bench, metrics
from .baselines import RocchioParams
from .errors import ConfigError, TPRFError
from .index import DenseIndex
from .model import ModelConfig, load_checkpoint
from .pipeline import METHODS, PRFPipeline, to_run
from .store import (
    SyntheticConfig,
    generate_synthetic,
    ingest_text,
    load_store,
    save_store,
    split_synthetic_queries,
)
from .train import TrainConfig, grid_configs, resolve_best, train


class CLIError(TPRFError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CLIError(f"usage: {message}")


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def read_config(path: str | Path) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip().lstrip("-").replace("_", "-")] = value.strip()
    return out


def _config_argv(sub: argparse.ArgumentParser, cfg: dict[str, str]) -> list[str]:
    options = {}
    for action in sub._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                options[opt[2:]] = action
    argv = []
    for key, value in cfg.items():
        action = options.get(key)
        if action is None or key == "config":
            raise ConfigError(f"unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() in ("1", "true", "yes", "on"):
                argv.append(f"--{key}")
            elif value.lower() not in ("0", "false", "no", "off"):
                raise ConfigError(f"config key {key!r} expects a boolean, got {value!r}")
        else:
            argv += [f"--{key}", value]
    return argv


# -- commands --------------------------------------------------------------------------------------


def cmd_ingest(args) -> None:
    store = ingest_text(args.input, args.dim)
    save_store(store, args.output)
    print(f"wrote {len(store)} vectors (dim {store.dim}) to {args.output}")


def cmd_synth(args) -> None:
    cfg = SyntheticConfig(
        args.clusters,
        args.passages_per_cluster,
        args.relevant_per_cluster,
        args.dim,
        args.sigma_rel,
        args.sigma_query,
        args.seed,
        args.queries_per_cluster,
    )
    corpus, queries, qrels = generate_synthetic(cfg)
    if args.val_per_cluster:
        split = split_synthetic_queries(queries, qrels, args.val_per_cluster)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_store(corpus, out / "corpus.dfv")
    save_store(queries, out / "queries.dfv")
    metrics.write_qrels(qrels, out / "qrels.txt")
    if args.val_per_cluster:
        save_store(split[0], out / "train_queries.dfv")
        save_store(split[2], out / "val_queries.dfv")
    print(f"wrote {len(corpus)} passages, {len(queries)} queries, {len(qrels)} judgments to {out}")


def _pipeline(args, index: DenseIndex) -> PRFPipeline:
    params = None
    if args.prf == "tprf":
        if not args.checkpoint:
            raise ConfigError("--prf tprf requires --checkpoint")
        ckpt = Path(args.checkpoint)
        params = load_checkpoint(resolve_best(ckpt) if ckpt.is_dir() else ckpt)
    return PRFPipeline(
        index,
        args.prf,
        k=args.k,
        final_k=args.final_k,
        rocchio=RocchioParams(args.alpha, args.beta),
        params=params,
    )


def _check_pipeline_args(args) -> None:
    if args.prf == "tprf" and not args.checkpoint:
        raise ConfigError("--prf tprf requires --checkpoint")
    if args.k < 1:
        raise ConfigError(f"--k must be >= 1, got {args.k}")


def cmd_search(args) -> None:
    _check_pipeline_args(args)
    corpus = load_store(args.corpus)
    queries = load_store(args.queries)
    pipe = _pipeline(args, DenseIndex(corpus))
    results = pipe.run(queries)
    metrics.write_run(to_run(results, args.tag or f"dense-{args.prf}"), args.output)
    print(f"wrote run for {len(results)} queries to {args.output}")


def cmd_train(args) -> None:
    configs = grid_configs(
        args.layers, args.heads, args.include_smallest, args.model_dim, args.ffn_dim, args.dropout
    )
    tc = TrainConfig(
        lr=args.lr,
        batch_size=args.batch_size,
        epochs=args.epochs,
        n_negatives=args.negatives,
        negative_rank_range=(args.neg_low, args.neg_high),
        prf_depth=args.k,
        seed=args.seed,
        weight_decay=args.weight_decay,
    )
    corpus = load_store(args.corpus)
    train_q = load_store(args.train_queries)
    val_q = load_store(args.val_queries)
    qrels = metrics.read_qrels(args.qrels)
    val_qrels = metrics.read_qrels(args.val_qrels) if args.val_qrels else qrels
    out = Path(args.out_dir)
    for mc in configs:
        target = out if len(configs) == 1 else out / f"l{mc.layers}-h{mc.heads}"
        res = train(corpus, train_q, qrels, val_q, val_qrels, mc, tc, target)
        print(
            f"{target}\tbest={res.best_path}\tepoch={res.best_epoch}\t"
            f"val_ndcg10={res.best_ndcg10:.4f}\tinitial={res.initial_ndcg10:.4f}\t"
            f"log={target / 'train_log.tsv'}"
        )


def cmd_eval(args) -> None:
    qrels = metrics.read_qrels(args.qrels)
    run = metrics.read_run(args.run)
    report = metrics.evaluate(run, qrels, args.rel_threshold, args.gain)
    reports = [report]
    if args.baseline:
        base = metrics.evaluate(metrics.read_run(args.baseline), qrels, args.rel_threshold, args.gain)
        reports = [base, metrics.compare(report, base)]
    table = metrics.format_table(reports)
    if args.output:
        Path(args.output).write_text(table)
    sys.stdout.write(table)


def cmd_bench(args) -> None:
    if args.size:
        if args.checkpoint:
            mc = load_checkpoint(args.checkpoint).config
        else:
            mc = ModelConfig(args.layers[0], args.heads[0], args.model_dim, args.ffn_dim)
        sys.stdout.write(bench.model_size_report(mc, with_optimizer=True).tsv())
        return
    _check_pipeline_args(args)
    corpus = load_store(args.corpus)
    queries = load_store(args.queries)
    pipe = _pipeline(args, DenseIndex(corpus))
    rep = bench.measure_latency(pipe, queries, args.n, args.warmup, args.seed)
    text = bench.LatencyReport.TSV_HEADER + "\n" + rep.tsv() + "\n"
    if args.output:
        Path(args.output).write_text(text)
    sys.stdout.write(text)


def cmd_sweep(args) -> None:
    _check_pipeline_args(args)
    corpus = load_store(args.corpus)
    queries = load_store(args.queries)
    pipe = _pipeline(args, DenseIndex(corpus))
    reports = bench.sweep_prf_depth(pipe, args.ks, queries, args.n, args.warmup, args.seed)
    cost = bench.TextPRFCostModel()
    modeled = [
        bench.LatencyReport("text-prf-model", k, 1, cost.latency_ms(k), 0.0,
                            cost.latency_ms(k), cost.latency_ms(k), "cost model")
        for k in args.ks
    ]  # fmt: skip
    text = bench.sweep_csv(reports + modeled)
    if args.output:
        Path(args.output).write_text(text)
    sys.stdout.write(text)


# -- parser ----------------------------------------------------------------------------------------


def _add_pipeline_opts(p):
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--prf", choices=METHODS, default="none")
    p.add_argument("--k", type=int, default=3, help="PRF depth")
    p.add_argument("--final-k", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.5, help="Rocchio query weight")
    p.add_argument("--beta", type=float, default=0.5, help="Rocchio feedback weight")
    p.add_argument("--checkpoint", help="TPRF checkpoint file or training output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tprf", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="convert id<TAB>floats text to a DFV1 store")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--dim", type=int, default=768)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a seeded clustered corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--clusters", type=int, default=8)
    p.add_argument("--passages-per-cluster", type=int, default=100)
    p.add_argument("--relevant-per-cluster", type=int, default=5)
    p.add_argument("--queries-per-cluster", type=int, default=1)
    p.add_argument("--val-per-cluster", type=int, default=0)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--sigma-rel", type=float, default=0.3)
    p.add_argument("--sigma-query", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=7)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("search", help="run (PRF) dense retrieval, write a TREC run")
    _add_pipeline_opts(p)
    p.add_argument("--tag")
    p.set_defaults(func=cmd_search)
    p._option_string_actions["--output"].required = True

    p = sub.add_parser("train", help="train TPRF (a grid when several layers/heads are given)")
    p.add_argument("--corpus", required=True)
    p.add_argument("--train-queries", required=True)
    p.add_argument("--val-queries", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--val-qrels")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--layers", type=_ints, default=[6])
    p.add_argument("--heads", type=_ints, default=[12])
    p.add_argument("--include-smallest", action="store_true", help="also train l=1, h=1")
    p.add_argument("--model-dim", type=int, default=768)
    p.add_argument("--ffn-dim", type=int, default=1024)
    p.add_argument("--dropout", type=float, default=0.2)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=512)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--negatives", type=int, default=20)
    p.add_argument("--neg-low", type=int, default=10)
    p.add_argument("--neg-high", type=int, default=200)
    p.add_argument("--weight-decay", type=float, default=0.01)  # artifact default
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a run, optionally against a baseline run")
    p.add_argument("--run", required=True)
    p.add_argument("--baseline")
    p.add_argument("--qrels", required=True)
    p.add_argument("--rel-threshold", type=int, default=metrics.DEFAULT_REL_THRESHOLD)
    p.add_argument("--gain", choices=("linear", "exp"), default="linear")
    p.add_argument("--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="query latency (or --size: model size) report")
    p.add_argument("--size", action="store_true")
    p.add_argument("--corpus")
    p.add_argument("--queries")
    p.add_argument("--prf", choices=METHODS, default="none")
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--final-k", type=int, default=1000)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--checkpoint")
    p.add_argument("--layers", type=_ints, default=[6])
    p.add_argument("--heads", type=_ints, default=[12])
    p.add_argument("--model-dim", type=int, default=768)
    p.add_argument("--ffn-dim", type=int, default=1024)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--output")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="latency as a function of PRF depth (CSV)")
    _add_pipeline_opts(p)
    p.add_argument("--ks", type=_ints, default=[1, 3, 5, 10, 20, 50, 100])
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.set_defaults(func=cmd_sweep)

    for name, sp in sub.choices.items():
        sp.add_argument("--config", help="key = value file; command-line flags override it")
    return parser


def _config_path(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    commands = parser._subparsers._group_actions[0].choices
    cfg_path = _config_path(argv)
    if cfg_path is not None:
        i = next((j for j, tok in enumerate(argv) if tok in commands), None)
        if i is None:
            raise CLIError("usage: --config must follow a command")
        extra = _config_argv(commands[argv[i]], read_config(cfg_path))
        argv = argv[: i + 1] + extra + argv[i + 1 :]
    args = parser.parse_args(argv)
    if args.command == "bench" and not args.size and not (args.corpus and args.queries):
        raise CLIError("usage: bench needs --corpus and --queries (or --size)")
    return args


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
        logging.basicConfig(
            level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s"
        )
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            args.func(args)
    except (TPRFError, OSError, ValueError) as exc:
        msg = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
