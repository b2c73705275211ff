import subprocess
import sys

import pytest

from tprf.cli import main, read_config
from tprf.errors import ConfigError
from tprf.metrics import read_run

SMALL_SYNTH = ["--clusters", "4", "--passages-per-cluster", "60", "--dim", "16",
               "--queries-per-cluster", "6", "--val-per-cluster", "2"]  # fmt: skip


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert run_cli("synth", "--out-dir", out, *SMALL_SYNTH) == 0
    return out


def train_argv(data, out, epochs=1):
    return ["train", "--corpus", data / "corpus.dfv", "--train-queries", data / "train_queries.dfv",
            "--val-queries", data / "val_queries.dfv", "--qrels", data / "qrels.txt",
            "--out-dir", out, "--layers", "1", "--heads", "2", "--model-dim", "16",
            "--ffn-dim", "32", "--lr", "1e-3", "--batch-size", "8", "--epochs", epochs,
            "--negatives", "5"]  # fmt: skip


def test_synth_deterministic(tmp_path):
    for sub in ("a", "b"):
        assert run_cli("synth", "--out-dir", tmp_path / sub, *SMALL_SYNTH) == 0
    for name in ("corpus.dfv", "queries.dfv", "qrels.txt", "train_queries.dfv", "val_queries.dfv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("prf", ["none", "avg", "rocchio"])
def test_search_deterministic_and_parseable(data, tmp_path, prf):
    for name in ("a", "b"):
        assert run_cli("search", "--corpus", data / "corpus.dfv", "--queries", data / "queries.dfv",
                       "--prf", prf, "--final-k", 50, "--output", tmp_path / name) == 0
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
    run = read_run(tmp_path / "a")
    assert len(run.rankings) == 24 and run.tag == f"dense-{prf}"


def test_train_then_search_tprf(data, tmp_path):
    assert run_cli(*train_argv(data, tmp_path / "a", epochs=2)) == 0
    assert run_cli(*train_argv(data, tmp_path / "b", epochs=2)) == 0
    for name in ("epoch-001.tprf", "epoch-002.tprf", "best"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert run_cli("search", "--corpus", data / "corpus.dfv", "--queries", data / "val_queries.dfv",
                   "--prf", "tprf", "--checkpoint", tmp_path / "a", "--output", tmp_path / "run") == 0
    assert len(read_run(tmp_path / "run").rankings) == 8


def test_train_one_epoch_writes_checkpoint_and_pointer(data, tmp_path):
    assert run_cli(*train_argv(data, tmp_path)) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["best", "epoch-001.tprf", "train_log.tsv"]


def test_train_grid_layout(data, tmp_path):
    argv = train_argv(data, tmp_path)
    argv[argv.index("--layers") + 1] = "1,2"
    assert run_cli(*argv, "--include-smallest") == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["l1-h1", "l1-h2", "l2-h2"]


def test_eval_table(data, tmp_path, capsys):
    common = ["--corpus", data / "corpus.dfv", "--queries", data / "queries.dfv"]
    run_cli("search", *common, "--output", tmp_path / "none")
    run_cli("search", *common, "--prf", "avg", "--output", tmp_path / "avg")
    capsys.readouterr()
    assert run_cli("eval", "--run", tmp_path / "avg", "--baseline", tmp_path / "none",
                   "--qrels", data / "qrels.txt", "--output", tmp_path / "table.tsv") == 0
    lines = (tmp_path / "table.tsv").read_text().splitlines()
    assert lines[0] == "run\tMAP\tRR\tR@1000\tnDCG@1\tnDCG@3\tnDCG@10\tnDCG@100"
    assert lines[1].startswith("dense-none") and lines[2].startswith("dense-avg")
    assert lines[3].startswith("p(dense-avg vs dense-none)")
    assert capsys.readouterr().out == (tmp_path / "table.tsv").read_text()


def test_config_file_and_override(data, tmp_path):
    cfg = tmp_path / "search.cfg"
    cfg.write_text(f"# search settings\ncorpus = {data / 'corpus.dfv'}\nqueries = {data / 'queries.dfv'}\n"
                   "prf = rocchio\nalpha = 1.0\nbeta = 0.0\nfinal_k = 7\n")
    assert run_cli("search", "--config", cfg, "--output", tmp_path / "a") == 0
    assert run_cli("search", "--config", cfg, "--final-k", 3, "--output", tmp_path / "b") == 0
    a, b = read_run(tmp_path / "a"), read_run(tmp_path / "b")
    assert a.tag == "dense-rocchio"
    assert all(len(v) == 7 for v in a.rankings.values())
    assert all(len(v) == 3 for v in b.rankings.values())


def test_read_config_errors(tmp_path):
    (tmp_path / "bad.cfg").write_text("just words\n")
    with pytest.raises(ConfigError):
        read_config(tmp_path / "bad.cfg")


@pytest.mark.parametrize(
    "argv",
    [
        ["search", "--prf", "tprf"],
        ["search", "--prf", "avg", "--k", "0"],
        ["search", "--prf", "bogus"],
        ["search", "--config", "{bad_cfg}"],
    ],
)
def test_invalid_config_single_line_error(data, tmp_path, capsys, argv):
    bad_cfg = tmp_path / "bad.cfg"
    bad_cfg.write_text("no_such_key = 1\n")
    out = tmp_path / "out" / "run.txt"
    argv = [a.format(bad_cfg=bad_cfg) for a in argv]
    argv += ["--corpus", str(data / "corpus.dfv"), "--queries", str(data / "queries.dfv"), "--output", str(out)]
    assert main(argv) == 2
    err = capsys.readouterr().err
    assert err.count("\n") == 1 and err.startswith("error: ")
    assert not out.parent.exists()


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "tprf.cli", "bench", "--size", "--layers", "1",
                           "--heads", "1"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert proc.stdout.splitlines()[0] == "param_count\t3940096"
