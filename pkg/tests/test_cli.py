import subprocess
import sys

import pytest

from shopalign import cli, corpus, typeahead


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def world(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli")
    assert cli.main(["--out-dir", str(out), "synth", "generate", "--preset", "tiny",
                     "--cross-train", "300", "--cross-test", "100"]) == 0
    return out


def test_end_to_end_commands(world, capsys):
    s = world / "synth"
    code, out, _ = run(capsys, "corpus", "stats", "--events", s / "events_a.tsv")
    header, values = out.splitlines()
    assert code == 0 and header.split("\t")[:3] == ["sessions", "events", "skus"]
    assert dict(zip(header.split("\t"), values.split("\t")))["sessions"] == "1500"
    for shop in "ab":
        assert run(capsys, "corpus", "build", "--events", s / f"events_{shop}.tsv",
                   "--output", world / f"sessions_{shop}.tsv")[0] == 0
        assert run(capsys, "--deterministic", "embed", "train", "--sessions", world / f"sessions_{shop}.tsv",
                   "--output", world / f"{shop}.vec", "--dim", 16, "--epochs", 2, "--min-count", 1)[0] == 0
    common = ["--source", world / "a.vec", "--target", world / "b.vec"]
    cats = ["--catalog-a", s / "catalog_a.tsv", "--catalog-b", s / "catalog_b.tsv"]
    cross = ["--cross-a", s / "cross_train_a.tsv", "--cross-b", s / "cross_train_b.tsv"]
    assert run(capsys, "align", "im", *common, *cats, "--clusters", 10, "--output", world / "im.map")[0] == 0
    assert run(capsys, "align", "nm", *common, "--output", world / "nm.map")[0] == 0
    assert run(capsys, "align", "am", *common, *cats, "--output", world / "am.map")[0] == 0
    assert run(capsys, "align", "um", *common, *cross, "--output", world / "um.map")[0] == 0
    assert run(capsys, "align", "tm", *common, *cross, "--epochs", 2, "--hidden", 8, "--output", world / "tm.npz")[0] == 0

    test = ["--cross-a", s / "cross_test_a.tsv", "--cross-b", s / "cross_test_b.tsv"]
    code, out, _ = run(capsys, "eval", "cross", *common, *test, "--map", world / "im.map", "--output", world / "im.jsonl")
    assert code == 0 and "task=FIP" in out and "task=AIP" in out
    assert run(capsys, "eval", "cross", *common, *test, "--model", world / "tm.npz")[0] == 0
    assert run(capsys, "eval", "cross", *common, *test, "--popularity", world / "sessions_b.tsv")[0] == 0
    assert run(capsys, "eval", "cross", *common, *test)[0] == 3
    code, out, _ = run(capsys, "eval", "nep", "--sessions", world / "sessions_a.tsv", "--embeddings", world / "a.vec")
    assert code == 0 and "task=NEP" in out
    code, out, _ = run(capsys, "eval", "probe", "--embeddings", world / "b.vec", "--catalog", s / "catalog_b.tsv",
                       "--map", world / "im.map", "--source-embeddings", world / "a.vec",
                       "--source-catalog", s / "catalog_a.tsv", "--runs", 2)
    assert code == 0 and "chance\t0.25000" in out
    assert run(capsys, "eval", "project", "--embeddings", world / "a.vec", "--catalog", s / "catalog_a.tsv",
               "--output", world / "proj.tsv")[0] == 0
    assert len((world / "proj.tsv").read_text().splitlines()) > 10
    code, out, _ = run(capsys, "eval", "errors", "--report", world / "im.jsonl", "--task", "FIP",
                       "--catalog", s / "catalog_b.tsv", "--limit", 3)
    assert code == 0 and out.startswith("misses") and len(out.splitlines()) == 4

    # type-ahead: queries keyed to the last product's activity
    sessions_b = corpus.read_sessions(world / "sessions_b.tsv")
    act_b = corpus.read_catalog(s / "catalog_b.tsv").activity_of()
    typeahead.write_queries(world / "q.tsv", typeahead.generate_queries(sessions_b[:300], act_b, seed=1))
    act_a = corpus.read_catalog(s / "catalog_a.tsv").activity_of()
    src = corpus.read_sessions(s / "cross_test_a.tsv")
    typeahead.write_queries(world / "tq.tsv", typeahead.generate_queries(src, act_a, seed=2))
    assert run(capsys, "typeahead", "train", "--queries", world / "q.tsv", "--sessions", world / "sessions_b.tsv",
               "--embeddings", world / "b.vec", "--hidden", 8, "--epochs", 1, "--output", world / "lm.npz")[0] == 0
    base = ["typeahead", "eval", "--model", world / "lm.npz", "--train-queries", world / "q.tsv",
            "--train-sessions", world / "sessions_b.tsv", "--test-queries", world / "tq.tsv",
            "--source-sessions", s / "cross_test_a.tsv", "--source", world / "a.vec", "--target", world / "b.vec"]
    for extra in (["--intent", "map", "--map", world / "um.map"], ["--intent", "tm", "--tm-model", world / "tm.npz"],
                  ["--intent", "none"], ["--intent", "popularity", "--seed-length", 1]):
        code, out, _ = run(capsys, *base, *extra)
        assert code == 0 and "task=typeahead" in out


def test_exit_codes(world, tmp_path, capsys):
    assert run(capsys, "eval", "nep", "--sessions", tmp_path / "missing.tsv", "--embeddings", "x.vec")[0] == 4
    (tmp_path / "bad.tsv").write_text("garbage\n" * 5)
    assert run(capsys, "corpus", "stats", "--events", tmp_path / "bad.tsv")[0] == 3
    (tmp_path / "m.cfg").write_text("bogus_key = 1\n")
    assert run(capsys, "run", tmp_path / "m.cfg")[0] == 3
    (tmp_path / "m.cfg").write_text(f"out_dir = {tmp_path / 'r'}\nstages = embed\n")
    code, _, err = run(capsys, "run", tmp_path / "m.cfg")
    assert code == 6 and "corpus" in err
    assert run(capsys, "report", tmp_path)[0] == 3
    with pytest.raises(SystemExit) as info:
        cli.main(["align", "xx"])
    assert info.value.code == 2


def test_run_and_report_commands(world, tmp_path, capsys):
    (tmp_path / "m.cfg").write_text("synth.preset = tiny\nstages = synth,corpus\n")
    code, out, _ = run(capsys, "--out-dir", tmp_path / "r", "--seed", 3, "run", tmp_path / "m.cfg")
    assert code == 0 and "stages run: synth, corpus" in out
    code, out, _ = run(capsys, "--out-dir", tmp_path / "r", "--seed", 3, "run", tmp_path / "m.cfg")
    assert "none (all up to date)" in out
    assert "seed = 3" in (tmp_path / "r" / "manifest.out").read_text()


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "shopalign.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for command in ("synth", "corpus", "embed", "align", "eval", "typeahead", "run", "report"):
        assert command in res.stdout
