import csv
import json

import pytest

from normguard.cli import EXIT_DATA, EXIT_IO, EXIT_OK, EXIT_USAGE, main


def _files(d):
    return {p.name: p.read_bytes() for p in sorted(d.iterdir()) if p.is_file()}


@pytest.fixture
def corpus(tmp_path):
    d = tmp_path / "c"
    assert main(["gen", "--rows", "300", "--cols", "64", "--seed", "7", "--out-dir", str(d)]) == EXIT_OK
    return d / "corpus.bin"


def test_gen_writes_corpus_and_manifest(corpus):
    files = _files(corpus.parent)
    assert set(files) == {"corpus.bin", "corpus.bin.json", "manifest.json"}
    assert len(files["corpus.bin"]) == 300 * 64
    m = json.loads(files["manifest.json"])
    assert m["command"] == "gen" and m["seed"] == 7 and m["corpus"]["generator"] == "gaussian-logits"


def test_gen_idempotent_and_byte_identical(tmp_path, corpus):
    before = {p: p.stat().st_mtime_ns for p in corpus.parent.iterdir()}
    assert main(["gen", "--rows", "300", "--cols", "64", "--seed", "7", "--out-dir", str(corpus.parent)]) == 0
    assert {p: p.stat().st_mtime_ns for p in corpus.parent.iterdir()} == before
    d2 = tmp_path / "again"
    main(["--seed", "7", "gen", "--rows", "300", "--cols", "64", "--out-dir", str(d2)])
    assert _files(d2) == _files(corpus.parent)


def test_gen_single_element(tmp_path):
    assert main(["gen", "--rows", "1", "--cols", "1", "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "corpus.bin").stat().st_size == 1


def test_softmax_float_stats(tmp_path, corpus):
    out = tmp_path / "sm"
    assert main(["softmax", "--corpus", str(corpus), "--mode", "float", "--out-dir", str(out)]) == 0
    s = json.loads((out / "softmax_stats.json").read_text())
    assert s["max"] <= 1e-6 and s["rows_evaluated"] == 300 and s["latency_cycles"] == 64
    rows = list(csv.DictReader((out / "softmax_hist.csv").open()))
    assert len(rows) == 64 + 2 and sum(int(r["count"]) for r in rows) == 300


def test_layernorm_bit_latency(tmp_path, corpus):
    out = tmp_path / "ln"
    args = ["layernorm", "--corpus", str(corpus), "--mode", "bit", "--newton-iters", "2", "--out-dir", str(out)]
    assert main(args) == 0
    s = json.loads((out / "layernorm_stats.json").read_text())
    assert s["latency_cycles"] == 65 and s["config"]["newton_iters"] == 2


def test_format_selection(tmp_path, corpus):
    out = tmp_path / "j"
    assert main(["--format", "json", "softmax", "--corpus", str(corpus), "--out-dir", str(out)]) == 0
    assert set(_files(out)) == {"softmax_stats.json", "manifest.json"}


def test_missing_corpus_no_outputs(tmp_path):
    out = tmp_path / "o"
    assert main(["softmax", "--corpus", str(tmp_path / "nope.bin"), "--out-dir", str(out)]) == EXIT_IO
    assert not out.exists()


def test_malformed_corpus_exit_4(tmp_path, corpus, capsys):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(corpus.read_bytes()[:100])
    (tmp_path / "bad.bin.json").write_bytes(corpus.with_name("corpus.bin.json").read_bytes())
    out = tmp_path / "o"
    assert main(["softmax", "--corpus", str(bad), "--out-dir", str(out)]) == EXIT_DATA
    assert "byte offset 100" in capsys.readouterr().err
    assert not out.exists()


def test_sweep_csv(tmp_path, corpus):
    out = tmp_path / "sw"
    args = ["sweep", "--corpus", str(corpus), "--knob", "newton_iters", "--levels", "1", "2", "3", "4",
            "--out-dir", str(out)]
    assert main(args) == 0
    rows = list(csv.DictReader((out / "sweep.csv").open()))
    assert list(rows[0]) == ["knob", "level", "mean_error", "max_error", "rows_evaluated"]
    means = [float(r["mean_error"]) for r in rows]
    assert len(rows) == 4 and all(a > b for a, b in zip(means, means[1:]))
    first = (out / "sweep.csv").read_bytes()
    (out / "sweep.csv").unlink()
    assert main(args) == 0
    assert (out / "sweep.csv").read_bytes() == first


def test_sweep_usage_errors(tmp_path, corpus):
    out = tmp_path / "sw"
    assert main(["sweep", "--corpus", str(corpus), "--knob", "newton_iters", "--levels", "2",
                 "--out-dir", str(out)]) == EXIT_USAGE
    assert not out.exists()
    with pytest.raises(SystemExit) as e:
        main(["sweep", "--corpus", str(corpus), "--knob", "temperature", "--levels", "1", "2"])
    assert e.value.code == EXIT_USAGE


def test_luts(tmp_path):
    assert main(["luts", "--out-dir", str(tmp_path)]) == 0
    coarse = (tmp_path / "softmax_coarse.hex").read_text().splitlines()
    residual = (tmp_path / "softmax_residual.hex").read_text().splitlines()
    assert len(coarse) == 7 and len(residual) == 8
    assert coarse[:2] == ["8000", "2f17"]


def test_invalid_config_is_usage_error(tmp_path):
    assert main(["luts", "--radix", "6", "--out-dir", str(tmp_path)]) == EXIT_USAGE
    assert main(["--jobs", "0", "luts", "--out-dir", str(tmp_path)]) == EXIT_USAGE


@pytest.mark.parametrize("family,labels", [
    ("softmax", ["softmax-bit", "softmax-float", "softmax-exact", "softmax-base2"]),
    ("layernorm", ["layernorm-bit", "layernorm-float", "layernorm-exact"]),
])
def test_compare(tmp_path, corpus, family, labels):
    out = tmp_path / family
    assert main(["compare", "--corpus", str(corpus), "--family", family, "--out-dir", str(out)]) == 0
    table = json.loads((out / "compare.json").read_text())
    assert [e["label"] for e in table] == labels
    assert [e["engine"] for e in table] == labels
    assert len((out / "compare.csv").read_text().splitlines()) == len(labels) + 1


def test_replay_reproduces(tmp_path, corpus):
    out = tmp_path / "r1"
    assert main(["--jobs", "1", "softmax", "--corpus", str(corpus), "--out-dir", str(out)]) == 0
    out2 = tmp_path / "r2"
    assert main(["replay", str(out / "manifest.json"), "--jobs", "8", "--out-dir", str(out2)]) == 0
    assert _files(out) == _files(out2)


def test_replay_detects_changed_corpus(tmp_path, corpus):
    out = tmp_path / "r1"
    main(["softmax", "--corpus", str(corpus), "--out-dir", str(out)])
    corpus.write_bytes(bytes(len(corpus.read_bytes())))
    assert main(["replay", str(out / "manifest.json"), "--out-dir", str(tmp_path / "r2")]) == EXIT_DATA


def test_replay_rejects_foreign_json(tmp_path):
    p = tmp_path / "m.json"
    p.write_text('{"tool": "other"}')
    assert main(["replay", str(p), "--out-dir", str(tmp_path)]) == EXIT_DATA
    p.write_text("{not json")
    assert main(["replay", str(p), "--out-dir", str(tmp_path)]) == EXIT_DATA
