import json
import subprocess
import sys

import pytest

from alquery.cli import main
from alquery.core_model import ImageRecord, load_manifest, write_manifest


@pytest.fixture(scope="module")
def pool_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("pool")
    assert main(["synth", "--out", str(out), "--pool-size", "120", "--redundancy", "3",
                 "--height", "2", "--width", "2", "--seed", "7", "--initial", "20"]) == 0
    return out


def _lines(path):
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh]


def _score(pool_dir, out, *extra):
    return main(["score", "--manifest", str(pool_dir / "manifest.jsonl"), "--out", str(out), *extra])


class TestScore:
    def test_one_line_per_image(self, pool_dir, tmp_path):
        assert _score(pool_dir, tmp_path / "s.jsonl", "--function", "mi", "--agg", "max") == 0
        header, *rows = _lines(tmp_path / "s.jsonl")
        assert len(rows) == 120
        assert [r["id"] for r in rows] == sorted(r["id"] for r in rows)
        assert header["meta"]["config"]["function"] == "mi"
        assert len(header["meta"]["inputs"]["manifest"]) == 64

    def test_unknown_function_is_usage_error(self, pool_dir, tmp_path):
        with pytest.raises(SystemExit) as info:
            _score(pool_dir, tmp_path / "s.jsonl", "--function", "bald")
        assert info.value.code == 2

    def test_bad_combination_is_usage_error(self, pool_dir, tmp_path, capsys):
        assert _score(pool_dir, tmp_path / "s.jsonl", "--function", "detent", "--agg", "avg") == 2
        assert "error" in capsys.readouterr().err

    def test_missing_manifest_is_io_error(self, tmp_path, capsys):
        assert main(["score", "--manifest", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "s")]) == 1
        assert "nope.jsonl" in capsys.readouterr().err

    def test_keep_going_reports_failures(self, pool_dir, tmp_path, capsys):
        records = load_manifest(pool_dir / "manifest.jsonl")[:5]
        broken = [ImageRecord(r.id, predictions_ref=str(pool_dir / r.predictions_ref)) for r in records]
        broken[2] = ImageRecord(records[2].id)
        write_manifest(tmp_path / "m.jsonl", broken)
        args = ["score", "--manifest", str(tmp_path / "m.jsonl"), "--out", str(tmp_path / "s.jsonl")]
        assert main(args + ["--keep-going"]) == 1
        assert records[2].id in capsys.readouterr().err
        assert len(_lines(tmp_path / "s.jsonl")) == 1 + 4
        assert main(args) == 1

    def test_env_workers(self, pool_dir, tmp_path, monkeypatch):
        assert _score(pool_dir, tmp_path / "a.jsonl") == 0
        monkeypatch.setenv("ALQUERY_WORKERS", "2")
        assert _score(pool_dir, tmp_path / "b.jsonl") == 0
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_bad_env_workers(self, pool_dir, tmp_path, monkeypatch):
        monkeypatch.setenv("ALQUERY_WORKERS", "many")
        assert _score(pool_dir, tmp_path / "s.jsonl") == 2


class TestSelect:
    @pytest.fixture
    def scores(self, pool_dir, tmp_path):
        path = tmp_path / "s.jsonl"
        assert _score(pool_dir, path) == 0
        return path

    def test_pool_smaller_than_n(self, tmp_path):
        path = tmp_path / "s.jsonl"
        path.write_text('{"meta": {}}\n' + "".join(json.dumps({"id": i, "score": v}) + "\n"
                                                    for i, v in [("a", 0.3), ("b", 0.9), ("c", 0.1)]))
        assert main(["select", "--scores", str(path), "--out", str(tmp_path / "o"), "--strategy", "topn",
                     "--n", "5"]) == 0
        header, *rows = _lines(tmp_path / "o")
        assert [r["id"] for r in rows] == ["b", "a", "c"]
        assert [r["rank"] for r in rows] == [1, 2, 3]
        assert header["meta"]["n"] == 5 and header["meta"]["selected"] == 3

    def test_coreset_needs_embeddings(self, scores, tmp_path):
        assert main(["select", "--scores", str(scores), "--out", str(tmp_path / "o"), "--strategy", "coreset",
                     "--n", "3"]) == 2

    @pytest.mark.parametrize("strategy", ["topn", "topthird", "kmpp", "coreset", "omp", "random"])
    def test_repeat_is_byte_identical(self, pool_dir, scores, tmp_path, strategy):
        args = ["select", "--scores", str(scores), "--strategy", strategy, "--n", "10", "--seed", "4",
                "--embeddings", str(pool_dir / "embeddings.alem")]
        assert main(args + ["--out", str(tmp_path / "a")]) == 0
        assert main(args + ["--out", str(tmp_path / "b")]) == 0
        assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()
        header, *rows = _lines(tmp_path / "a")
        assert len(rows) == 10 and header["meta"]["seed"] == 4
        assert header["meta"]["strategy"] == strategy

    def test_round_robin(self, scores, tmp_path):
        out = tmp_path / "o"
        assert main(["select", "--scores", str(scores), "--out", str(out), "--strategy", "round-robin",
                     "--n", "4", "--classes", "2,0"]) == 0
        assert len(_lines(out)) == 5


class TestLoop:
    def test_single_iteration(self, pool_dir, tmp_path):
        out = tmp_path / "l.jsonl"
        assert main(["loop", "--pool", str(pool_dir), "--out", str(out), "--iterations", "1",
                     "--batch-size", "5"]) == 0
        header, *rows = _lines(out)
        assert len(rows) == 1
        assert rows[0]["selected_count"] == 5 and rows[0]["cumulative_unique"] == 5
        assert header["meta"]["initial_labeled_count"] == 20

    def test_config_file_and_override(self, pool_dir, tmp_path):
        cfg = tmp_path / "loop.ini"
        cfg.write_text("[loop]\nbatch_size = 4\niterations = 3\nstrategy = coreset\nselection_pool = union\n")
        out = tmp_path / "l.jsonl"
        assert main(["loop", "--pool", str(pool_dir), "--out", str(out), "--config", str(cfg),
                     "--iterations", "2"]) == 0
        header, *rows = _lines(out)
        assert len(rows) == 2
        assert header["meta"]["config"]["strategy"] == "coreset"
        assert "config" in header["meta"]["inputs"]

    def test_paired_runs_and_determinism(self, pool_dir, tmp_path):
        base = ["loop", "--pool", str(pool_dir), "--iterations", "2", "--batch-size", "6", "--seed", "3"]
        assert main(base + ["--out", str(tmp_path / "al1")]) == 0
        assert main(base + ["--out", str(tmp_path / "al2")]) == 0
        assert main(base + ["--strategy", "random", "--out", str(tmp_path / "rnd")]) == 0
        assert (tmp_path / "al1").read_bytes() == (tmp_path / "al2").read_bytes()
        al, rnd = _lines(tmp_path / "al1"), _lines(tmp_path / "rnd")
        assert al[0]["meta"]["initial_metrics"] == rnd[0]["meta"]["initial_metrics"]

    def test_bad_config_key(self, pool_dir, tmp_path):
        cfg = tmp_path / "loop.ini"
        cfg.write_text("[loop]\nspeed = 11\n")
        assert main(["loop", "--pool", str(pool_dir), "--out", str(tmp_path / "l"), "--config", str(cfg)]) == 2

    def test_missing_pool(self, tmp_path):
        assert main(["loop", "--pool", str(tmp_path / "nope"), "--out", str(tmp_path / "l")]) == 1


class TestSynth:
    def test_repeat_identical(self, tmp_path):
        for name in ("a", "b"):
            assert main(["synth", "--out", str(tmp_path / name), "--pool-size", "50", "--seed", "7"]) == 0
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        assert len(files) == 50 + 5
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()

    def test_invalid_spec_is_usage_error(self, tmp_path):
        assert main(["synth", "--out", str(tmp_path / "a"), "--pool-size", "10", "--prevalence", "0.5,2"]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "alquery", "score", "--manifest", str(tmp_path / "x"),
                           "--out", str(tmp_path / "y")], capture_output=True, text=True)
    assert proc.returncode == 1
    proc = subprocess.run([sys.executable, "-m", "alquery", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "alquery" in proc.stdout
