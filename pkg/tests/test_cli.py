import csv
import re
import json

import numpy as np
import pytest

from refeed.cli import main
from refeed.index import load
from refeed.synth import write_benchmark


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory, small_bench):
    out = tmp_path_factory.mktemp("synth")
    write_benchmark(small_bench, out)
    return out


def run_cli(*argv):
    return main([str(a) for a in argv])


def feedback(synth_dir, out, *extra):
    return run_cli(
        "feedback", "--index", synth_dir / "embeddings.jsonl", "--queries", synth_dir / "queries.jsonl",
        "--scorer", f"oracle:{synth_dir / 'qrels.txt'},10", "--k", 20, "--out-dir", out, *extra,
    )


class TestBuildIndex:
    def test_three_lines(self, tmp_path):
        src = tmp_path / "e.jsonl"
        src.write_text("".join(json.dumps({"id": f"d{i}", "vector": [i, 1.5, -2]}) + "\n" for i in range(3)))
        assert run_cli("build-index", "--embeddings", src, "--out", tmp_path / "a.idx") == 0
        assert load(tmp_path / "a.idx").count == 3
        assert run_cli("build-index", "--embeddings", src, "--out", tmp_path / "b.idx") == 0
        assert (tmp_path / "a.idx").read_bytes() == (tmp_path / "b.idx").read_bytes()

    def test_missing_vector(self, tmp_path, capsys):
        src = tmp_path / "e.jsonl"
        src.write_text('{"id": "a", "vector": [1]}\n{"id": "b"}\n')
        assert run_cli("build-index", "--embeddings", src, "--out", tmp_path / "x") == 2
        assert "line 2" in capsys.readouterr().err


class TestFeedback:
    def test_outputs_and_manifest(self, synth_dir, tmp_path):
        out = tmp_path / "out"
        assert feedback(synth_dir, out, "--n", 50) == 0
        for name in ("baseline.run", "feedback.run", "merged.run", "timings.csv",
                     "updated_queries.jsonl", "manifest.json"):
            assert (out / name).exists(), name
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["config"]["n"] == 50 and manifest["config"]["k"] == 20
        from refeed.synth import sha256_file
        for kind in ("baseline", "feedback", "merged"):
            assert manifest["digests"][kind] == sha256_file(out / f"{kind}.run")
        with open(out / "timings.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["stage"] for r in rows] == ["first_retrieval", "rerank", "distill", "second_retrieval", "total"]

    def test_n_zero_byte_identical(self, synth_dir, tmp_path):
        out = tmp_path / "out"
        assert feedback(synth_dir, out, "--n", 0) == 0
        assert (out / "feedback.run").read_bytes() == (out / "baseline.run").read_bytes()

    def test_config_file_with_flag_override(self, synth_dir, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"n": 7, "alpha": 0.01, "rounds": 2}))
        out = tmp_path / "out"
        assert feedback(synth_dir, out, "--config", cfg, "--n", 3) == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert (manifest["config"]["n"], manifest["config"]["alpha"], manifest["config"]["rounds"]) == (3, 0.01, 2)

    def test_scorer_miss(self, synth_dir, tmp_path, capsys):
        scores = tmp_path / "s.tsv"
        scores.write_text("q00\td0000\t1.0\n")
        rc = run_cli(
            "feedback", "--index", synth_dir / "embeddings.jsonl", "--queries", synth_dir / "queries.jsonl",
            "--scorer", f"file:{scores}", "--k", 5, "--n", 1, "--out-dir", tmp_path / "o", "--fail-fast",
        )
        assert rc != 0
        assert "q00" in capsys.readouterr().err

    def test_bad_scorer_spec(self, synth_dir, tmp_path):
        rc = run_cli("feedback", "--index", synth_dir / "embeddings.jsonl", "--queries",
                     synth_dir / "queries.jsonl", "--scorer", "magic", "--out-dir", tmp_path)
        assert rc == 2


class TestEval:
    def test_perfect_run(self, tmp_path, capsys):
        (tmp_path / "q").write_text("q1 0 a 1\nq1 0 b 1\n")
        (tmp_path / "r").write_text("q1 Q0 a 1 2.0 t\nq1 Q0 b 2 1.0 t\n")
        assert run_cli("eval", "--run", tmp_path / "r", "--qrels", tmp_path / "q") == 0
        assert re.search(r"^recall@100\s+100\.00$", capsys.readouterr().out, re.M)

    def test_compare_identical(self, tmp_path, capsys):
        (tmp_path / "q").write_text("q1 0 a 1\nq2 0 b 1\n")
        (tmp_path / "r").write_text("q1 Q0 a 1 2.0 t\nq2 Q0 x 1 2.0 t\nq2 Q0 b 2 1.0 t\n")
        assert run_cli("eval", "--run", tmp_path / "r", "--qrels", tmp_path / "q",
                       "--compare", tmp_path / "r", "--json") == 0
        report = json.loads(capsys.readouterr().out)
        assert report["significance"]["t"] == 0.0 and report["significance"]["p"] == 1.0

    def test_csv_dump(self, tmp_path):
        (tmp_path / "q").write_text("q1 0 a 1\n")
        (tmp_path / "r").write_text("q1 Q0 x 1 2.0 t\nq1 Q0 a 2 1.0 t\n")
        assert run_cli("eval", "--run", tmp_path / "r", "--qrels", tmp_path / "q",
                       "--metrics", "mrr@100", "--csv", tmp_path / "o.csv") == 0
        assert (tmp_path / "o.csv").read_text() == "query_id,mrr@100\nq1,0.500000\n"

    def test_malformed(self, tmp_path, capsys):
        (tmp_path / "q").write_text("q1 0 a 1\n")
        (tmp_path / "r").write_text("q1 Q0 a\n")
        assert run_cli("eval", "--run", tmp_path / "r", "--qrels", tmp_path / "q") == 2
        assert "line 1" in capsys.readouterr().err

    def test_matches_recomputation(self, synth_dir, tmp_path, capsys):
        out = tmp_path / "out"
        assert feedback(synth_dir, out, "--n", 100) == 0
        capsys.readouterr()
        assert run_cli("eval", "--run", out / "feedback.run", "--qrels", synth_dir / "qrels.txt",
                       "--metrics", "recall@20", "--json") == 0
        report = json.loads(capsys.readouterr().out)
        qrels = {}
        for line in (synth_dir / "qrels.txt").read_text().splitlines():
            q, _, d, g = line.split()
            qrels.setdefault(q, set()).add(d)
        ranked = {}
        for line in (out / "feedback.run").read_text().splitlines():
            q, _, d, r, _, _ = line.split()
            ranked.setdefault(q, []).append((int(r), d))
        vals = [len(qrels[q] & {d for r, d in docs if r <= 20}) / len(qrels[q]) for q, docs in ranked.items()]
        assert report["aggregate"]["recall@20"] == pytest.approx(sum(vals) / len(vals), abs=1e-12)


class TestSynth:
    ARGS = ("--seed", 5, "--dim", 8, "--n-passages", 300, "--n-queries", 6, "--clusters", 4,
            "--positives-per-query", 2)

    def test_same_seed_same_digests(self, tmp_path):
        for name in ("a", "b"):
            assert run_cli("synth", *self.ARGS, "--no-band-check", "--out-dir", tmp_path / name) == 0
        da = json.loads((tmp_path / "a" / "spec.json").read_text())["digests"]
        db = json.loads((tmp_path / "b" / "spec.json").read_text())["digests"]
        assert da == db

    def test_infeasible_band(self, tmp_path, capsys):
        rc = run_cli("synth", *self.ARGS, "--query-offset", 0, "--positive-spread", 0,
                     "--out-dir", tmp_path / "x")
        assert rc != 0
        assert "measured baseline recall 1.0000" in capsys.readouterr().err

    def test_spec_file_and_smoke(self, tmp_path):
        spec = tmp_path / "spec.json"
        spec.write_text(json.dumps({"seed": 5, "dim": 8, "n_passages": 300, "n_queries": 6,
                                    "clusters": 4, "positives_per_query": 2, "recall_band": None}))
        assert run_cli("synth", "--spec", spec, "--out-dir", tmp_path / "s") == 0
        assert run_cli("build-index", "--embeddings", tmp_path / "s" / "embeddings.jsonl",
                       "--out", tmp_path / "i") == 0
        q = tmp_path / "q"
        (q.parent / "r").write_text("q0 Q0 d000 1 1.0 t\n")
        assert run_cli("eval", "--run", tmp_path / "r", "--qrels", tmp_path / "s" / "qrels.txt") == 0


class TestExportVectors:
    def test_rows_and_roles(self, synth_dir, tmp_path):
        out = tmp_path / "fb"
        assert feedback(synth_dir, out, "--n", 100) == 0
        qfile = tmp_path / "two.jsonl"
        qfile.write_text("".join((synth_dir / "queries.jsonl").read_text().splitlines(True)[:2]))
        assert run_cli("export-vectors", "--index", synth_dir / "embeddings.jsonl", "--queries", qfile,
                       "--updated-queries", out / "updated_queries.jsonl", "--k", 3,
                       "--out", tmp_path / "v.csv") == 0
        with open(tmp_path / "v.csv") as fh:
            rows = list(csv.reader(fh))
        assert rows[0][:3] == ["role", "query_id", "id"]
        roles = [r[0] for r in rows[1:]]
        assert roles.count("query_initial") == 2 and roles.count("query_updated") == 2
        assert set(roles) == {"passage", "query_initial", "query_updated"}
        from refeed.index import load_jsonl
        idx = load_jsonl(synth_dir / "embeddings.jsonl")
        for r in rows[1:]:
            if r[0] == "passage":
                vec = np.array([float(x) for x in r[3:]], dtype=np.float32)
                assert vec.tobytes() == idx.vectors[idx.row_of(r[2])].tobytes()

    def test_empty_queries(self, synth_dir, tmp_path):
        (tmp_path / "none.jsonl").write_text("")
        assert run_cli("export-vectors", "--index", synth_dir / "embeddings.jsonl",
                       "--queries", tmp_path / "none.jsonl", "--out", tmp_path / "v.csv") == 0
        assert len((tmp_path / "v.csv").read_text().splitlines()) == 1
