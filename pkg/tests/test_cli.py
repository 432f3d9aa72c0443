import json
import os

import pytest

from qrqa.cli import main
from qrqa.data_io import load_dialogues, read_jsonl, read_run

TINY = [
    "--set", "rewriter.steps=30", "--set", "rewriter.model.model_dim=16", "--set", "rewriter.model.ff_dim=32",
    "--set", "rewriter.model.num_heads=2", "--set", "rewriter.model.max_seq_len=64",
    "--set", "reranker.steps=10", "--set", "reranker.model.model_dim=16", "--set", "reranker.model.ff_dim=32",
    "--set", "reranker.model.num_heads=2",
    "--set", "reader.steps=10", "--set", "reader.model.model_dim=16", "--set", "reader.model.ff_dim=32",
    "--set", "reader.model.num_heads=2",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    cwd = os.getcwd()
    os.chdir(root)
    try:
        assert main(["synth", "--dir", "data", "--entities", "8", "--test-dialogues", "3",
                     "--train-dialogues", "20"]) == 0
        assert main(["index"]) == 0
        for cmd in ("train-qr", "train-reranker", "train-reader"):
            assert main([cmd] + TINY) == 0, cmd
    finally:
        os.chdir(cwd)
    return root


@pytest.fixture
def in_workspace(workspace, monkeypatch):
    monkeypatch.chdir(workspace)
    return workspace


def test_usage_errors(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main([]) == 1
    assert main(["rewrite"]) == 1  # --qr is required
    assert main(["rewrite", "--qr", "nonsense"]) == 1
    assert main(["index", "--set", "retrieval.nope=1"]) == 1
    assert main(["index", "--set", "novalue"]) == 1
    assert "usage error" in capsys.readouterr().err


def test_missing_input_is_data_error(tmp_path, monkeypatch, capsys):
    monkeypatch.chdir(tmp_path)
    assert main(["index"]) == 2
    assert "collection" in capsys.readouterr().err


def test_missing_artifact_names_producer(in_workspace, capsys):
    assert main(["retrieve", "--qr", "kdt", "--out", "fresh"]) == 2
    assert "rewrite --qr kdt" in capsys.readouterr().err


def test_rewrite_original_all_copied(in_workspace):
    assert main(["rewrite", "--qr", "original", "--out", "o1"]) == 0
    rows = read_jsonl(in_workspace / "o1" / "rewrites.original.jsonl")
    dialogues = load_dialogues(in_workspace / "data" / "test.json")
    assert len(rows) == sum(len(d.turns) for d in dialogues)
    assert all(r["was_copied"] for r in rows)


def test_baseline_variants(in_workspace):
    for qr in ("kdt", "kdt-star", "transformer"):
        assert main(["rewrite", "--qr", qr, "--out", "o2"]) == 0
    kdt = read_jsonl(in_workspace / "o2" / "rewrites.kdt.jsonl")
    assert any("[SEP]" in r["rewrite"] for r in kdt)
    star = read_jsonl(in_workspace / "o2" / "rewrites.kdt-star.jsonl")
    dialogues = load_dialogues(in_workspace / "data" / "test.json")
    originals = [t.original_question for d in dialogues for t in d.turns]
    assert all(r["rewrite"].startswith(q) for r, q in zip(star, originals))


def test_pipeline_human_emits_reports(in_workspace):
    assert main(["pipeline", "--qr", "human", "--out", "o3"]) == 0
    out = in_workspace / "o3"
    for name in ["rewrites.human.jsonl", "rewrites.original.jsonl", "run.bm25.human.txt", "run.rerank.human.txt",
                 "predictions.human.jsonl", "eval.qr.human.json", "eval.retrieval.bm25.human.json",
                 "eval.retrieval.rerank.human.json", "pr.bm25.human.csv", "eval.extractive.human.json",
                 "breakdown.retrieval.human.txt", "breakdown.retrieval.human.csv",
                 "breakdown.extractive.human.json", "pipeline.human.json"]:
        assert (out / name).exists(), name
    qr = json.loads((out / "eval.qr.human.json").read_text())
    assert qr["rouge1_recall"] == 1.0 and qr["exact_match"] == 1.0
    summary = json.loads((out / "pipeline.human.json").read_text())
    assert summary["variants"]["human"]["bm25"]["mrr"] == 1.0
    for rl in read_run(out / "run.rerank.human.txt"):
        assert len(rl.entries) <= 20


def test_config_file_and_flag_precedence(in_workspace, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("retrieval:\n  top_k: 2\npaths:\n  output: from_file\n")
    assert main(["rewrite", "--qr", "original", "--config", str(cfg), "--out", "from_flag"]) == 0
    assert (in_workspace / "from_flag" / "rewrites.original.jsonl").exists()
    assert main(["retrieve", "--qr", "original", "--config", str(cfg), "--out", "from_flag",
                 "--set", "retrieval.top_k=3"]) == 0
    runs = read_run(in_workspace / "from_flag" / "run.bm25.original.txt")
    assert max(len(rl.entries) for rl in runs) == 3
    assert main(["index", "--config", str(tmp_path / "absent.yaml")]) == 2
