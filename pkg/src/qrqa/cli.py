"""Command-line pipeline: index, train, rewrite, retrieve, rerank, read, evaluate, break down.

Every subcommand reads the same YAML config (``--config``); ``--set
section.key=value`` and the dedicated flags override file values.
Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import copy
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Any

import yaml

from . import breakdown as bd
from .data_io import (
    DataError,
    Dialogue,
    RankedList,
    atomic_write_text,
    load_collection,
    load_dialogues,
    load_qrels,
    query_id,
    read_jsonl,
    read_run,
    write_json,
    write_jsonl,
    write_run,
)
from .evaluation import (
    EvalConfig,
    evaluate_extractive,
    evaluate_rewrite,
    evaluate_run,
    ndcg_at_k,
    pr_curve,
    precision_at_1,
    answer_f1,
)
from .neural import TransformerConfig, set_threads
from .reader import Reader, ReaderExample, qa_question
from .retrieval import CrossEncoder, RetrievalConfig, build_index, load_index, rerank, reranker_examples, retrieve, save_index
from .rewriter import QuestionRewriter, baseline_kdt, baseline_kdt_star, same_question
from .synthetic import generate_corpus
from .text import Analyzer, build_vocabulary, load_stopwords

log = logging.getLogger("qrqa")

QR_VARIANTS = ("original", "kdt", "kdt-star", "transformer", "human")

DEFAULT_CONFIG: dict[str, Any] = {
    "seed": 13,
    "threads": 1,
    "paths": {
        "collection": "data/collection.tsv",
        "dialogues": "data/test.json",
        "dialogue_format": "canard-json",
        "qrels": "data/qrels.test.txt",
        "train_dialogues": "data/train.json",
        "train_qrels": "data/qrels.train.txt",
        "stopwords": None,
        "index": "work/index",
        "rewriter": "work/rewriter.ckpt",
        "reranker": "work/reranker.ckpt",
        "reader": "work/reader.ckpt",
        "output": "work/out",
    },
    "retrieval": {"k1": 0.82, "b": 0.68, "top_k": 1000, "stem": False},
    "baselines": {"k": 2, "idf_threshold": 0.0001},
    "rewriter": {
        "window": 5, "include_answers": None, "mixtures": 2, "max_len": 24, "vocab_size": 5000,
        "steps": 1000, "batch_size": 16, "lr": 0.001, "mode": "recursive",
        "model": {"num_layers": 2, "num_heads": 4, "model_dim": 64, "max_seq_len": 128, "ff_dim": 256,
                  "gate_attention_layer": -1},
    },
    "reranker": {
        "steps": 3000, "batch_size": 16, "lr": 0.001, "negatives": 3, "vocab_size": 5000, "rerank_depth": 20,
        "model": {"num_layers": 2, "num_heads": 4, "model_dim": 64, "max_seq_len": 64, "ff_dim": 256},
    },
    "reader": {
        "max_span_len": 30, "qa_input_mode": "human", "k": 2, "steps": 400, "batch_size": 16, "lr": 0.001,
        "vocab_size": 5000,
        "model": {"num_layers": 2, "num_heads": 4, "model_dim": 64, "max_seq_len": 96, "ff_dim": 256},
    },
    "evaluation": {"cutoff_grade": 2, "depth": 1000, "ndcg_binarize": False,
                   "thresholds_retrieval": ["P@1=1", "NDCG@3>0", "NDCG@3>=0.5", "NDCG@3=1"],
                   "thresholds_extractive": ["F1>0", "F1>=0.5", "F1=1"]},
}


class MissingArtifact(DataError):
    def __init__(self, path: Path, producer: str):
        super().__init__(f"missing {path}; produce it with the '{producer}' subcommand")


class UsageError(Exception):
    pass


# --- configuration ----------------------------------------------------------------------


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set_path(cfg: dict, dotted: str, raw: str) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise UsageError(f"unknown config section in {dotted!r}")
        node = node[k]
    if keys[-1] not in node:
        raise UsageError(f"unknown config key {dotted!r}")
    node[keys[-1]] = yaml.safe_load(raw)


def load_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise DataError(f"config file {path} not found")
        cfg = _merge(cfg, yaml.safe_load(path.read_text(encoding="utf-8")) or {})
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        _set_path(cfg, key.strip(), raw)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.threads is not None:
        cfg["threads"] = args.threads
    if args.out is not None:
        cfg["paths"]["output"] = args.out
    return cfg


class Context:
    """Resolved config plus lazily loaded inputs shared by subcommands."""

    def __init__(self, cfg: dict):
        self.cfg = cfg
        self.paths = {k: (Path(v) if isinstance(v, str) and k != "dialogue_format" else v)
                      for k, v in cfg["paths"].items()}
        self.out = Path(cfg["paths"]["output"])
        self.seed = int(cfg["seed"])
        r = cfg["retrieval"]
        self.retrieval = RetrievalConfig(k1=r["k1"], b=r["b"], top_k=r["top_k"])
        e = cfg["evaluation"]
        self.eval = EvalConfig(cutoff_grade=e["cutoff_grade"], depth=e["depth"], ndcg_binarize=e["ndcg_binarize"])
        self._cache: dict[str, Any] = {}

    def need(self, key: str, producer: str | None = None) -> Path:
        path = self.paths.get(key)
        if path is None:
            raise DataError(f"config paths.{key} is not set")
        if not Path(path).exists():
            if producer:
                raise MissingArtifact(path, producer)
            raise DataError(f"input file {path} (paths.{key}) not found")
        return Path(path)

    def analyzer(self) -> Analyzer:
        stop = self.paths.get("stopwords")
        kwargs = {"stem": bool(self.cfg["retrieval"]["stem"])}
        if stop:
            kwargs["stopwords"] = load_stopwords(stop)
        return Analyzer(**kwargs)

    def dialogues(self, train: bool = False) -> list[Dialogue]:
        key = "train_dialogues" if train else "dialogues"
        if key not in self._cache:
            self._cache[key] = load_dialogues(self.need(key), self.cfg["paths"]["dialogue_format"])
        return self._cache[key]

    def index(self):
        if "index" not in self._cache:
            path = self.paths["index"]
            if not (Path(path) / "meta.json").exists():
                raise MissingArtifact(path, "index")
            self._cache["index"] = load_index(path)
        return self._cache["index"]

    def qrels(self, train: bool = False):
        key = "train_qrels" if train else "qrels"
        if key not in self._cache:
            self._cache[key] = load_qrels(self.need(key))
        return self._cache[key]

    def include_answers(self) -> bool:
        v = self.cfg["rewriter"]["include_answers"]
        if v is None:
            return self.cfg["paths"]["dialogue_format"] == "canard-json"
        return bool(v)

    def artifact(self, name: str) -> Path:
        return self.out / name


def _model_cfg(section: dict, causal: bool) -> TransformerConfig:
    return TransformerConfig(causal=causal, **section["model"])


# --- file naming ---------------------------------------------------------------------------


def rewrites_file(ctx: Context, qr: str) -> Path:
    return ctx.artifact(f"rewrites.{qr}.jsonl")


def run_file(ctx: Context, qr: str, stage: str) -> Path:
    return ctx.artifact(f"run.{stage}.{qr}.txt")


def predictions_file(ctx: Context, qr: str) -> Path:
    return ctx.artifact(f"predictions.{qr}.jsonl")


def _require_file(path: Path, producer: str) -> Path:
    if not path.exists():
        raise MissingArtifact(path, producer)
    return path


def load_rewrites(ctx: Context, qr: str) -> dict[str, dict]:
    rows = read_jsonl(_require_file(rewrites_file(ctx, qr), f"rewrite --qr {qr}"))
    return {query_id(r["topic_id"], r["turn_id"]): r for r in rows}


def _best_run(ctx: Context, qr: str) -> tuple[str, Path]:
    for stage in ("rerank", "bm25"):
        p = run_file(ctx, qr, stage)
        if p.exists():
            return stage, p
    raise MissingArtifact(run_file(ctx, qr, "bm25"), f"retrieve --qr {qr}")


# --- subcommands -------------------------------------------------------------------------------


def cmd_synth(ctx: Context, args) -> None:
    corpus = generate_corpus(seed=ctx.seed, n_entities=args.entities, n_test=args.test_dialogues,
                             n_train=args.train_dialogues)
    paths = corpus.write(args.dir)
    for name, p in paths.items():
        print(f"{name}: {p}")


def cmd_index(ctx: Context, args) -> None:
    index = build_index(load_collection(ctx.need("collection")), ctx.analyzer())
    save_index(index, ctx.paths["index"])
    log.info("indexed %d passages, %d terms", index.N, len(index.postings))


def _rewriter_vocab_texts(dialogues):
    for d in dialogues:
        for t in d.turns:
            yield t.original_question
            if t.human_rewrite:
                yield t.human_rewrite
            if t.history_answer:
                yield t.history_answer


def cmd_train_qr(ctx: Context, args) -> None:
    rc = ctx.cfg["rewriter"]
    train = ctx.dialogues(train=True)
    vocab = build_vocabulary(_rewriter_vocab_texts(train), rc["vocab_size"])
    qr = QuestionRewriter(vocab, _model_cfg(rc, causal=True), rc["mixtures"], rc["window"],
                          ctx.include_answers(), rc["max_len"], ctx.seed)
    examples = qr.training_examples(train)
    losses = qr.fit(examples, rc["steps"], rc["batch_size"], rc["lr"], log_every=100)
    qr.save(ctx.paths["rewriter"])
    log.info("rewriter trained on %d examples, final loss %.4f", len(examples), losses[-1])


def make_rewrites(ctx: Context, qr_variant: str) -> list[dict]:
    dialogues = ctx.dialogues()
    b = ctx.cfg["baselines"]
    rows = []
    if qr_variant == "transformer":
        qr = QuestionRewriter.load(ctx.need("rewriter", "train-qr"))
        for d in dialogues:
            for t, res in zip(d.turns, qr.rewrite_dialogue(d, ctx.cfg["rewriter"]["mode"])):
                rows.append({"topic_id": d.topic_id, "turn_id": t.turn_id, "rewrite": res.rewritten_question,
                             "was_copied": res.was_copied})
        return rows
    index = ctx.index() if qr_variant == "kdt-star" else None
    for d in dialogues:
        for i, t in enumerate(d.turns):
            if qr_variant == "original":
                text = t.original_question
            elif qr_variant == "kdt":
                text = baseline_kdt(d, i, b["k"])
            elif qr_variant == "kdt-star":
                text = baseline_kdt_star(d, i, b["k"], index.idf, b["idf_threshold"], index.analyzer)
            elif qr_variant == "human":
                if t.human_rewrite is None:
                    raise DataError(f"topic {d.topic_id} turn {t.turn_id}: no human rewrite")
                text = t.human_rewrite
            else:
                raise UsageError(f"unknown QR variant {qr_variant!r}")
            rows.append({"topic_id": d.topic_id, "turn_id": t.turn_id, "rewrite": text,
                         "was_copied": same_question(text, t.original_question)})
    return rows


def cmd_rewrite(ctx: Context, args) -> None:
    write_jsonl(make_rewrites(ctx, args.qr), rewrites_file(ctx, args.qr))


def cmd_retrieve(ctx: Context, args) -> None:
    rewrites = load_rewrites(ctx, args.qr)
    index = ctx.index()
    runs = [retrieve(r["rewrite"], index, ctx.retrieval, qid, tag=f"bm25-{args.qr}") for qid, r in rewrites.items()]
    write_run(runs, run_file(ctx, args.qr, "bm25"))


def cmd_rerank(ctx: Context, args) -> None:
    rewrites = load_rewrites(ctx, args.qr)
    runs = read_run(_require_file(run_file(ctx, args.qr, "bm25"), f"retrieve --qr {args.qr}"))
    scorer = CrossEncoder.load(ctx.need("reranker", "train-reranker"))
    depth = ctx.cfg["reranker"]["rerank_depth"]
    index = ctx.index()
    out = []
    for rl in runs:
        head = RankedList(rl.query_id, rl.entries[:depth], rl.tag)
        out.append(rerank(rewrites[rl.query_id]["rewrite"], head, scorer, index.texts, tag=f"rerank-{args.qr}"))
    write_run(out, run_file(ctx, args.qr, "rerank"))


def _corpus_texts(ctx: Context, dialogues):
    for p in load_collection(ctx.need("collection")):
        yield p.text
    yield from _rewriter_vocab_texts(dialogues)


def cmd_train_reranker(ctx: Context, args) -> None:
    rc = ctx.cfg["reranker"]
    train = ctx.dialogues(train=True)
    questions = {d.key(t): t.human_rewrite or t.original_question for d in train for t in d.turns}
    examples = reranker_examples(questions, ctx.qrels(train=True), ctx.index(), ctx.retrieval,
                                 rc["negatives"], ctx.eval.cutoff_grade, ctx.seed)
    vocab = build_vocabulary(_corpus_texts(ctx, train), rc["vocab_size"])
    ce = CrossEncoder(vocab, _model_cfg(rc, causal=False), ctx.seed)
    losses = ce.fit(examples, rc["steps"], rc["batch_size"], rc["lr"])
    ce.save(ctx.paths["reranker"])
    log.info("re-ranker trained on %d pairs, final loss %.4f", len(examples), losses[-1])


def _passages(ctx: Context) -> dict[str, str]:
    if "passages" not in ctx._cache:
        ctx._cache["passages"] = {p.passage_id: p.text for p in load_collection(ctx.need("collection"))}
    return ctx._cache["passages"]


def _reader_example(d: Dialogue, i: int, passages: dict[str, str], question: str) -> ReaderExample | None:
    t = d.turns[i]
    pid = t.context_passage_id
    if pid is None or pid not in passages:
        return None
    span = (t.gold_answer_span.start, t.gold_answer_span.end) if t.gold_answer_span else None
    if t.is_answerable and span is None:
        return None
    return ReaderExample(question, passages[pid], span, d.key(t))


def cmd_train_reader(ctx: Context, args) -> None:
    rc = ctx.cfg["reader"]
    train = ctx.dialogues(train=True)
    passages = _passages(ctx)
    examples = []
    for d in train:
        for i in range(len(d.turns)):
            q = qa_question(d, i, rc["qa_input_mode"], rc["k"])
            ex = _reader_example(d, i, passages, q)
            if ex is not None:
                examples.append(ex)
    vocab = build_vocabulary(_corpus_texts(ctx, train), rc["vocab_size"])
    reader = Reader(vocab, _model_cfg(rc, causal=False), rc["max_span_len"], ctx.seed)
    report = reader.fit(examples, rc["steps"], rc["batch_size"], rc["lr"])
    reader.save(ctx.paths["reader"])
    log.info("reader trained on %d examples (%d skipped), final loss %.4f", len(examples), report.skipped,
             report.losses[-1] if report.losses else float("nan"))


_QA_MODE = {"original": "original", "kdt": "kdt", "human": "human", "transformer": "rewrite", "kdt-star": "rewrite"}


def cmd_read(ctx: Context, args) -> None:
    rewrites = load_rewrites(ctx, args.qr)
    reader = Reader.load(ctx.need("reader", "train-reader"))
    passages = _passages(ctx)
    top1: dict[str, str] = {}
    rows = []
    for d in ctx.dialogues():
        for t in d.turns:
            key = d.key(t)
            pid = t.context_passage_id
            if pid is None:
                if not top1:
                    _, path = _best_run(ctx, args.qr)
                    top1 = {rl.query_id: rl.entries[0].passage_id for rl in read_run(path) if rl.entries}
                pid = top1.get(key)
            if pid is None:
                answer, score = None, 0.0
            else:
                pred = reader.predict(rewrites[key]["rewrite"], passages[pid])
                answer = None if pred.is_no_answer else pred.answer_text
                score = pred.score
            rows.append({"topic_id": d.topic_id, "turn_id": t.turn_id, "qa_input_mode": _QA_MODE[args.qr],
                         "answer": answer, "score": score})
    write_jsonl(rows, predictions_file(ctx, args.qr))


def cmd_eval_qr(ctx: Context, args) -> None:
    rewrites = load_rewrites(ctx, args.qr)
    per = {}
    for d in ctx.dialogues():
        for t in d.turns:
            if t.human_rewrite is None:
                continue
            key = d.key(t)
            per[key] = asdict(evaluate_rewrite(rewrites[key]["rewrite"], t.human_rewrite))
    if not per:
        raise DataError("no human rewrites to evaluate against")
    n = len(per)
    report = {
        "qr": args.qr,
        "count": n,
        "rouge1_recall": sum(v["rouge1_recall"] for v in per.values()) / n,
        "exact_match": sum(v["exact_match"] for v in per.values()) / n,
        "similarity": sum(v["similarity"] for v in per.values()) / n,
        "copied": sum(bool(r["was_copied"]) for r in rewrites.values()),
        "per_question": per,
    }
    write_json(report, ctx.artifact(f"eval.qr.{args.qr}.json"))


def retrieval_report(ctx: Context, qr: str, stage: str) -> dict:
    path = _require_file(run_file(ctx, qr, stage), f"retrieve --qr {qr}" if stage == "bm25" else f"rerank --qr {qr}")
    run = read_run(path)
    qrels = ctx.qrels()
    # queries the run never answered still count (as zero) when they have qrels
    known = {rl.query_id for rl in run}
    run += [RankedList(q, [], "empty") for q in _dialogue_keys(ctx) if q in qrels and q not in known]
    ev = evaluate_run(run, qrels, ctx.eval)
    curve = pr_curve(run, qrels, ctx.eval)
    atomic_write_text(ctx.artifact(f"pr.{stage}.{qr}.csv"),
                      "recall,precision\n" + "".join(f"{r:.1f},{p:.6f}\n" for r, p in curve))
    report = {"qr": qr, "stage": stage, **ev.aggregates(), "per_query": ev.per_query,
              "missing_in_qrels": ev.missing_in_qrels, "ndcg_excluded": ev.ndcg_excluded,
              "pr_curve": [list(pt) for pt in curve]}
    write_json(report, ctx.artifact(f"eval.retrieval.{stage}.{qr}.json"))
    return report


def _dialogue_keys(ctx: Context) -> list[str]:
    return [d.key(t) for d in ctx.dialogues() for t in d.turns]


def cmd_eval_retrieval(ctx: Context, args) -> None:
    stages = [args.stage] if args.stage else [s for s in ("bm25", "rerank") if run_file(ctx, args.qr, s).exists()]
    if not stages:
        raise MissingArtifact(run_file(ctx, args.qr, "bm25"), f"retrieve --qr {args.qr}")
    for stage in stages:
        retrieval_report(ctx, args.qr, stage)


def _golds(ctx: Context) -> dict[str, str | None]:
    golds = {}
    for d in ctx.dialogues():
        for t in d.turns:
            if t.is_answerable and t.gold_answer_text is None:
                continue
            golds[d.key(t)] = t.gold_answer_text if t.is_answerable else None
    return golds


def _load_predictions(ctx: Context, qr: str) -> dict[str, str | None]:
    rows = read_jsonl(_require_file(predictions_file(ctx, qr), f"read --qr {qr}"))
    return {query_id(r["topic_id"], r["turn_id"]): r["answer"] for r in rows}


def cmd_eval_extractive(ctx: Context, args) -> None:
    golds = _golds(ctx)
    if not golds:
        raise DataError("dialogues carry no gold answers")
    ev = evaluate_extractive(_load_predictions(ctx, args.qr), golds)
    write_json({"qr": args.qr, "em": ev.em, "f1": ev.f1, "na_acc": ev.na_acc, "count": ev.count,
                "na_count": ev.na_count, "per_question": ev.per_question},
               ctx.artifact(f"eval.extractive.{args.qr}.json"))


def _variants(qr: str) -> dict[str, str]:
    return {"original": "original", "qr": qr, "human": "human"}


def cmd_breakdown(ctx: Context, args) -> None:
    variants = _variants(args.qr)
    copied = {k: bool(r["was_copied"]) for k, r in load_rewrites(ctx, args.qr).items()}
    e = ctx.cfg["evaluation"]
    done = False
    if ctx.paths.get("qrels") and Path(ctx.paths["qrels"]).exists():
        qrels = ctx.qrels()
        runs = {}
        for slot, v in variants.items():
            _, path = _best_run(ctx, v)
            runs[slot] = {rl.query_id: rl for rl in read_run(path)}
        keys = [k for k in _dialogue_keys(ctx) if k in qrels]
        preds = {slot: {k: runs[slot].get(k, RankedList(k, [], "empty")) for k in keys} for slot in runs}

        def retrieval_metrics(key, ranked):
            judged = qrels[key]
            ndcg = ndcg_at_k(ranked, judged, 3, ctx.eval.ndcg_binarize, ctx.eval.cutoff_grade)
            return {"p@1": precision_at_1(ranked, judged, ctx.eval.cutoff_grade),
                    "ndcg@3": 0.0 if ndcg is None else ndcg}

        table = bd.run_breakdown(preds, retrieval_metrics, e["thresholds_retrieval"], copied)
        _write_table(ctx, table, f"breakdown.retrieval.{args.qr}")
        done = True
    golds = _golds(ctx)
    if golds and all(predictions_file(ctx, v).exists() for v in variants.values()):
        preds = {}
        for slot, v in variants.items():
            p = _load_predictions(ctx, v)
            preds[slot] = {k: p[k] for k in golds}
        table = bd.run_breakdown(preds, lambda key, ans: {"f1": answer_f1(ans, golds[key])},
                                 e["thresholds_extractive"], copied)
        _write_table(ctx, table, f"breakdown.extractive.{args.qr}")
        done = True
    if not done:
        raise MissingArtifact(predictions_file(ctx, args.qr), f"read --qr {args.qr}")


def _write_table(ctx: Context, table: bd.BreakdownTable, stem: str) -> None:
    atomic_write_text(ctx.artifact(stem + ".txt"), table.render())
    atomic_write_text(ctx.artifact(stem + ".csv"), table.to_csv())
    write_json(table.to_dict(), ctx.artifact(stem + ".json"))


def cmd_pipeline(ctx: Context, args) -> None:
    if not (Path(ctx.paths["index"]) / "meta.json").exists():
        cmd_index(ctx, args)
    variants = list(dict.fromkeys(["original", args.qr, "human"]))
    has_qrels = ctx.paths.get("qrels") and Path(ctx.paths["qrels"]).exists()
    summary: dict[str, Any] = {"qr": args.qr, "seed": ctx.seed, "variants": {}}
    for v in variants:
        ns = argparse.Namespace(qr=v, stage=None)
        cmd_rewrite(ctx, ns)
        cmd_retrieve(ctx, ns)
        if not args.skip_rerank:
            cmd_rerank(ctx, ns)
        if not args.skip_read:
            cmd_read(ctx, ns)
        entry: dict[str, Any] = {}
        if any(t.human_rewrite for d in ctx.dialogues() for t in d.turns):
            cmd_eval_qr(ctx, ns)
        if has_qrels:
            for stage in ("bm25",) if args.skip_rerank else ("bm25", "rerank"):
                rep = retrieval_report(ctx, v, stage)
                entry[stage] = {k: rep[k] for k in ("map", "mrr", "ndcg@3", "p@1")}
        if not args.skip_read and _golds(ctx):
            cmd_eval_extractive(ctx, ns)
        summary["variants"][v] = entry
    cmd_breakdown(ctx, argparse.Namespace(qr=args.qr))
    write_json(summary, ctx.artifact(f"pipeline.{args.qr}.json"))


# --- argument parsing ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config value, e.g. --set retrieval.k1=0.9 (repeatable)")
    common.add_argument("--seed", type=int, help="global seed")
    common.add_argument("--threads", type=int, help="torch thread cap")
    common.add_argument("--out", help="output directory for runs, predictions and reports")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="qrqa", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text, qr=False, qr_default=None):
        p = sub.add_parser(name, parents=[common], help=help_text, description=help_text)
        if qr:
            p.add_argument("--qr", choices=QR_VARIANTS, default=qr_default, required=qr_default is None,
                           help="question-rewriting variant")
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "generate the synthetic corpus")
    p.add_argument("--dir", required=True, help="directory to write corpus files into")
    p.add_argument("--entities", type=int, default=40)
    p.add_argument("--test-dialogues", type=int, default=20)
    p.add_argument("--train-dialogues", type=int, default=300)
    add("index", cmd_index, "build the BM25 index from the collection")
    add("train-qr", cmd_train_qr, "train the question rewriter")
    add("rewrite", cmd_rewrite, "rewrite every test question with a QR variant", qr=True)
    add("retrieve", cmd_retrieve, "BM25 retrieval for a rewrite file", qr=True)
    add("rerank", cmd_rerank, "cross-encoder re-ranking of a BM25 run", qr=True)
    add("train-reranker", cmd_train_reranker, "train the cross-encoder re-ranker")
    add("train-reader", cmd_train_reader, "train the extractive reader")
    add("read", cmd_read, "extract answer spans for a rewrite file", qr=True)
    add("eval-qr", cmd_eval_qr, "ROUGE-1 recall / EM / similarity of rewrites against human rewrites", qr=True)
    p = add("eval-retrieval", cmd_eval_retrieval, "MAP / MRR / NDCG@3 / P@1 and PR curve of a run", qr=True)
    p.add_argument("--stage", choices=("bm25", "rerank"), help="which run to evaluate (default: all present)")
    add("eval-extractive", cmd_eval_extractive, "EM / F1 / NA accuracy of predictions", qr=True)
    add("breakdown", cmd_breakdown, "original / QR / human error break-down tables", qr=True)
    p = add("pipeline", cmd_pipeline, "rewrite -> retrieve -> rerank -> read -> eval -> breakdown", qr=True)
    p.add_argument("--skip-rerank", action="store_true", help="stop retrieval after BM25")
    p.add_argument("--skip-read", action="store_true", help="skip extractive reading")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        ctx = Context(load_config(args))
        set_threads(ctx.cfg["threads"])
        args.func(ctx, args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, KeyError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # invariant violations and bugs
        log.exception("internal error")
        print(f"internal error: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
