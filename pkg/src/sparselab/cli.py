"""Command-line entry point: index, search, train, sweep, fuse, eval, bench.

Exit codes: 0 success, 1 usage error, 2 runtime error (including missing
input files).  Every output file is written to a temp file and renamed.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from . import __version__
from ._io import atomic_write_text
from .benchmark import LookupEncoder, SpladeDocEncoder, bench_latency, bench_qps, toy_encoder
from .encoder import encode_many, load_checkpoint, save_checkpoint
from .errors import SparselabError
from .evaluation import evaluate_run_file, evaluate_runs, write_qrels
from .fusion import FusionConfig, fuse_runs
from .index import build_index, build_tf_index, load_index, read_collection, save_index
from .retrieval import (
    BM25Params,
    DEFAULT_STOP_WORDS,
    RETRIEVERS,
    get_retriever,
    load_stopwords,
    remove_stop_words,
    score_bm25,
    splade_doc_query,
)
from .runs import read_run, write_run
from .sparse import DEFAULT_VOCAB_SIZE, SparseVector, Vocabulary, read_vectors, tokenize
from .training import (
    PRESETS,
    TrainConfig,
    build_config,
    read_config,
    stop_word_ids,
    task_for_config,
    train_loop,
)

log = logging.getLogger("sparselab")


class UsageError(Exception):
    pass


class MissingInput(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class _Help(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    def _get_help_string(self, action):
        # Flags without a literal default either are required or state it in their help text.
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


def _require(*paths: Optional[str]) -> None:
    for p in paths:
        if p is not None and not Path(p).is_file():
            raise MissingInput(f"input file not found: {p}")


# -- shared helpers ----------------------------------------------------------------

def _read_queries(path: str) -> Tuple[str, list]:
    """Return ("vectors", [(qid, SparseVector)]) or ("text", [(qid, text)])."""
    if path.endswith((".jsonl", ".json")):
        return "vectors", path
    return "text", read_collection(path)


def _stopwords(args) -> Optional[frozenset]:
    if getattr(args, "stopwords", None):
        return load_stopwords(args.stopwords)
    if getattr(args, "remove_stopwords", False):
        return DEFAULT_STOP_WORDS
    return None


def _query_vocab(index, vocab_size: int) -> Vocabulary:
    return index.vocabulary if index.vocabulary is not None else Vocabulary.synthetic(vocab_size)


def _prepare_queries(args, index):
    """Build (qid, payload) pairs and an encoder callable for search/bench."""
    kind, data = _read_queries(args.queries)
    stop = _stopwords(args)
    if kind == "vectors":
        vectors = read_vectors(data, index.vocab_size)
        if args.encoder or args.splade_doc:
            raise UsageError("--encoder/--splade-doc need text queries (qid<TAB>text)")
        return [(q, q) for q, _ in vectors], LookupEncoder(dict(vectors))
    vocab = _query_vocab(index, index.vocab_size)
    if args.encoder:
        _require(args.encoder)
        pair, _ = load_checkpoint(args.encoder)
        if pair.vocab_size != index.vocab_size:
            raise SparselabError("encoder vocabulary size does not match the index")
        vocab = Vocabulary.synthetic(pair.vocab_size)
        queries = []
        for qid, text in data:
            toks = tokenize(text)
            if stop is not None:
                toks = remove_stop_words(toks, stop)
            ids = vocab.ids(toks)
            if ids:
                queries.append((qid, ids))
            else:
                log.warning("query %s has no in-vocabulary tokens; skipped", qid)
        return queries, toy_encoder(pair.query)
    if args.splade_doc:
        drop = vocab.ids(stop) if stop is not None else []
        return [(qid, vocab.ids(tokenize(text))) for qid, text in data], SpladeDocEncoder(vocab.size, drop)
    raise UsageError("text queries need --encoder, --splade-doc or --bm25")


# -- subcommands -------------------------------------------------------------------

def cmd_index(args) -> int:
    _require(args.vectors, args.collection, args.encoder)
    if bool(args.vectors) == bool(args.collection):
        raise UsageError("give exactly one of --vectors or --collection")
    if args.vectors:
        index = build_index(read_vectors(args.vectors, args.vocab_size))
    elif args.encoder:
        pair, _ = load_checkpoint(args.encoder)
        vocab = Vocabulary.synthetic(pair.vocab_size)
        docs = []
        for doc_id, text in read_collection(args.collection):
            ids = vocab.ids(tokenize(text))
            docs.append((doc_id, ids))
        nonempty = [ids for _, ids in docs if ids]
        encoded = iter(encode_many(pair.doc, nonempty))
        vectors = [(d, next(encoded) if ids else SparseVector.empty(pair.vocab_size)) for d, ids in docs]
        index = build_index(vectors)
    else:
        index = build_tf_index(read_collection(args.collection))
    save_index(index, args.out)
    st = index.stats()
    print(f"indexed {st.num_docs} docs, {st.num_terms} terms, {st.total_postings} postings -> {args.out}")
    return 0


def cmd_search(args) -> int:
    _require(args.index, args.queries, args.stopwords)
    index = load_index(args.index)
    runs = []
    if args.bm25:
        kind, data = _read_queries(args.queries)
        if kind != "text":
            raise UsageError("--bm25 needs text queries (qid<TAB>text)")
        if index.vocabulary is None:
            raise SparselabError("--bm25 needs an index built from a text collection")
        stop = _stopwords(args)
        params = BM25Params(args.k1, args.b)
        for qid, text in data:
            toks = tokenize(text)
            if stop is not None:
                toks = remove_stop_words(toks, stop)
            runs.append(score_bm25(index, index.vocabulary.ids(toks), params, args.k, qid))
    else:
        queries, encoder = _prepare_queries(args, index)
        retrieve = get_retriever(args.mode)
        for qid, payload in queries:
            runs.append(retrieve(index, encoder(payload), args.k, qid))
    write_run(args.out, runs, args.tag)
    print(f"wrote {sum(len(r) for r in runs)} hits for {len(runs)} queries -> {args.out}")
    return 0


_TRAIN_KEYS = {
    "preset": "preset", "seed": "seed", "steps": "steps", "lambda_q": "lambda_q",
    "lambda_d": "lambda_d", "query_reg": "query_reg", "shared": "shared",
    "splade_doc": "splade_doc", "stop_queries": "stop_queries", "batch_size": "batch_size",
    "learning_rate": "learning_rate", "warmup": "warmup", "query_hidden": "query_hidden",
    "doc_hidden": "doc_hidden", "saturate": "saturate",
}


def _config_values(args) -> Dict[str, object]:
    values: Dict[str, object] = {}
    if args.config:
        _require(args.config)
        values.update(read_config(args.config))
    for attr, key in _TRAIN_KEYS.items():
        v = getattr(args, attr, None)
        if v is not None:
            values[key] = v
    return values


def _export_task(task, directory: str) -> None:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write_text(out / "docs.tsv", "".join(f"{d}\t{t}\n" for d, t in task.texts()))
    atomic_write_text(out / "queries.tsv", "".join(f"{q}\t{t}\n" for q, t in task.heldout_texts()))
    write_qrels(out / "qrels.txt", task.qrels)


def cmd_train(args) -> int:
    config = build_config(_config_values(args))
    task = task_for_config(config)
    run = train_loop(config, task)
    save_checkpoint(args.out, run.encoders, config.to_mapping())
    history = args.history or f"{args.out}.loss.csv"
    run.write_history(history)
    if args.export_task:
        _export_task(task, args.export_task)
    f = run.final
    print(f"trained {config.preset} ({config.lambda_q:g}, {config.lambda_d:g}) for {f.step} steps: "
          f"loss={f.total:.4f} q_nnz={f.mean_q_nnz:.2f} d_nnz={f.mean_d_nnz:.2f} -> {args.out}")
    return 0


def sweep_row(config: TrainConfig, mode: str, warmup: int, reps: int) -> Dict[str, object]:
    """Train one configuration and measure its (query size, latency, MRR@10) point."""
    task = task_for_config(config)
    run = train_loop(config, task)
    pair = run.encoders
    index = build_index(list(zip(task.doc_ids, encode_many(pair.doc, task.docs))))
    if config.splade_doc:
        drop = stop_word_ids(task.vocabulary) if config.stop_queries else []
        encoder = SpladeDocEncoder(task.vocab_size, drop)
    else:
        encoder = toy_encoder(pair.query)
    queries = list(zip(task.heldout_ids, [q.tolist() for q in task.heldout_queries]))
    report = bench_latency(index, queries, encoder, mode, k=10, warmup=warmup, repetitions=reps)
    mrr = evaluate_runs(report.runs, task.qrels, 10).mean_mrr or 0.0
    q_nnz = sum(encoder(p).nnz for _, p in queries) / len(queries)
    return {
        "config": config.preset,
        "lambda_q": config.lambda_q,
        "lambda_d": config.lambda_d,
        "mean_q_nnz": round(q_nnz, 6),
        "latency_ms": round(report.mean_ms, 6),
        "mrr_at_10": round(mrr, 6),
    }


def cmd_sweep(args) -> int:
    presets = [p.strip() for p in args.presets.split(",") if p.strip()]
    for p in presets:
        if p not in PRESETS:
            raise UsageError(f"unknown preset {p!r}; choose from {sorted(PRESETS)}")
    base = _config_values(args)
    rows = []
    for p in presets:
        values = dict(base, preset=p)
        config = build_config(values)
        rows.append(sweep_row(config, args.mode, args.warmup_passes, args.reps))
        print(",".join(str(v) for v in rows[-1].values()))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    atomic_write_text(args.out, buf.getvalue())
    return 0


def cmd_fuse(args) -> int:
    _require(args.run_a, args.run_b)
    config = FusionConfig(args.depth, args.weight_a, 1.0 - args.weight_a, args.k)
    fused = fuse_runs(read_run(args.run_a), read_run(args.run_b), config)
    write_run(args.out, fused, args.tag)
    print(f"fused {len(fused)} queries -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    _require(args.run, args.qrels)
    report = evaluate_run_file(args.run, args.qrels, args.k, args.gain == "exponential")
    text = report.to_csv()
    if args.out:
        atomic_write_text(args.out, text)
    sys.stdout.write(text)
    return 0


def cmd_bench(args) -> int:
    _require(args.index, args.queries, args.stopwords)
    index = load_index(args.index)
    queries, encoder = _prepare_queries(args, index)
    if args.workers > 1:
        report = bench_qps(index, queries, encoder, args.mode, args.k, args.workers, args.reps,
                           warmup=args.warmup, backend=args.backend)
    else:
        report = bench_latency(index, queries, encoder, args.mode, args.k, args.warmup, args.reps)
    if args.out:
        atomic_write_text(args.out, report.to_csv())
    print("mean_ms,p50_ms,p99_ms,qps,workers")
    print(report.summary_line())
    return 0


# -- parser ----------------------------------------------------------------------------

def _add_query_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--queries", required=True, help="queries: .jsonl sparse vectors or qid<TAB>text TSV")
    p.add_argument("--mode", choices=sorted(RETRIEVERS), default="maxscore", help="retrieval algorithm")
    p.add_argument("--k", type=int, default=10, help="hits per query")
    p.add_argument("--encoder", help="encoder checkpoint used to encode text queries (default: none)")
    p.add_argument("--splade-doc", action="store_true", help="uniform-weight tokenized queries (no query encoder)")
    p.add_argument("--stopwords", help="stop-word file (one per line); removes them from text queries (default: none)")
    p.add_argument("--remove-stopwords", action="store_true", help="remove the built-in English stop words")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value training config; flags override its values (default: none)")
    p.add_argument("--seed", type=int, help="random seed (default: $SPARSELAB_SEED; one of the two is required)")
    p.add_argument("--steps", type=int, help="training steps (default 2000)")
    p.add_argument("--lambda-q", dest="lambda_q", type=float, help="query regularization weight (default: from --preset, else 5e-3)")
    p.add_argument("--lambda-d", dest="lambda_d", type=float, help="document regularization weight (default: from --preset, else 5e-3)")
    p.add_argument("--query-reg", dest="query_reg", choices=["flops", "l1"], help="query regularizer (default: l1; flops for base-* presets)")
    p.add_argument("--shared", dest="shared", action="store_const", const=True,
                   help="one encoder for queries and documents (default: separate; shared for base-* presets)")
    p.add_argument("--separate", dest="shared", action="store_const", const=False,
                   help="distinct query and document encoders (the default)")
    p.add_argument("--splade-doc", dest="splade_doc", action="store_const", const=True,
                   help="train the document encoder only, with uniform query weights (default: off)")
    p.add_argument("--stop-queries", dest="stop_queries", action="store_const", const=True,
                   help="drop stop words from SPLADE-doc queries (default: off)")
    p.add_argument("--batch-size", dest="batch_size", type=int, help="queries per batch (default 8)")
    p.add_argument("--lr", dest="learning_rate", type=float, help="Adam learning rate (default 0.01)")
    p.add_argument("--warmup", type=int, help="lambda warmup steps (default steps/5)")
    p.add_argument("--query-hidden", dest="query_hidden", type=int, help="query encoder hidden size (default 4)")
    p.add_argument("--doc-hidden", dest="doc_hidden", type=int, help="document encoder hidden size (default 32)")
    p.add_argument("--no-saturate", dest="saturate", action="store_const", const=False,
                   help="use relu instead of log(1 + relu) activations (default: off)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sparselab", description=__doc__, formatter_class=_Help)
    parser.add_argument("--version", action="version", version=f"sparselab {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("index", help="build an inverted index", formatter_class=_Help)
    p.add_argument("--vectors", help="documents as JSON lines sparse vectors (default: none)")
    p.add_argument("--collection", help="documents as docId<TAB>text; term-frequency index unless --encoder (default: none)")
    p.add_argument("--encoder", help="checkpoint whose document encoder encodes --collection (default: none)")
    p.add_argument("--vocab-size", type=int, default=DEFAULT_VOCAB_SIZE, help="vocabulary size of --vectors")
    p.add_argument("--out", required=True, help="index file to write")
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("search", help="top-k retrieval to a TREC run", formatter_class=_Help)
    p.add_argument("--index", required=True, help="index file")
    _add_query_flags(p)
    p.add_argument("--bm25", action="store_true", help="BM25 over a term-frequency index")
    p.add_argument("--k1", type=float, default=0.9, help="BM25 k1")
    p.add_argument("--b", type=float, default=0.4, help="BM25 b")
    p.add_argument("--tag", default="sparselab", help="run tag column")
    p.add_argument("--out", required=True, help="TREC run file to write")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("train", help="train the toy encoder on the synthetic task", formatter_class=_Help)
    p.add_argument("--preset", choices=sorted(PRESETS), help="named (lambda_q, lambda_d) pair (default: none)")
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="encoder checkpoint to write")
    p.add_argument("--history", help="loss CSV (default <out>.loss.csv)")
    p.add_argument("--export-task", help="directory for docs.tsv, queries.tsv and qrels.txt of the task (default: none)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="train presets and tabulate size/latency/MRR", formatter_class=_Help)
    p.add_argument("--presets", default="S,M,L", help="comma-separated preset names")
    _add_train_flags(p)
    p.add_argument("--mode", choices=sorted(RETRIEVERS), default="maxscore", help="retrieval algorithm")
    p.add_argument("--warmup-passes", dest="warmup_passes", type=int, default=2, help="untimed passes")
    p.add_argument("--reps", type=int, default=3, help="timed passes")
    p.add_argument("--out", required=True, help="CSV to write")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("fuse", help="min-max fuse two TREC runs", formatter_class=_Help)
    p.add_argument("--run-a", required=True, help="first run (e.g. learned sparse)")
    p.add_argument("--run-b", required=True, help="second run (e.g. BM25)")
    p.add_argument("--depth", type=int, default=100, help="hits per run considered")
    p.add_argument("--weight-a", type=float, default=0.5, help="weight of run A; run B gets 1 - weight")
    p.add_argument("--k", type=int, default=100, help="hits per fused query")
    p.add_argument("--tag", default="fused", help="run tag column")
    p.add_argument("--out", required=True, help="TREC run file to write")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("eval", help="MRR@k and nDCG@k report", formatter_class=_Help)
    p.add_argument("--run", required=True, help="TREC run file")
    p.add_argument("--qrels", required=True, help="TREC qrels file")
    p.add_argument("--k", type=int, default=10, help="cutoff")
    p.add_argument("--gain", choices=["linear", "exponential"], default="linear", help="nDCG gain")
    p.add_argument("--out", help="CSV report (also printed) (default: none)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="latency / QPS measurement", formatter_class=_Help)
    p.add_argument("--index", required=True, help="index file")
    _add_query_flags(p)
    p.add_argument("--warmup", type=int, default=10, help="untimed passes over the query set")
    p.add_argument("--reps", type=int, default=3, help="timed passes")
    p.add_argument("--workers", type=int, default=1, help="parallel workers; >1 reports QPS")
    p.add_argument("--backend", choices=["auto", "process", "thread"], default="auto", help="QPS worker type")
    p.add_argument("--out", help="CSV of samples plus summary (default: none)")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except MissingInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SparselabError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
