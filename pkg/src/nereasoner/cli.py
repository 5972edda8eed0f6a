"""Command line: ``train``, ``tag`` and ``eval``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ModelConfig, parse_overrides, read_config, write_config
from .evaluation import layer_diff, layer_name, score_tags
from .ingest import (ColumnSpec, Sentence, Vocab, embedding_matrix, extend_vocab, normalize_tags, read_conll,
                     read_embedding_file, write_conll)
from .model import load_checkpoint, save_checkpoint, train
from .reasoner import trace_rows, write_trace

logger = logging.getLogger("nereasoner")

CHECKPOINT_NAME = "model.bin"
LOG_NAME = "train_log.csv"
CONFIG_NAME = "config.txt"


class CliError(Exception):
    pass


def _pairs(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _read(path: str, tag_column: int | None) -> list[Sentence]:
    if not Path(path).is_file():
        raise CliError(f"{path}: no such file")
    return read_conll(path, ColumnSpec(token=0, tag=tag_column))


def _n_columns(path: str) -> int:
    if not Path(path).is_file():
        raise CliError(f"{path}: no such file")
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            cols = line.split()
            if cols and cols[0] != "-DOCSTART-":
                return len(cols)
    raise CliError(f"{path}: no tokens")


def cmd_train(args) -> None:
    cfg = read_config(args.config) if args.config else ModelConfig()
    overrides = parse_overrides(_pairs(args.set))
    if args.seed is not None:
        overrides["seed"] = args.seed
    cfg = cfg.replace(**overrides)
    train_set = _read(args.train, args.tag_column)
    dev_set = _read(args.dev, args.tag_column) if args.dev else []
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    vocab = Vocab.for_words(train_set)
    embeddings = None
    if args.embeddings:
        vectors = read_embedding_file(args.embeddings, cfg.word_dim)
        extend_vocab(vocab, vectors, dev_set)
        embeddings, _ = embedding_matrix(vectors, vocab, cfg.word_dim, np.random.default_rng(cfg.seed))
    write_config(cfg, out / CONFIG_NAME)
    result = train(cfg, train_set, dev_set, embeddings=embeddings, vocab=vocab,
                   log_path=out / LOG_NAME, checkpoint_path=out / CHECKPOINT_NAME)
    if not dev_set:
        save_checkpoint(result.model, out / CHECKPOINT_NAME)
    print(f"best epoch {result.best_epoch}; checkpoint {out / CHECKPOINT_NAME}; log {out / LOG_NAME}")


def cmd_tag(args) -> None:
    overrides = {"depth": args.depth} if args.depth else {}
    model = load_checkpoint(args.model, **overrides)
    labelled = _n_columns(args.input) > 1
    sentences = _read(args.input, args.tag_column if labelled else None)
    unlabelled = [Sentence(s.tokens, None, s.doc_id) for s in sentences]
    traces = model.predict(model.batches(unlabelled))
    depth = len(traces[0].layers) if traces else model.config.depth
    per_layer: list[dict[int, list[str]]] = [dict() for _ in range(depth)]
    trace_out = []
    for tr in traces:
        toks = [s.tokens for s in tr.batch.sentences]
        for li, layer in enumerate(tr.layers):
            for b, i in enumerate(tr.batch.indices):
                per_layer[li][i] = layer.tags[b]
            if args.trace:
                trace_out.extend(trace_rows(li + 1, toks, layer.refs.data, layer.ref_argmax,
                                            layer.input_pool, tr.batch.indices[0]))
    rows = []
    for i, s in enumerate(sentences):
        gold = [s.gold_tags] if s.gold_tags is not None else []
        cols = [s.tokens, *gold, *(per_layer[li][i] for li in range(depth))]
        rows.append([list(c) for c in zip(*cols)])
    write_conll(args.output, rows)
    if args.trace:
        write_trace(args.trace, trace_out)


def cmd_eval(args) -> None:
    if args.model:
        overrides = {"depth": args.depth} if args.depth else {}
        model = load_checkpoint(args.model, **overrides)
        sentences = _read(args.input, args.tag_column)
        if any(s.gold_tags is None for s in sentences):
            raise CliError(f"{args.input}: gold tags required")
        report = layer_diff(model.predict(sentences))
        print(report.format() if args.changes else "\n".join(r.format() for r in report.layers))
        return
    n = _n_columns(args.input)
    if n < 3:
        raise CliError(f"{args.input}: expected token, gold and at least one prediction column, got {n} columns")
    gold = [normalize_tags(s.gold_tags) for s in _read(args.input, 1)]
    for k in range(2, n):
        pred = [normalize_tags(s.gold_tags) for s in _read(args.input, k)]
        print(score_tags(gold, pred, layer_name(k - 2, n - 2)).format())


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nereasoner", description="Multi-layer NER tagger with a candidate pool.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model and write checkpoint + log")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--train", required=True, help="CoNLL training file")
    t.add_argument("--dev", help="CoNLL dev file for model selection")
    t.add_argument("--embeddings", help="text word-vector file")
    t.add_argument("--output", default=".", help="output directory (default: .)")
    t.add_argument("--seed", type=int)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config field")
    t.add_argument("--tag-column", type=int, default=-1, help="CoNLL tag column (default: last)")
    t.set_defaults(func=cmd_train)

    g = sub.add_parser("tag", help="write one predicted tag column per layer")
    g.add_argument("--model", required=True)
    g.add_argument("--input", required=True)
    g.add_argument("--output", required=True)
    g.add_argument("--trace", help="also write per-token reasoner scores (CSV)")
    g.add_argument("--depth", type=int, help="number of layers to run")
    g.add_argument("--tag-column", type=int, default=-1)
    g.set_defaults(func=cmd_tag)

    e = sub.add_parser("eval", help="entity-level P/R/F1")
    e.add_argument("--input", required=True,
                   help="with --model: gold CoNLL; without: columns token, gold, prediction...")
    e.add_argument("--model")
    e.add_argument("--depth", type=int)
    e.add_argument("--changes", action="store_true", help="list tokens whose tag changed between layers")
    e.add_argument("--tag-column", type=int, default=-1)
    e.set_defaults(func=cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, OSError, ValueError, NotImplementedError) as exc:
        print(f"nereasoner {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
