"""Small synthetic experiments: overfitting, cross-sentence consistency, manual overrides."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .config import ModelConfig
from .evaluation import EvalReport, layer_diff, token_accuracy
from .ingest import TagSet, Vocab, normalize_tags
from .model import LayerTrace, NEReasoner, train
from .synthetic import ConsistencyCorpus, consistency_corpus, overfit_corpus

logger = logging.getLogger(__name__)

OVERFIT_CONFIG = dict(learning_rate=0.01, batch_size=16, max_epochs=200, patience=200)
# sizes are scaled down from the defaults so a run takes about a minute on one core
CONSISTENCY_CONFIG = dict(char_encoder="none", bilstm_state=64, decoder_state=64, pool_scope="document",
                          loss_mode="all_layers", learning_rate=0.002, train_embeddings=False,
                          max_epochs=12, patience=12)


@dataclass
class OverfitResult:
    epochs: int
    token_accuracy: float
    f1: float


def overfit_run(seed: int = 0, **overrides) -> OverfitResult:
    """Train on the 50-sentence fixture until it is memorised (or epochs run out)."""
    sentences = overfit_corpus(seed=seed)
    cfg = ModelConfig(**{**OVERFIT_CONFIG, "seed": seed + 1, **overrides})
    gold = [normalize_tags(s.gold_tags) for s in sentences]
    state = {}

    def check(epoch, row):
        traces = model.predict(sentences)
        pred = _ordered_tags(traces, len(sentences))
        state["acc"], state["f1"], state["epoch"] = (token_accuracy(gold, pred),
                                                    layer_diff(traces).layers[-1].f1, epoch)
        return state["acc"] >= 0.99 and state["f1"] >= 95.0

    vocab = Vocab.for_words(sentences)
    model = NEReasoner(cfg, vocab, Vocab.for_chars(sentences), TagSet.from_sentences(sentences))
    train(cfg, sentences, [], model=model, on_epoch=check)
    return OverfitResult(state["epoch"], state["acc"], state["f1"])


def _ordered_tags(traces: list[LayerTrace], n: int, layer: int = -1) -> list[list[str]]:
    out: list[list[str] | None] = [None] * n
    for tr in traces:
        for b, i in enumerate(tr.batch.indices):
            out[i] = tr.layers[layer].tags[b]
    return out


@dataclass
class ConsistencyRun:
    seed: int
    corpus: ConsistencyCorpus
    model: NEReasoner
    traces: list[LayerTrace]  # held-out documents
    reports: list[EvalReport]  # per layer, held-out documents
    history: list[dict] = field(default_factory=list)

    @property
    def first(self) -> EvalReport:
        return self.reports[0]

    @property
    def final(self) -> EvalReport:
        return self.reports[-1]


def consistency_run(seed: int = 0, n_docs: int = 500, dev_docs: int = 30, **overrides) -> ConsistencyRun:
    """Train on the two-sentence document corpus and score each layer on held-out documents.

    The last ``dev_docs`` training documents are held back for model selection.
    """
    corpus = consistency_corpus(n_docs, seed=seed)
    cfg = ModelConfig(**{**CONSISTENCY_CONFIG, "seed": seed + 1, **overrides})
    n_dev = 2 * dev_docs
    train_set, dev_set = corpus.train[:-n_dev], corpus.train[-n_dev:]
    vocab = corpus.vocab()
    model = NEReasoner(cfg, vocab, Vocab.for_chars(corpus.train), TagSet(["PER"]),
                       corpus.embedding_matrix(vocab, cfg.word_dim))
    result = train(cfg, train_set, dev_set, model=model)
    traces = model.predict(corpus.test)
    reports = layer_diff(traces).layers
    logger.info("seed %d: %s", seed, " | ".join(r.format().splitlines()[0] for r in reports))
    return ConsistencyRun(seed, corpus, model, traces, reports, result.history)


@dataclass
class OverrideCase:
    sent: int
    pos: int
    token: str
    first: str
    final: str
    zeroed: str  # final-layer tag with the token's scores forced to 0
    forced: str  # final-layer tag with the token's matched scores forced to 1

    @property
    def reverts(self) -> bool:
        return self.zeroed == self.first

    @property
    def preserved(self) -> bool:
        return self.forced == self.final


def override_probe(run: ConsistencyRun, max_cases: int = 20, rng_seed: int = 0) -> list[OverrideCase]:
    """Re-decode corrected ambiguous mentions with their reference scores overwritten.

    A case is a held-out token whose final-layer tag differs from its first-layer
    tag and equals gold. Its scores are replaced by zeros (expected: the
    first-layer tag comes back) and, separately, every component that matched
    a pool row is set to 1 (expected: the corrected tag stays).
    """
    model = run.model
    final_layer = len(run.traces[0].layers) - 1
    candidates = []
    for ti, tr in enumerate(run.traces):
        for b, sent in enumerate(tr.batch.sentences):
            gold = normalize_tags(sent.gold_tags)
            first, final = tr.layers[0].tags[b], tr.final.tags[b]
            for t in range(len(sent)):
                if first[t] != final[t] and final[t] == gold[t]:
                    candidates.append((ti, b, t))
    rng = np.random.default_rng(rng_seed)
    if len(candidates) > max_cases:
        keep = rng.choice(len(candidates), size=max_cases, replace=False)
        candidates = [candidates[i] for i in sorted(keep)]
    cases = []
    for ti, b, t in candidates:
        tr = run.traces[ti]
        matched = tr.final.ref_argmax[b, t] >= 0

        def zero(layer, s):
            if layer == final_layer:
                s[b, t] = 0.0
            return s

        def force(layer, s):
            if layer == final_layer:
                s[b, t, matched] = 1.0
            return s

        z = model.forward(tr.batch, ref_hook=zero).final.tags[b][t]
        f = model.forward(tr.batch, ref_hook=force).final.tags[b][t]
        sent = tr.batch.sentences[b]
        cases.append(OverrideCase(tr.batch.indices[b], t, sent.tokens[t], tr.layers[0].tags[b][t],
                                  tr.final.tags[b][t], z, f))
    return cases


def ambiguous_recall(run: ConsistencyRun, layer: int) -> float:
    """Share of ambiguous-context names the given layer tags as a person."""
    positions = run.corpus.ambiguous_positions(run.corpus.test)
    tags = _ordered_tags(run.traces, len(run.corpus.test), layer)
    hit = sum(tags[i][t] != "O" for i, t in positions)
    return hit / len(positions) if positions else 0.0

