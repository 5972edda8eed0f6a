"""Exact-match entity scoring and per-layer comparison reports."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

from .memory import EntitySpan, extract_spans


def pct(x: float) -> str:
    """Percent with two decimals, half-up."""
    return str(Decimal(repr(x)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def _prf(correct: int, gold: int, predicted: int) -> tuple[float, float, float]:
    p = 100.0 * correct / predicted if predicted else 0.0
    r = 100.0 * correct / gold if gold else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


@dataclass
class Counts:
    gold: int = 0
    predicted: int = 0
    correct: int = 0

    @property
    def prf(self) -> tuple[float, float, float]:
        return _prf(self.correct, self.gold, self.predicted)


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    gold: int
    predicted: int
    correct: int
    per_type: dict[str, Counts] = field(default_factory=dict)
    label: str = ""

    def format(self) -> str:
        head = f"{self.label + ': ' if self.label else ''}P={pct(self.precision)} R={pct(self.recall)} F1={pct(self.f1)}"
        lines = [head + f" (gold={self.gold} predicted={self.predicted} correct={self.correct})"]
        for t in sorted(self.per_type):
            c = self.per_type[t]
            p, r, f = c.prf
            lines.append(f"  {t:<8} P={pct(p)} R={pct(r)} F1={pct(f)} (gold={c.gold} predicted={c.predicted} correct={c.correct})")
        return "\n".join(lines)


def entity_f1(gold: Iterable[EntitySpan], predicted: Iterable[EntitySpan], label: str = "") -> EvalReport:
    """A prediction counts iff (sent, begin, end, type) matches a not yet used gold span."""
    remaining: dict[EntitySpan, int] = defaultdict(int)
    per_type: dict[str, Counts] = defaultdict(Counts)
    n_gold = 0
    for sp in gold:
        remaining[sp] += 1
        per_type[sp.etype].gold += 1
        n_gold += 1
    n_pred = n_correct = 0
    for sp in predicted:
        n_pred += 1
        per_type[sp.etype].predicted += 1
        if remaining.get(sp, 0) > 0:
            remaining[sp] -= 1
            n_correct += 1
            per_type[sp.etype].correct += 1
    p, r, f = _prf(n_correct, n_gold, n_pred)
    return EvalReport(p, r, f, n_gold, n_pred, n_correct, dict(per_type), label)


def spans_of(tag_seqs: Sequence[Sequence[str]]) -> list[EntitySpan]:
    return [sp for i, tags in enumerate(tag_seqs) for sp in extract_spans(tags, sent=i)]


def score_tags(gold_tags: Sequence[Sequence[str]], pred_tags: Sequence[Sequence[str]], label: str = "") -> EvalReport:
    if len(gold_tags) != len(pred_tags):
        raise ValueError(f"{len(gold_tags)} gold sentences vs {len(pred_tags)} predicted")
    return entity_f1(spans_of(gold_tags), spans_of(pred_tags), label)


def token_accuracy(gold_tags: Sequence[Sequence[str]], pred_tags: Sequence[Sequence[str]]) -> float:
    n = sum(len(g) for g in gold_tags)
    hit = sum(a == b for g, p in zip(gold_tags, pred_tags) for a, b in zip(g, p))
    return hit / n if n else 0.0


@dataclass
class DiffEntry:
    layer: int  # layer whose tag differs from layer - 1 (1-based)
    sent: int
    pos: int
    token: str
    before: str
    after: str
    gold: str | None
    scores: tuple[float, float, float, float]
    span: EntitySpan | None  # best-matching row of the pool this layer consulted
    span_text: str = ""

    def format(self) -> str:
        s = " ".join(f"{v:.4f}" for v in self.scores)
        where = f" <- {self.span_text} [{self.span.etype}]" if self.span is not None else ""
        gold = f" gold={self.gold}" if self.gold is not None else ""
        return f"L{self.layer} sent={self.sent} pos={self.pos} {self.token!r}: {self.before} -> {self.after}{gold} s=({s}){where}"


@dataclass
class LayerDiffReport:
    layers: list[EvalReport]
    changes: list[DiffEntry]

    def format(self) -> str:
        out = [r.format() for r in self.layers]
        if self.changes:
            out.append(f"{len(self.changes)} changed tokens:")
            out.extend("  " + c.format() for c in self.changes)
        else:
            out.append("no tag changes between layers")
        return "\n".join(out)


def layer_name(i: int, depth: int) -> str:
    if depth > 1 and i == 0:
        return "First"
    if i == depth - 1:
        return "Final"
    return f"Layer {i + 1}"


def layer_diff(traces, gold: Sequence[Sequence[str]] | None = None) -> LayerDiffReport:
    """Per-layer reports plus every token whose tag changed between consecutive layers.

    ``traces`` is one ``LayerTrace`` or a list of them; sentences are numbered
    by their position in the source list (``batch.indices``). ``gold`` defaults
    to the batches' own gold tags.
    """
    from .reasoner import best_span

    traces = traces if isinstance(traces, (list, tuple)) else [traces]
    if not traces:
        return LayerDiffReport([], [])
    depth = len(traces[0].layers)
    gold_by_sent: dict[int, list[str]] = {}
    pred_by_layer: list[dict[int, list[str]]] = [dict() for _ in range(depth)]
    tokens_by_sent: dict[int, list[str]] = {}
    changes: list[DiffEntry] = []
    offset_gold = 0
    for tr in traces:
        batch = tr.batch
        for b, (sent, gi) in enumerate(zip(batch.sentences, batch.indices)):
            tokens_by_sent[gi] = sent.tokens
            if gold is not None:
                gold_by_sent[gi] = list(gold[offset_gold + b])
            elif sent.gold_tags is not None:
                from .ingest import normalize_tags

                gold_by_sent[gi] = normalize_tags(sent.gold_tags)
            for li, layer in enumerate(tr.layers):
                pred_by_layer[li][gi] = layer.tags[b]
        offset_gold += batch.size
        for li in range(1, depth):
            prev, cur = tr.layers[li - 1], tr.layers[li]
            scores = cur.refs.data
            for b, (sent, gi) in enumerate(zip(batch.sentences, batch.indices)):
                for t, (x, y) in enumerate(zip(prev.tags[b], cur.tags[b])):
                    if x == y:
                        continue
                    k = best_span(scores[b, t], cur.ref_argmax[b, t])
                    span = text = None
                    if k >= 0:
                        sp = cur.input_pool.spans[k]
                        span = EntitySpan(batch.indices[sp.sent], sp.begin, sp.end, sp.etype)
                        text = " ".join(batch.sentences[sp.sent].tokens[sp.begin : sp.end + 1])
                    g = gold_by_sent.get(gi)
                    changes.append(DiffEntry(li + 1, gi, t, sent.tokens[t], x, y, g[t] if g else None,
                                             tuple(float(v) for v in scores[b, t]), span, text or ""))
    order = sorted(tokens_by_sent)
    reports = []
    if gold_by_sent:
        g = [gold_by_sent[i] for i in order]
        for li in range(depth):
            reports.append(score_tags(g, [pred_by_layer[li][i] for i in order], layer_name(li, depth)))
    changes.sort(key=lambda c: (c.layer, c.sent, c.pos))
    return LayerDiffReport(reports, changes)
