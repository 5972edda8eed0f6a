"""Similarity reasoner over the candidate pool.

For each token the forward state queries the ``fc`` and ``ee`` rows and the
backward state queries the ``eb`` and ``bc`` rows; each family is scored with
``sigmoid(query . fact)`` and max-pooled over all entities. Only the scores
leave the reasoner, never pool content.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .memory import CandidatePool
from .numerics import ShapeError, Tensor

COMPONENTS = ("fc", "eb", "ee", "bc")


@dataclass
class ReferenceVector:
    s: Tensor  # (4,) ordered fc, eb, ee, bc
    argmax: tuple[int, int, int, int] | None = None  # pool row per component, None for an empty pool

    @property
    def values(self) -> np.ndarray:
        return self.s.data

    def __iter__(self):
        return iter(self.s.data.tolist())


def kernel(query, fact) -> Tensor:
    q, f = nx.as_tensor(query), nx.as_tensor(fact)
    if q.shape != f.shape or q.ndim != 1:
        raise ShapeError(f"kernel: query {q.shape} and fact {f.shape} must be equal-length vectors")
    dot = nx.matmul(nx.reshape(q, (1, -1)), nx.reshape(f, (-1, 1)))
    return nx.reshape(nx.sigmoid(dot), ())


def _family(queries: Tensor, facts: Tensor) -> tuple[Tensor, np.ndarray]:
    scores = nx.sigmoid(nx.matmul(queries, nx.transpose(facts)))  # M x N
    return nx.max_over(scores, axis=1), np.argmax(scores.data, axis=1)


def _queries_for(pool: CandidatePool, h_f: Tensor, h_b: Tensor):
    return ((h_f, pool.r_fc), (h_b, pool.r_eb), (h_f, pool.r_ee), (h_b, pool.r_bc))


def reference(h_f, h_b, pool: CandidatePool) -> ReferenceVector:
    """Reference vector for a single token with states ``h_f`` and ``h_b`` (each ``d``)."""
    h_f, h_b = nx.as_tensor(h_f), nx.as_tensor(h_b)
    if h_f.shape != (pool.dim,) or h_b.shape != (pool.dim,):
        raise ShapeError(f"reference: queries {h_f.shape}/{h_b.shape} vs pool dim {pool.dim}")
    if pool.size == 0:
        return ReferenceVector(Tensor(np.zeros(4, dtype=h_f.data.dtype)))
    parts, args = [], []
    for q, facts in _queries_for(pool, nx.reshape(h_f, (1, -1)), nx.reshape(h_b, (1, -1))):
        s, a = _family(q, facts)
        parts.append(s)
        args.append(int(a[0]))
    return ReferenceVector(nx.concat(parts, axis=0), tuple(args))


def references(h_f: Tensor, h_b: Tensor, pool: CandidatePool) -> tuple[Tensor, np.ndarray]:
    """Batched form: ``B x T x d`` queries give ``B x T x 4`` scores and argmax rows.

    The argmax array is ``-1`` when the pool is empty.
    """
    B, T, d = h_f.shape
    if d != pool.dim:
        raise ShapeError(f"references: query dim {d} vs pool dim {pool.dim}")
    if pool.size == 0:
        return Tensor(np.zeros((B, T, 4), dtype=h_f.data.dtype)), np.full((B, T, 4), -1)
    qf = nx.reshape(h_f, (B * T, d))
    qb = nx.reshape(h_b, (B * T, d))
    parts, args = [], []
    for q, facts in _queries_for(pool, qf, qb):
        s, a = _family(q, facts)
        parts.append(nx.reshape(s, (B * T, 1)))
        args.append(a)
    s = nx.reshape(nx.concat(parts, axis=-1), (B, T, 4))
    return s, np.stack(args, axis=-1).reshape(B, T, 4)


TRACE_HEADER = ["layer", "sent", "pos", "token", *COMPONENTS, "span_id", "span"]


def trace_rows(layer: int, sentences: Sequence[Sequence[str]], scores: np.ndarray, argmax: np.ndarray,
               pool: CandidatePool | None = None, sent_offset: int = 0):
    """Per-token rows: token, the four scores and the best-matching pool span."""
    for b, toks in enumerate(sentences):
        for t, tok in enumerate(toks):
            row = scores[b, t]
            k = best_span(row, argmax[b, t])
            span = ""
            if k >= 0 and pool is not None:
                sp = pool.spans[k]
                span = f"{sp.sent + sent_offset}:{sp.begin}-{sp.end}:{sp.etype}"
            yield [layer, b + sent_offset, t, tok, *(f"{v:.6f}" for v in row), k, span]


def write_trace(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_HEADER)
        w.writerows(rows)


def best_span(scores_row: np.ndarray, argmax_row: np.ndarray) -> int:
    """Pool row behind the largest of the four component scores, ``-1`` if none."""
    if argmax_row[0] < 0:
        return -1
    return int(argmax_row[int(np.argmax(scores_row))])
