"""Candidate pool: entity spans and their four boundary encoder states."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .numerics import Tensor, index as _index


@dataclass(frozen=True, order=True)
class EntitySpan:
    sent: int
    begin: int
    end: int
    etype: str

    def __post_init__(self):
        if self.begin < 0 or self.end < self.begin:
            raise ValueError(f"bad span bounds {self.begin}..{self.end}")


def extract_spans(tags: Sequence[str], sent: int = 0) -> list[EntitySpan]:
    """Spans from a possibly malformed BMEOS sequence.

    Repair is greedy: ``B`` opens, ``M`` of the same type continues, ``E`` of
    the same type closes. An ``M`` or ``E`` with nothing of its type open starts
    a span at itself, an open run that is interrupted closes at its last
    in-type token, and a type switch closes the old run and opens a new one.
    """
    spans: list[EntitySpan] = []
    start: int | None = None
    cur: str | None = None

    def close(last: int):
        nonlocal start, cur
        if cur is not None:
            spans.append(EntitySpan(sent, start, last, cur))
        start, cur = None, None

    for t, tag in enumerate(tags):
        if tag == "O":
            close(t - 1)
            continue
        prefix, etype = tag[0], tag[2:]
        if prefix == "S":
            close(t - 1)
            spans.append(EntitySpan(sent, t, t, etype))
        elif prefix == "B":
            close(t - 1)
            start, cur = t, etype
        elif prefix == "M":
            if cur != etype:
                close(t - 1)
                start, cur = t, etype
        elif prefix == "E":
            if cur != etype:
                close(t - 1)
                start, cur = t, etype
            close(t)
        else:
            raise ValueError(f"not a BMEOS tag: {tag!r}")
    close(len(tags) - 1)
    return spans


@dataclass
class CandidatePool:
    """Four row-aligned matrices, one row per recognized entity.

    Row ``k`` holds, for span ``spans[k]``: forward state at its begin
    (``r_fc``), backward state at its begin (``r_eb``), forward state at its
    end (``r_ee``) and backward state at its end (``r_bc``).
    """

    r_fc: Tensor
    r_eb: Tensor
    r_ee: Tensor
    r_bc: Tensor
    spans: list[EntitySpan] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.spans)
        for m in (self.r_fc, self.r_eb, self.r_ee, self.r_bc):
            if m.shape[0] != n:
                raise ValueError(f"pool matrix has {m.shape[0]} rows for {n} spans")

    @property
    def size(self) -> int:
        return len(self.spans)

    @property
    def dim(self) -> int:
        return self.r_fc.shape[1]

    def matrices(self) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        return self.r_fc, self.r_eb, self.r_ee, self.r_bc

    @classmethod
    def empty(cls, dim: int, dtype=np.float64) -> "CandidatePool":
        z = np.zeros((0, dim), dtype=dtype)
        return cls(Tensor(z), Tensor(z.copy()), Tensor(z.copy()), Tensor(z.copy()), [])


def build_pool(spans_per_sentence: Sequence[Sequence[EntitySpan]], h_f, h_b, detach: bool = True) -> CandidatePool:
    """Stack boundary states of every span in scope.

    ``h_f`` and ``h_b`` are ``B x T x d`` (tensors or arrays) indexed by the
    spans' ``sent`` field. Rows follow sentence order, then span order. With
    ``detach`` the rows are plain values outside the gradient graph.
    """
    hf = h_f if isinstance(h_f, Tensor) else Tensor(h_f)
    hb = h_b if isinstance(h_b, Tensor) else Tensor(h_b)
    spans = [sp for group in spans_per_sentence for sp in group]
    dim = hf.shape[-1]
    if not spans:
        return CandidatePool.empty(dim, hf.data.dtype)
    sent = np.array([sp.sent for sp in spans])
    beg = np.array([sp.begin for sp in spans])
    end = np.array([sp.end for sp in spans])
    if detach:
        rows = (hf.data[sent, beg], hb.data[sent, beg], hf.data[sent, end], hb.data[sent, end])
        return CandidatePool(*(Tensor(r.copy()) for r in rows), spans=spans)
    return CandidatePool(
        _index(hf, (sent, beg)), _index(hb, (sent, beg)), _index(hf, (sent, end)), _index(hb, (sent, end)),
        spans=spans,
    )


def update_pool(old: CandidatePool | None, tags_per_sentence: Sequence[Sequence[str]], h_f, h_b,
                detach: bool = True) -> CandidatePool:
    """Rebuild from the newest predictions; ``old`` is discarded, never merged."""
    del old
    spans = [extract_spans(tags, sent=i) for i, tags in enumerate(tags_per_sentence)]
    return build_pool(spans, h_f, h_b, detach=detach)


def dump_pool(pool: CandidatePool, sentences: Sequence[Sequence[str]], path=None) -> str:
    """Text listing: one block per row with span text, type and the four vectors."""
    lines = []
    names = ("fc", "eb", "ee", "bc")
    for k, sp in enumerate(pool.spans):
        text = " ".join(sentences[sp.sent][sp.begin : sp.end + 1])
        lines.append(f"# row {k} sent={sp.sent} span={sp.begin}-{sp.end} type={sp.etype} text={text}")
        for name, m in zip(names, pool.matrices()):
            lines.append(name + " " + " ".join(f"{v:.6g}" for v in m.data[k]))
    out = "\n".join(lines) + ("\n" if lines else "")
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(out)
    return out
