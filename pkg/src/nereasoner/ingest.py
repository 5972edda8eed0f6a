"""Corpus reading, tag-scheme conversion, vocabularies, embeddings and batching."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PAD, UNK = 0, 1
PAD_TOKEN, UNK_TOKEN = "<pad>", "<unk>"
DOCSTART = "-DOCSTART-"
_DIGITS = re.compile(r"\d")


class ConllParseError(ValueError):
    pass


@dataclass
class Sentence:
    tokens: list[str]
    gold_tags: list[str] | None = None
    doc_id: int = 0

    def __post_init__(self):
        if not self.tokens:
            raise ValueError("sentence has no tokens")
        if self.gold_tags is not None and len(self.gold_tags) != len(self.tokens):
            raise ValueError(f"{len(self.tokens)} tokens but {len(self.gold_tags)} tags")

    def __len__(self):
        return len(self.tokens)


@dataclass(frozen=True)
class ColumnSpec:
    """Which whitespace-separated columns hold the token and the tag.

    ``tag=None`` reads unlabelled text. Negative indices count from the end.
    """

    token: int = 0
    tag: int | None = -1
    min_columns: int = 1


CONLL2003 = ColumnSpec(token=0, tag=3, min_columns=4)


def read_conll(path, column_spec: ColumnSpec = ColumnSpec()) -> list[Sentence]:
    sentences: list[Sentence] = []
    doc_id = 0
    seen_docstart = False
    tokens: list[str] = []
    tags: list[str] = []

    def flush():
        if tokens:
            sentences.append(Sentence(list(tokens), list(tags) if column_spec.tag is not None else None, doc_id))
            tokens.clear()
            tags.clear()

    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            cols = line.split()
            if not cols:
                flush()
                continue
            if cols[0] == DOCSTART:
                flush()
                if seen_docstart or sentences:
                    doc_id += 1
                seen_docstart = True
                continue
            if len(cols) < column_spec.min_columns:
                raise ConllParseError(f"{path}:{lineno}: expected >= {column_spec.min_columns} columns, got {len(cols)}")
            try:
                tokens.append(cols[column_spec.token])
                if column_spec.tag is not None:
                    tags.append(cols[column_spec.tag])
            except IndexError:
                raise ConllParseError(f"{path}:{lineno}: missing token/tag column") from None
    flush()
    return sentences


def count_documents(path) -> int:
    with open(path, encoding="utf-8") as fh:
        return sum(1 for line in fh if line.split()[:1] == [DOCSTART])


def write_conll(path, rows: Iterable[Sequence[Sequence[str]]]) -> None:
    """``rows`` yields sentences, each a list of per-token column lists."""
    with open(path, "w", encoding="utf-8") as fh:
        for sent in rows:
            for cols in sent:
                fh.write(" ".join(cols) + "\n")
            fh.write("\n")


# --------------------------------------------------------------------------
# tag schemes


def _split(tag: str) -> tuple[str, str | None]:
    if tag == "O":
        return "O", None
    if len(tag) < 3 or tag[1] != "-":
        raise ValueError(f"malformed tag {tag!r}")
    return tag[0], tag[2:]


def to_bmeos(raw_tags: Sequence[str]) -> list[str]:
    """IOB1 or IOB2 to BMEOS.

    A run opens at ``B-X`` or at an ``I-X`` not continuing an ``X`` run, which
    covers both IOB variants without detecting which one is in use.
    """
    runs: list[tuple[int, int, str]] = []
    start = None
    cur = None
    for i, tag in enumerate(raw_tags):
        prefix, etype = _split(tag)
        if prefix not in ("B", "I", "O"):
            raise ValueError(f"not an IOB tag: {tag!r}")
        if prefix == "I" and cur is not None and etype != cur:
            logger.warning("type switch %s -> %s inside a run at token %d; splitting", cur, etype, i)
        if prefix == "O" or prefix == "B" or etype != cur:
            if cur is not None:
                runs.append((start, i - 1, cur))
            start, cur = (i, etype) if prefix != "O" else (None, None)
    if cur is not None:
        runs.append((start, len(raw_tags) - 1, cur))
    return spans_to_tags([(b, e, t) for b, e, t in runs], len(raw_tags))


def from_bmeos(tags: Sequence[str]) -> list[str]:
    """BMEOS to IOB2."""
    out = []
    for tag in tags:
        prefix, etype = _split(tag)
        if prefix == "O":
            out.append("O")
        elif prefix in ("B", "S"):
            out.append(f"B-{etype}")
        elif prefix in ("M", "E"):
            out.append(f"I-{etype}")
        else:
            raise ValueError(f"not a BMEOS tag: {tag!r}")
    return out


def spans_to_tags(spans: Iterable[tuple[int, int, str]], n: int) -> list[str]:
    tags = ["O"] * n
    for b, e, t in spans:
        if b == e:
            tags[b] = f"S-{t}"
        else:
            tags[b] = f"B-{t}"
            for k in range(b + 1, e):
                tags[k] = f"M-{t}"
            tags[e] = f"E-{t}"
    return tags


def is_bmeos(tags: Iterable[str]) -> bool:
    """True when the column uses BMEOS prefixes (any M/E/S, or nothing but O)."""
    prefixes = {t[0] for t in tags if t != "O"}
    if not prefixes:
        return True
    return bool(prefixes & {"M", "E", "S"}) and not (prefixes & {"I"})


def normalize_tags(tags: Sequence[str]) -> list[str]:
    return list(tags) if is_bmeos(tags) else to_bmeos(tags)


class TagSet:
    """``O`` plus ``{B,M,E,S}-type`` for each entity type; ``O`` is id 0."""

    def __init__(self, entity_types: Iterable[str]):
        self.entity_types = sorted(set(entity_types))
        self.tags = ["O"] + [f"{p}-{t}" for t in self.entity_types for p in "BMES"]
        self.index = {t: i for i, t in enumerate(self.tags)}

    @classmethod
    def from_sentences(cls, sentences: Iterable[Sentence]) -> "TagSet":
        types = set()
        for s in sentences:
            for tag in s.gold_tags or ():
                if tag != "O":
                    types.add(_split(tag)[1])
        return cls(types)

    def __len__(self):
        return len(self.tags)

    def encode(self, tags: Sequence[str]) -> list[int]:
        try:
            return [self.index[t] for t in tags]
        except KeyError as exc:
            raise ValueError(f"tag {exc.args[0]!r} not in tag set") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tags[i] for i in ids]


# --------------------------------------------------------------------------
# vocabularies and embeddings


def normalize_word(word: str) -> str:
    return _DIGITS.sub("0", word)


class Vocab:
    """Token/id bijection with ``PAD=0`` and ``UNK=1``.

    Lookup tries the digit-normalized token, then its lowercase form, then UNK.
    """

    def __init__(self, entries: Iterable[str] = ()):
        self.itos = [PAD_TOKEN, UNK_TOKEN]
        self.stoi = {PAD_TOKEN: PAD, UNK_TOKEN: UNK}
        for e in entries:
            self.add(e)

    def add(self, entry: str) -> int:
        if entry not in self.stoi:
            self.stoi[entry] = len(self.itos)
            self.itos.append(entry)
        return self.stoi[entry]

    def __len__(self):
        return len(self.itos)

    def __contains__(self, entry):
        return entry in self.stoi

    def lookup(self, token: str) -> int:
        w = normalize_word(token)
        i = self.stoi.get(w)
        if i is None:
            i = self.stoi.get(w.lower(), UNK)
        return i

    @classmethod
    def for_words(cls, sentences: Iterable[Sentence], min_count: int = 1) -> "Vocab":
        counts: dict[str, int] = {}
        for s in sentences:
            for tok in s.tokens:
                w = normalize_word(tok)
                counts[w] = counts.get(w, 0) + 1
        return cls(w for w, c in counts.items() if c >= min_count)

    @classmethod
    def for_chars(cls, sentences: Iterable[Sentence]) -> "Vocab":
        v = cls()
        for s in sentences:
            for tok in s.tokens:
                for ch in tok:
                    v.add(ch)
        return v

    def lookup_char(self, ch: str) -> int:
        return self.stoi.get(ch, UNK)


def read_embedding_file(path, dim: int) -> dict[str, np.ndarray]:
    vectors: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip().split(" ")
            if len(parts) == 1 and not parts[0]:
                continue
            if len(parts) != dim + 1:
                raise ConllParseError(f"{path}:{lineno}: expected {dim} values, got {len(parts) - 1}")
            try:
                vectors.setdefault(parts[0], np.array([float(x) for x in parts[1:]]))
            except ValueError:
                raise ConllParseError(f"{path}:{lineno}: non-numeric value") from None
    return vectors


def extend_vocab(vocab: Vocab, vectors: dict[str, np.ndarray], sentences: Iterable[Sentence]) -> int:
    """Add words of ``sentences`` that the embedding file covers; returns how many were added."""
    lower = {k.lower() for k in vectors}
    added = 0
    for s in sentences:
        for tok in s.tokens:
            w = normalize_word(tok)
            if vocab.lookup(w) == UNK and (w in vectors or w.lower() in lower):
                vocab.add(w)
                added += 1
    return added


@dataclass
class EmbeddingStats:
    found: int
    total: int

    @property
    def coverage(self) -> float:
        return self.found / self.total if self.total else 0.0


def embedding_matrix(vectors: dict[str, np.ndarray], vocab: Vocab, dim: int, rng: np.random.Generator):
    """Rows for in-vocabulary tokens copied from ``vectors``; others uniform in [-0.25, 0.25]."""
    lower: dict[str, np.ndarray] = {}
    for k, v in vectors.items():
        lower.setdefault(k.lower(), v)
    mat = rng.uniform(-0.25, 0.25, size=(len(vocab), dim))
    found = 0
    for i, tok in enumerate(vocab.itos):
        if i in (PAD, UNK):
            continue
        vec = vectors.get(tok)
        if vec is None:
            vec = lower.get(tok.lower())
        if vec is not None:
            mat[i] = vec
            found += 1
    mat[PAD] = 0.0
    stats = EmbeddingStats(found, len(vocab) - 2)
    logger.info("embedding coverage %d/%d (%.2f%%)", stats.found, stats.total, 100 * stats.coverage)
    return mat, stats


def load_embeddings(path, vocab: Vocab, dim: int, rng: np.random.Generator | None = None):
    """Read a text embedding file into a trainable ``|V| x dim`` tensor."""
    from .numerics import Tensor

    rng = rng if rng is not None else np.random.default_rng(0)
    mat, stats = embedding_matrix(read_embedding_file(path, dim), vocab, dim, rng)
    return Tensor(mat, requires_grad=True, name="word_emb"), stats


# --------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    sentences: list[Sentence]
    word_ids: np.ndarray  # B x T
    char_ids: np.ndarray  # B x T x L
    char_lengths: np.ndarray  # B x T, 0 at PAD positions
    mask: np.ndarray  # B x T bool
    tag_ids: np.ndarray | None  # B x T, O at PAD positions
    indices: list[int] = field(default_factory=list)  # positions in the source list

    @property
    def size(self) -> int:
        return len(self.sentences)

    @property
    def lengths(self) -> list[int]:
        return [len(s) for s in self.sentences]


def encode_batch(sentences: Sequence[Sentence], vocab: Vocab, chars: Vocab, tagset: TagSet | None,
                 indices: Sequence[int] | None = None, min_word_len: int = 3) -> Batch:
    B = len(sentences)
    T = max(len(s) for s in sentences)
    L = max(min_word_len, max(len(tok) for s in sentences for tok in s.tokens))
    word_ids = np.zeros((B, T), dtype=np.int64)
    char_ids = np.zeros((B, T, L), dtype=np.int64)
    char_lengths = np.zeros((B, T), dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    have_tags = tagset is not None and all(s.gold_tags is not None for s in sentences)
    tag_ids = np.zeros((B, T), dtype=np.int64) if have_tags else None
    for b, s in enumerate(sentences):
        n = len(s)
        mask[b, :n] = True
        for t, tok in enumerate(s.tokens):
            word_ids[b, t] = vocab.lookup(tok)
            char_lengths[b, t] = len(tok)
            for k, ch in enumerate(tok):
                char_ids[b, t, k] = chars.lookup_char(ch)
        if have_tags:
            tag_ids[b, :n] = tagset.encode(normalize_tags(s.gold_tags))
    return Batch(list(sentences), word_ids, char_ids, char_lengths, mask, tag_ids,
                 list(indices) if indices is not None else list(range(B)))


def make_batches(sentences: Sequence[Sentence], batch_size: int, scope_policy: str = "mini-batch",
                 vocab: Vocab | None = None, chars: Vocab | None = None, tagset: TagSet | None = None,
                 shuffle_seed: int | None = None) -> list[Batch]:
    """Group sentences into batches; each batch is one candidate-pool scope.

    ``document`` never lets a batch cross a ``doc_id`` boundary. With
    ``shuffle_seed`` set, sentences (mini-batch) or batches (document) are
    permuted by a generator seeded from it.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = list(range(len(sentences)))
    groups: list[list[int]] = []
    if scope_policy == "mini-batch":
        if shuffle_seed is not None:
            order = list(np.random.default_rng(shuffle_seed).permutation(len(sentences)))
        groups = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]
    elif scope_policy == "document":
        cur: list[int] = []
        for i in order:
            if cur and (sentences[cur[-1]].doc_id != sentences[i].doc_id or len(cur) == batch_size):
                groups.append(cur)
                cur = []
            cur.append(i)
        if cur:
            groups.append(cur)
        if shuffle_seed is not None:
            perm = np.random.default_rng(shuffle_seed).permutation(len(groups))
            groups = [groups[k] for k in perm]
    else:
        raise ValueError(f"unknown scope policy {scope_policy!r}")
    vocab = vocab or Vocab.for_words(sentences)
    chars = chars or Vocab.for_chars(sentences)
    return [encode_batch([sentences[i] for i in g], vocab, chars, tagset, indices=[int(i) for i in g]) for g in groups]
