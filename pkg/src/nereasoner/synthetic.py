"""Generated corpora for overfitting and for the cross-sentence consistency probe."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ingest import Sentence, Vocab

_LETTERS = "abcdefghijklmnopqrstuvwxyz"


def random_word(rng: np.random.Generator, lo: int = 4, hi: int = 7, capital: bool = True) -> str:
    n = int(rng.integers(lo, hi + 1))
    w = "".join(rng.choice(list(_LETTERS), size=n))
    return w.capitalize() if capital else w


def overfit_corpus(n_sentences: int = 50, n_types: int = 3, vocab_size: int = 120, seed: int = 0,
                   min_len: int = 5, max_len: int = 12) -> list[Sentence]:
    """Random sentences over a fixed vocabulary, entities drawn from per-type lexicons.

    Half of the vocabulary are entity words (split evenly by type), the rest
    context words. Tags are IOB2. Every vocabulary word is used at least once.
    """
    rng = np.random.default_rng(seed)
    types = ["PER", "LOC", "ORG", "MISC"][:n_types] if n_types <= 4 else [f"T{i}" for i in range(n_types)]
    words: list[str] = []
    seen = set()
    while len(words) < vocab_size:
        w = random_word(rng, 3, 8, capital=False)
        if w not in seen:
            seen.add(w)
            words.append(w)
    n_ent = vocab_size // 2
    lexicon = {t: words[i * n_ent // n_types : (i + 1) * n_ent // n_types] for i, t in enumerate(types)}
    context = words[n_ent:]
    unused = list(words)
    rng.shuffle(unused)

    sentences = []
    for _ in range(n_sentences):
        n = int(rng.integers(min_len, max_len + 1))
        tokens = [str(w) for w in rng.choice(context, size=n)]
        tags = ["O"] * n
        k = int(rng.integers(1, 4))
        for _ in range(k):
            t = types[int(rng.integers(len(types)))]
            length = int(rng.integers(1, 4))
            start = int(rng.integers(0, n - length + 1))
            if any(tags[j] != "O" for j in range(max(0, start - 1), min(n, start + length + 1))):
                continue
            for j in range(length):
                tokens[start + j] = str(rng.choice(lexicon[t]))
                tags[start + j] = ("B-" if j == 0 else "I-") + t
        sentences.append(Sentence(tokens, tags))
    # make sure every word occurs so the vocabulary has exactly vocab_size entries
    present = {w for s in sentences for w in s.tokens}
    for w in unused:
        if w in present:
            continue
        s = sentences[int(rng.integers(len(sentences)))]
        etype = next((t for t, lex in lexicon.items() if w in lex), None)
        s.tokens.append(w)
        s.gold_tags.append("B-" + etype if etype else "O")
        present.add(w)
    return sentences


DECISIVE = (
    "met the family of {} .",
    "the doctor {} visited us .",
    "we thanked mr {} yesterday .",
    "she called her friend {} today .",
)


@dataclass
class ConsistencyCorpus:
    train: list[Sentence]
    test: list[Sentence]
    vectors: dict[str, np.ndarray]
    train_names: set[str]
    test_names: set[str]

    def vocab(self) -> Vocab:
        v = Vocab()
        for w in sorted(self.vectors):
            v.add(w)
        return v

    def embedding_matrix(self, vocab: Vocab, dim: int) -> np.ndarray:
        m = np.zeros((len(vocab), dim))
        for w, i in vocab.stoi.items():
            if w in self.vectors:
                m[i] = self.vectors[w]
        return m

    def ambiguous_positions(self, sentences: list[Sentence]) -> list[tuple[int, int]]:
        """(sentence index, token index) of every name in an ambiguous context."""
        out = []
        for i, s in enumerate(sentences):
            if s.tokens[-3:] == ["arrived", "yesterday", "."]:
                out.extend((i, t) for t, g in enumerate(s.gold_tags) if g != "O")
        return out


def consistency_corpus(n_docs: int = 500, test_fraction: float = 0.2, seed: int = 0, dim: int = 50,
                       n_distractors: int = 2, vector_std: float = 1.0) -> ConsistencyCorpus:
    """Two-sentence documents sharing one person name.

    One sentence names the person in a decisive context ("met the family of X").
    The other lists the name among ``n_distractors`` non-entity words ("A , X
    and B arrived yesterday ."). Documents come in groups that share the very
    same listing sentence, each group member naming a different listed word, so
    that sentence on its own carries no information about which word is the
    person; only the other sentence of the document does. Words are fresh per
    group and all word vectors are random, so test names are never seen in
    training. Sentence order inside a document is random. ``vector_std`` is the
    per-component spread of the vectors; the default gives norms close to those
    of common pretrained 50-d embeddings.
    """
    rng = np.random.default_rng(seed)
    used: set[str] = set()

    def fresh():
        while True:
            w = random_word(rng)
            if w not in used:
                used.add(w)
                return w

    n_test = int(round(n_docs * test_fraction))
    k = n_distractors + 1
    splits: dict[str, list[Sentence]] = {"train": [], "test": []}
    names: dict[str, set[str]] = {"train": set(), "test": set()}
    d = 0
    while d < n_docs:
        split = "train" if d < n_docs - n_test else "test"
        words = [fresh() for _ in range(k)]
        amb_toks = []
        for j, w in enumerate(words):
            if j:
                amb_toks.append("and" if j == k - 1 else ",")
            amb_toks.append(w)
        amb_toks += ["arrived", "yesterday", "."]
        for name in rng.permutation(words):
            if d >= n_docs or (split == "train" and d >= n_docs - n_test):
                break
            name = str(name)
            template = DECISIVE[int(rng.integers(len(DECISIVE)))]
            toks = template.format(name).split()
            decisive = Sentence(toks, ["B-PER" if t == name else "O" for t in toks], doc_id=d)
            ambiguous = Sentence(list(amb_toks), ["B-PER" if t == name else "O" for t in amb_toks], doc_id=d)
            pair = [decisive, ambiguous] if rng.random() < 0.5 else [ambiguous, decisive]
            splits[split].extend(pair)
            names[split].add(name)
            d += 1
    words = sorted({w for s in splits["train"] + splits["test"] for w in s.tokens})
    vectors = {w: rng.normal(0.0, vector_std, size=dim) for w in words}
    return ConsistencyCorpus(splits["train"], splits["test"], vectors, names["train"], names["test"])
