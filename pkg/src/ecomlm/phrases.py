"""Domain phrase pool: mining, filtering, TSV import/export, matching, noun chunks."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

from .fileio import DataError, atomic_open, open_text
from .textcorpus import Corpus, TokenSequence, read_corpus, tokenize

MIN_PHRASE_LEN = 2
MAX_PHRASE_LEN = 6

# scorer coefficients: popularity (log count), concordance (npmi), completeness
COEF_POPULARITY = 0.3
COEF_CONCORDANCE = 2.0
COEF_COMPLETENESS = 1.0


@dataclass(frozen=True)
class PhraseEntry:
    tokens: tuple[str, ...]
    score: float

    def __post_init__(self):
        if not MIN_PHRASE_LEN <= len(self.tokens) <= MAX_PHRASE_LEN:
            raise ValueError(f"phrase must have {MIN_PHRASE_LEN}-{MAX_PHRASE_LEN} tokens: {self.tokens}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"phrase score must be in [0,1]: {self.score}")

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


class PhrasePool:
    """Scored phrase inventory keyed by token tuple."""

    def __init__(self, entries: Iterable[PhraseEntry] = ()):
        self._entries: dict[tuple[str, ...], float] = {}
        self._min_score = None
        self._trie = None
        for e in entries:
            self._add(e)

    def _add(self, entry: PhraseEntry):
        if entry.tokens in self._entries:
            raise ValueError(f"duplicate phrase {entry.text!r}")
        self._entries[entry.tokens] = entry.score
        self._min_score = None
        self._trie = None

    def add(self, tokens: Sequence[str], score: float):
        self._add(PhraseEntry(tuple(tokens), float(score)))

    def __len__(self):
        return len(self._entries)

    def __contains__(self, tokens):
        return tuple(tokens) in self._entries

    def __iter__(self):
        for toks, s in self._entries.items():
            yield PhraseEntry(toks, s)

    def score(self, tokens) -> float:
        return self._entries[tuple(tokens)]

    def phrases(self) -> set[tuple[str, ...]]:
        return set(self._entries)

    @property
    def min_score(self) -> float:
        if not self._entries:
            raise ValueError("empty phrase pool has no minimum score")
        if self._min_score is None:
            self._min_score = min(self._entries.values())
        return self._min_score

    @property
    def max_len(self) -> int:
        return max((len(t) for t in self._entries), default=0)

    def trie(self) -> dict:
        if self._trie is None:
            root: dict = {}
            for toks in self._entries:
                node = root
                for t in toks:
                    node = node.setdefault(t, {})
                node[None] = len(toks)
            self._trie = root
        return self._trie

    # TSV: "phrase tokens<TAB>score"

    def save(self, path):
        ranked = sorted(self._entries.items(), key=lambda kv: (-kv[1], kv[0]))
        with atomic_open(path) as fh:
            for toks, s in ranked:
                fh.write(f"{' '.join(toks)}\t{s:.6f}\n")

    @classmethod
    def load(cls, path) -> "PhrasePool":
        pool = cls()
        with open_text(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip() or line.startswith("#"):
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 2:
                    raise DataError(f"{path}:{lineno}: expected 'phrase<TAB>score'")
                try:
                    score = float(parts[1])
                except ValueError:
                    raise DataError(f"{path}:{lineno}: bad score {parts[1]!r}") from None
                if not 0.0 <= score <= 1.0:
                    raise DataError(f"{path}:{lineno}: score {score} outside [0,1]")
                toks = tuple(tokenize(parts[0]))
                if not MIN_PHRASE_LEN <= len(toks) <= MAX_PHRASE_LEN:
                    raise DataError(
                        f"{path}:{lineno}: phrase must have {MIN_PHRASE_LEN}-{MAX_PHRASE_LEN} tokens"
                    )
                if toks in pool:
                    # keep the best score for repeated phrases in external pools
                    if score > pool._entries[toks]:
                        pool._entries[toks] = score
                        pool._min_score = None
                    continue
                pool.add(toks, score)
        return pool


def filter_pool(pool: PhrasePool, threshold: float = 0.5) -> PhrasePool:
    """Keep entries with ``score >= threshold``."""
    return PhrasePool(e for e in pool if e.score >= threshold)


# ---------------------------------------------------------------------------
# mining


def _is_word(tok: str) -> bool:
    return any(ch.isalnum() for ch in tok)


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _count_ngrams(fields: Iterable[Sequence[str]], max_n: int):
    counts: Counter = Counter()
    total = 0
    for toks in fields:
        total += len(toks)
        n_tok = len(toks)
        for i in range(n_tok):
            if not _is_word(toks[i]):
                continue
            for n in range(1, max_n + 1):
                j = i + n
                if j > n_tok or not _is_word(toks[j - 1]):
                    break
                counts[tuple(toks[i:j])] += 1
    return counts, total


def _as_corpus(item) -> Corpus:
    if isinstance(item, Corpus):
        return item
    path, kind = item if isinstance(item, tuple) else (item, "text")
    return read_corpus(path, kind)


def mine_phrases(corpora: Sequence, max_len: int = MAX_PHRASE_LEN, min_count: int = 2) -> PhrasePool:
    """Score every 2..max_len word n-gram seen at least ``min_count`` times.

    ``corpora`` holds :class:`Corpus` objects, paths, or ``(path, kind)`` pairs.

    score = sigmoid(a*log(count) + b*npmi + c*completeness) where npmi is the
    best normalized PMI over binary splits and completeness is
    ``1 - max_ext_count / count`` over one-token left/right extensions.
    """
    if min_count < 2:
        raise ValueError("min_count must be >= 2")
    if not MIN_PHRASE_LEN <= max_len <= MAX_PHRASE_LEN:
        raise ValueError(f"max_len must be in [{MIN_PHRASE_LEN}, {MAX_PHRASE_LEN}]")
    corpora = [_as_corpus(c) for c in corpora]
    fields = [f for corpus in corpora for doc in corpus for f in doc.text_fields()]
    counts, total = _count_ngrams(fields, max_len + 1)
    ext: dict = {}
    for gram, c in counts.items():
        if len(gram) < 3:
            continue
        for sub in (gram[1:], gram[:-1]):
            if ext.get(sub, 0) < c:
                ext[sub] = c
    pool = PhrasePool()
    for gram, c in counts.items():
        if c < min_count or not MIN_PHRASE_LEN <= len(gram) <= max_len:
            continue
        pool.add(gram, _score(gram, c, counts, total, ext.get(gram, 0)))
    return pool


def _score(gram, count, counts, total, max_ext) -> float:
    p_xy = count / total
    best = -1.0
    for k in range(1, len(gram)):
        if p_xy >= 1.0:
            npmi = 1.0
        else:
            p_x = counts[gram[:k]] / total
            p_y = counts[gram[k:]] / total
            npmi = math.log(p_xy / (p_x * p_y)) / -math.log(p_xy)
        best = max(best, npmi)
    completeness = 1.0 - max_ext / count
    z = COEF_POPULARITY * math.log(count) + COEF_CONCORDANCE * best + COEF_COMPLETENESS * completeness
    return _sigmoid(z)


# ---------------------------------------------------------------------------
# matching


def match_phrases(seq: TokenSequence | Sequence[str], pool: PhrasePool) -> list[tuple[int, int]]:
    """Leftmost-longest, non-overlapping exact matches as ``[start, end)`` spans."""
    tokens = seq.surface if isinstance(seq, TokenSequence) else list(seq)
    trie = pool.trie()
    spans = []
    i, n = 0, len(tokens)
    while i < n:
        node = trie
        longest = 0
        j = i
        while j < n:
            node = node.get(tokens[j])
            if node is None:
                break
            j += 1
            if None in node:
                longest = j - i
        if longest:
            spans.append((i, i + longest))
            i += longest
        else:
            i += 1
    return spans


_CHUNK_ADJ = {"ADJ"}
_CHUNK_NOUN = {"NOUN", "PROPN"}


def chunk_noun_phrases(seq: TokenSequence) -> list[tuple[int, int]]:
    """Maximal ``ADJ* NOUN+`` spans of length >= 2."""
    if seq.pos is None:
        raise ValueError("sequence has no POS tags; run the tagger (textcorpus.PosTagger) first")
    tags = seq.pos
    n = len(tags)
    spans = []
    i = 0
    while i < n:
        if tags[i] not in _CHUNK_ADJ and tags[i] not in _CHUNK_NOUN:
            i += 1
            continue
        j = i
        while j < n and tags[j] in _CHUNK_ADJ:
            j += 1
        k = j
        while k < n and tags[k] in _CHUNK_NOUN:
            k += 1
        if k == j:
            # adjectives not followed by a noun; resume after them
            i = j
            continue
        if k - i >= 2:
            spans.append((i, k))
        i = k
    return spans


@dataclass(frozen=True)
class PoolSpan:
    start: int
    end: int
    score: float
    origin: str  # "domain" | "noun"

    def __len__(self):
        return self.end - self.start


def _overlaps(a, b) -> bool:
    return a[0] < b[1] and b[0] < a[1]


def build_temp_pool(seq: TokenSequence, pool: PhrasePool,
                    noun_spans: list[tuple[int, int]] | None = None) -> list[PoolSpan]:
    """Domain matches plus noun chunks that touch no domain match.

    Noun supplements carry the pool's minimum score.  Sequences without POS
    tags get no noun supplements unless ``noun_spans`` is given.
    """
    domain = match_phrases(seq, pool) if len(pool) else []
    out = [PoolSpan(s, e, pool.score(seq.surface[s:e]), "domain") for s, e in domain]
    if noun_spans is None:
        noun_spans = chunk_noun_phrases(seq) if seq.pos is not None else []
    if noun_spans and len(pool):
        low = pool.min_score
        for span in noun_spans:
            if not any(_overlaps(span, d) for d in domain):
                out.append(PoolSpan(span[0], span[1], low, "noun"))
    out.sort(key=lambda sp: sp.start)
    return out


def phrase_overlap(domain: Iterable, nouns: Iterable) -> float:
    """Fraction of domain phrases that also occur in the noun-phrase set."""
    dom = {tuple(p) if not isinstance(p, str) else tuple(p.split()) for p in domain}
    if not dom:
        raise ValueError("domain phrase set is empty")
    nps = {tuple(p) if not isinstance(p, str) else tuple(p.split()) for p in nouns}
    return len(dom & nps) / len(dom)


def collect_noun_phrases(sequences: Iterable[TokenSequence]) -> set[tuple[str, ...]]:
    found = set()
    for seq in sequences:
        for s, e in chunk_noun_phrases(seq):
            found.add(tuple(seq.surface[s:e]))
    return found


def load_phrase_set(path) -> set[tuple[str, ...]]:
    """One phrase per line; anything after a tab is ignored."""
    out = set()
    with open_text(path) as fh:
        for line in fh:
            text = line.split("\t", 1)[0].strip()
            if text and not text.startswith("#"):
                out.add(tuple(tokenize(text)))
    return out
