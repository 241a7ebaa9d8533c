"""Corpus readers, tokenization, POS tagging and vocabulary handling."""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

from .fileio import DataError, atomic_open, open_text

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, MASK = 0, 1, 2, 3, 4
SPECIAL_TOKENS = ("[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]")
NUM_SPECIAL = len(SPECIAL_TOKENS)
DEFAULT_MAX_LEN = 128

_TAG_RE = re.compile(r"<[^>]*>")
_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, drop ``<...>`` tags, split off punctuation, split on whitespace."""
    if not text:
        return []
    return _TOKEN_RE.findall(_TAG_RE.sub(" ", text.lower()))


@dataclass
class Document:
    doc_id: str
    kind: str  # "product" | "review"
    title: list[str] = field(default_factory=list)
    description: list[str] = field(default_factory=list)
    body: list[str] = field(default_factory=list)
    product_id: str | None = None

    def content_tokens(self) -> list[str]:
        """Tokens fed to the encoder; product fields are joined as ``title [SEP] description``."""
        if self.kind == "product":
            if self.description:
                return self.title + ["[SEP]"] + self.description
            return list(self.title)
        return list(self.body)

    def text_fields(self) -> list[list[str]]:
        if self.kind == "product":
            return [f for f in (self.title, self.description) if f]
        return [self.body] if self.body else []


@dataclass
class Corpus:
    documents: list[Document]
    skipped: int = 0
    path: str | None = None

    def __len__(self):
        return len(self.documents)

    def __iter__(self):
        return iter(self.documents)

    def by_id(self) -> dict[str, Document]:
        return {d.doc_id: d for d in self.documents}


def _split_tsv(line, path, lineno, ncols):
    parts = line.rstrip("\n").split("\t")
    if len(parts) < ncols - 1:
        raise DataError(f"{path}:{lineno}: expected {ncols} tab-separated fields, got {len(parts)}")
    while len(parts) < ncols:
        parts.append("")
    if len(parts) > ncols:
        parts = parts[: ncols - 1] + [" ".join(parts[ncols - 1:])]
    return parts


def read_products(path) -> Corpus:
    """``product_id<TAB>title<TAB>description`` per line."""
    docs, skipped = [], 0
    with open_text(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            pid, title, desc = _split_tsv(line, path, lineno, 3)
            doc = Document(pid.strip(), "product", tokenize(title), tokenize(desc))
            if not doc.title and not doc.description:
                skipped += 1
                continue
            docs.append(doc)
    if skipped:
        logger.info("%s: skipped %d empty lines", path, skipped)
    return Corpus(docs, skipped, str(path))


def read_reviews(path) -> Corpus:
    """``review_id<TAB>product_id<TAB>text`` per line."""
    docs, skipped = [], 0
    with open_text(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rid, pid, text = _split_tsv(line, path, lineno, 3)
            doc = Document(rid.strip(), "review", body=tokenize(text), product_id=pid.strip())
            if not doc.body:
                skipped += 1
                continue
            docs.append(doc)
    return Corpus(docs, skipped, str(path))


def read_text(path) -> Corpus:
    """Plain text, one document per line."""
    docs, skipped = [], 0
    with open_text(path) as fh:
        for lineno, line in enumerate(fh, 1):
            toks = tokenize(line)
            if not toks:
                skipped += 1
                continue
            docs.append(Document(f"{path}:{lineno}", "review", body=toks))
    return Corpus(docs, skipped, str(path))


READERS = {"product": read_products, "review": read_reviews, "text": read_text}


def read_corpus(path, kind: str = "text") -> Corpus:
    try:
        reader = READERS[kind]
    except KeyError:
        raise ValueError(f"unknown corpus kind {kind!r}") from None
    return reader(path)


# ---------------------------------------------------------------------------
# vocabulary


class Vocabulary:
    def __init__(self, tokens: Sequence[str] = ()):
        self.itos: list[str] = list(SPECIAL_TOKENS)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            if t in self.stoi:
                raise ValueError(f"duplicate vocabulary token {t!r}")
            self.stoi[t] = len(self.itos)
            self.itos.append(t)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    def token(self, idx: int) -> str:
        return self.itos[idx]

    def save(self, path):
        with atomic_open(path) as fh:
            for t in self.itos:
                fh.write(t + "\n")

    def to_text(self) -> str:
        return "".join(t + "\n" for t in self.itos)

    @classmethod
    def from_lines(cls, lines: Iterable[str], source="<vocab>") -> "Vocabulary":
        tokens = [ln.rstrip("\n") for ln in lines]
        tokens = [t for t in tokens if t]
        if tuple(tokens[:NUM_SPECIAL]) != SPECIAL_TOKENS:
            raise DataError(f"{source}: vocabulary must start with {', '.join(SPECIAL_TOKENS)}")
        return cls(tokens[NUM_SPECIAL:])

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open_text(path) as fh:
            return cls.from_lines(fh, str(path))


def count_tokens(corpora: Iterable[Corpus]) -> Counter:
    counts: Counter = Counter()
    for corpus in corpora:
        for doc in corpus:
            for f in doc.text_fields():
                counts.update(f)
    return counts


def build_vocab(paths, min_freq: int = 1, max_size: int = 8192) -> Vocabulary:
    """Build a vocabulary from corpus files.

    ``paths`` holds plain paths (read as one document per line) or
    ``(path, kind)`` pairs with kind in ``product``/``review``/``text``.
    Tokens with count >= ``min_freq`` are ranked by count (descending) then
    token (ascending) and truncated to ``max_size - 5`` after the specials.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    if max_size <= NUM_SPECIAL:
        raise ValueError(f"max_size must exceed {NUM_SPECIAL}")
    corpora = []
    for p in paths:
        path, kind = (p if isinstance(p, tuple) else (p, "text"))
        corpora.append(read_corpus(path, kind))
    return vocab_from_counts(count_tokens(corpora), min_freq, max_size)


def vocab_from_counts(counts: Counter, min_freq: int = 1, max_size: int = 8192) -> Vocabulary:
    kept = [(t, c) for t, c in counts.items() if c >= min_freq and t not in SPECIAL_TOKENS]
    kept.sort(key=lambda tc: (-tc[1], tc[0]))
    return Vocabulary([t for t, _ in kept[: max_size - NUM_SPECIAL]])


def encode(tokens: Sequence[str], vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN) -> list[int]:
    """``[CLS] tokens [SEP]``, OOV to ``[UNK]``, truncated to ``max_len``."""
    if max_len < 2:
        raise ValueError("max_len must be >= 2")
    body = [vocab.id(t) for t in tokens[: max_len - 2]]
    return [CLS] + body + [SEP]


def decode(ids: Sequence[int], vocab: Vocabulary) -> list[str]:
    ids = list(ids)
    if ids and ids[0] == CLS:
        ids = ids[1:]
    if ids and ids[-1] == SEP:
        ids = ids[:-1]
    return [vocab.token(i) for i in ids if i != PAD]


# ---------------------------------------------------------------------------
# POS tagging: lexicon lookup, suffix rules, NOUN default

_LEXICON_SRC = {
    "DET": "a an the this that these those each every some any no all both another",
    "ADP": "of in on at for with by from to into onto over under about after before "
    "between through during without within against among per via than like",
    "CONJ": "and or but nor so yet plus",
    "PRON": "i you he she it we they me him her us them my your his its our their "
    "mine yours which who whom what whose there here",
    "VERB": "is are was were be been being am has have had do does did get gets got "
    "make makes made use uses used fit fits work works works bought buy love loved "
    "recommend can could will would should may might must",
    "ADV": "very not too also just only really well quite so even still never always "
    "again highly easily",
    "ADJ": "new good great best better small large big high low light heavy red blue "
    "black white green grey gray pink silver gold soft hard cheap fast slow long "
    "short wide thin thick durable portable wireless waterproof compact premium "
    "classic vintage elegant perfect nice excellent old easy strong bright dark "
    "quick full half digital electric automatic manual mini extra super",
    "NUM": "one two three four five six seven eight nine ten hundred",
}
DEFAULT_LEXICON = {w: tag for tag, words in _LEXICON_SRC.items() for w in words.split()}

_ADJ_SUFFIXES = ("ous", "ful", "able", "ible", "ive", "less", "ic", "ish")


class PosTagger:
    """Most-frequent-tag lexicon with suffix fallbacks; unknown words are NOUN."""

    def __init__(self, lexicon: dict[str, str] | None = None):
        self.lexicon = dict(DEFAULT_LEXICON)
        if lexicon:
            self.lexicon.update(lexicon)

    @classmethod
    def from_file(cls, path) -> "PosTagger":
        lex = {}
        with open_text(path) as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip() or line.startswith("#"):
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 2:
                    raise DataError(f"{path}:{lineno}: expected token<TAB>TAG")
                lex[parts[0].lower()] = parts[1].upper()
        return cls(lex)

    def tag_token(self, tok: str) -> str:
        if tok in SPECIAL_TOKENS:
            return "X"
        if tok in self.lexicon:
            return self.lexicon[tok]
        if not any(ch.isalnum() for ch in tok):
            return "PUNCT"
        if tok.isdigit() or tok.replace(".", "", 1).isdigit():
            return "NUM"
        if tok.endswith("ly") and len(tok) > 4:
            return "ADV"
        if tok.endswith("ed") and len(tok) > 4:
            return "VERB"
        if tok.endswith(_ADJ_SUFFIXES) and len(tok) > 5:
            return "ADJ"
        return "NOUN"

    def tag(self, tokens: Sequence[str]) -> list[str]:
        return [self.tag_token(t) for t in tokens]


# ---------------------------------------------------------------------------
# sequences


@dataclass
class TokenSequence:
    ids: list[int]
    surface: list[str]
    pos: list[str] | None = None
    doc_id: str | None = None
    kind: str | None = None

    def __post_init__(self):
        if len(self.ids) != len(self.surface):
            raise ValueError("ids and surface forms must have equal length")
        if self.pos is not None and len(self.pos) != len(self.ids):
            raise ValueError("POS tags must align with tokens")

    def __len__(self):
        return len(self.ids)


def make_sequence(tokens: Sequence[str], vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN,
                  tagger: PosTagger | None = None, doc_id=None, kind=None) -> TokenSequence:
    """Encode ``tokens`` and keep aligned surface forms (and tags) for the encoded ids."""
    ids = [CLS] + [SEP if t == "[SEP]" else vocab.id(t) for t in tokens[: max_len - 2]] + [SEP]
    surface = ["[CLS]"] + list(tokens[: max_len - 2]) + ["[SEP]"]
    pos = tagger.tag(surface) if tagger is not None else None
    return TokenSequence(ids, surface, pos, doc_id, kind)


def document_sequences(corpus: Corpus, vocab: Vocabulary, max_len: int = DEFAULT_MAX_LEN,
                       tagger: PosTagger | None = None) -> Iterator[TokenSequence]:
    for doc in corpus:
        yield make_sequence(doc.content_tokens(), vocab, max_len, tagger, doc.doc_id, doc.kind)
