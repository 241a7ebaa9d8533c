import pytest
from hypothesis import given
from hypothesis import strategies as st

from ecomlm.fileio import DataError
from ecomlm.textcorpus import (
    CLS,
    SEP,
    UNK,
    PosTagger,
    Vocabulary,
    build_vocab,
    decode,
    encode,
    make_sequence,
    read_products,
    read_reviews,
    tokenize,
)

text = st.text(alphabet=st.characters(codec="utf-8", exclude_categories=("Cs",)), max_size=60)


def test_tokenize_splits_punctuation_and_lowercases():
    assert tokenize("Great SSD-drive!") == ["great", "ssd", "-", "drive", "!"]


def test_tokenize_empty():
    assert tokenize("") == []


def test_tokenize_strips_markup_tags():
    assert tokenize("<b>Soft</b> case") == ["soft", "case"]


@given(text)
def test_tokenize_is_a_fixed_point_on_its_output(t):
    toks = tokenize(t)
    assert tokenize(" ".join(toks)) == toks


def _write(tmp_path, name, body):
    path = tmp_path / name
    path.write_text(body, encoding="utf-8")
    return str(path)


def test_build_vocab_min_freq(tmp_path):
    v = build_vocab([_write(tmp_path, "c.txt", "a a b\n")], min_freq=2)
    assert v.itos[5:] == ["a"]


def test_build_vocab_count_tie_broken_alphabetically(tmp_path):
    v = build_vocab([_write(tmp_path, "c.txt", "c b a\n")], min_freq=1, max_size=6)
    assert v.itos[5:] == ["a"]


def test_build_vocab_ranks_by_count_then_token(tmp_path):
    v = build_vocab([_write(tmp_path, "c.txt", "b b c a a d\n")])
    assert v.itos[5:] == ["a", "b", "c", "d"]


def test_build_vocab_empty_corpus_is_specials_only(tmp_path):
    v = build_vocab([_write(tmp_path, "c.txt", "")])
    assert v.itos == ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]


def test_build_vocab_unreadable_file_names_path(tmp_path):
    missing = str(tmp_path / "nope.txt")
    with pytest.raises(DataError, match="nope.txt"):
        build_vocab([missing])


def test_build_vocab_reads_typed_corpora(tmp_path):
    prod = _write(tmp_path, "p.tsv", "p1\tRed Kettle\tsteel kettle\n")
    rev = _write(tmp_path, "r.tsv", "r1\tp1\tlove it\n")
    v = build_vocab([(prod, "product"), (rev, "review")])
    assert v.itos[5] == "kettle" and "p1" not in v and "love" in v


def test_build_vocab_is_deterministic(tmp_path):
    path = _write(tmp_path, "c.txt", "z y x y z z w\nq r s\n")
    assert build_vocab([path]).itos == build_vocab([path]).itos


def test_vocab_file_roundtrip_and_special_ids(tmp_path):
    v = Vocabulary(["a", "b"])
    path = str(tmp_path / "v.txt")
    v.save(path)
    lines = open(path).read().splitlines()
    assert lines[:5] == ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    assert lines.index("b") == v.id("b") == 6
    assert Vocabulary.load(path).itos == v.itos


def test_vocab_file_must_start_with_specials(tmp_path):
    with pytest.raises(DataError):
        Vocabulary.load(_write(tmp_path, "v.txt", "a\nb\n"))


def test_encode_known_token():
    v = Vocabulary(["a"])
    assert encode(["a"], v) == [2, 5, 3]


def test_encode_unknown_token():
    assert encode(["zzz"], Vocabulary(["a"])) == [CLS, UNK, SEP]


def test_encode_truncates_keeping_cls_and_sep():
    v = Vocabulary(["a"])
    ids = encode(["a"] * 200, v, max_len=128)
    assert len(ids) == 128 and ids[0] == CLS and ids[-1] == SEP


words = st.lists(st.sampled_from(["w%d" % i for i in range(30)] + ["zz", "?"]), max_size=40)


@given(words, st.integers(3, 50))
def test_encode_ids_in_range(tokens, max_len):
    v = Vocabulary(["w%d" % i for i in range(20)])
    assert all(0 <= i < len(v) for i in encode(tokens, v, max_len))


@given(st.lists(st.sampled_from(["w%d" % i for i in range(20)]), max_size=30))
def test_decode_inverts_encode_in_vocab(tokens):
    v = Vocabulary(["w%d" % i for i in range(20)])
    assert decode(encode(tokens, v, 64), v) == tokens


def test_read_products_skips_lines_without_tokens(tmp_path):
    path = _write(tmp_path, "p.tsv", "p1\tKettle\tsteel\np2\t  \t \np3\t!!\t\n")
    corpus = read_products(path)
    assert [d.doc_id for d in corpus] == ["p1", "p3"]
    assert corpus.skipped == 1


def test_read_products_tolerates_missing_description(tmp_path):
    doc = next(iter(read_products(_write(tmp_path, "p.tsv", "p1\tonly title\n"))))
    assert doc.title == ["only", "title"] and doc.description == []


def test_read_products_rejects_wrong_column_count(tmp_path):
    path = _write(tmp_path, "p.tsv", "p1\tKettle\tsteel\np2-no-tabs\n")
    with pytest.raises(DataError, match=":2"):
        read_products(path)


def test_read_reviews_keeps_product_link(tmp_path):
    corpus = read_reviews(_write(tmp_path, "r.tsv", "r1\tp9\tWorks great.\n"))
    doc = next(iter(corpus))
    assert doc.product_id == "p9" and doc.body == ["works", "great", "."]
    assert doc.kind == "review"


def test_product_content_is_title_sep_description(tmp_path):
    doc = next(iter(read_products(_write(tmp_path, "p.tsv", "p1\tRed Kettle\tSteel body\n"))))
    assert doc.content_tokens() == ["red", "kettle", "[SEP]", "steel", "body"]
    seq = make_sequence(doc.content_tokens(), Vocabulary(["red"]), tagger=PosTagger())
    assert seq.ids[0] == CLS and seq.ids[3] == SEP and seq.ids[-1] == SEP
    assert len(seq.ids) == len(seq.surface) == len(seq.pos)


def test_tagger_lexicon_suffix_and_default():
    tagger = PosTagger()
    assert tagger.tag(["the", "waterproof", "hiking", "boots", ",", "[CLS]"]) == \
        ["DET", "ADJ", "NOUN", "NOUN", "PUNCT", "X"]
    assert tagger.tag_token("quickly") == "ADV"
    assert tagger.tag_token("washable") == "ADJ"


def test_tagger_from_file_overrides(tmp_path):
    tagger = PosTagger.from_file(_write(tmp_path, "lex.tsv", "hiking\tADJ\n"))
    assert tagger.tag_token("hiking") == "ADJ"


def test_sequence_truncation_respects_max_len():
    seq = make_sequence(["a"] * 50, Vocabulary(["a"]), max_len=10)
    assert len(seq) == 10
