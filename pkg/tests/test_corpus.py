import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scriptalign.corpus import (GAP, CleanSentence, CorpusError, clean_sentence, corpus_stats, load_corpus,
                                rounded_percentages, split_corpus, write_corpus)
from scriptalign.languages import UnknownLanguageError
from scriptalign.tokenizer import train_bpe


def test_lacuna_single_marker():
    s = clean_sentence("ḏd ⸗y --- n ⸗f", "hieroglyphic")
    assert s.tokens == ("ḏd", "⸗y", GAP, "n", "⸗f")


def test_no_lacuna_unchanged():
    assert clean_sentence("nfr sw", "hieroglyphic").tokens == ("nfr", "sw")


def test_one_gap_per_marker():
    s = clean_sentence("a <gap> ... b", "demotic")
    assert s.tokens == ("a", GAP, GAP, "b")


def test_adjacent_markers_expand():
    s = clean_sentence("x ------ y", "demotic")
    assert s.tokens == ("x", GAP, GAP, "y")


def test_separators_kept_in_tokens():
    s = clean_sentence("ꞽ.ꞽr-ḥr ⸗tn", "demotic")
    assert s.tokens == ("ꞽ.ꞽr-ḥr", "⸗tn")


def test_unknown_language_rejected():
    with pytest.raises(UnknownLanguageError, match="klingon"):
        clean_sentence("nfr", "klingon")


def test_upos_mismatch_names_record():
    with pytest.raises(CorpusError, match="rec-7"):
        clean_sentence("nfr sw", "hieroglyphic", upos=["ADJ"], doc_id="rec-7")


def test_empty_text_rejected():
    with pytest.raises(CorpusError):
        clean_sentence("   ", "sahidic")


def _marker_oracle(text):
    # count marker occurrences by a left-to-right regex scan, longest first
    return len(re.findall(r"---|\.\.\.|<gap>", text))


_pieces = st.lists(st.sampled_from(["nfr", "sw", "---", "...", "<gap>", "ḏd", "⸗f", "a.b", " ", "  "]),
                   min_size=1, max_size=12)


@given(_pieces)
@settings(max_examples=200, deadline=None)
def test_cleaning_properties(parts):
    text = " ".join(parts)
    if not text.strip():
        return
    s = clean_sentence(text, "demotic")
    assert s.tokens.count(GAP) == _marker_oracle(text)
    assert not any(m in t for t in s.tokens for m in ("---", "...", "<gap>"))
    again = clean_sentence(s.text, "demotic")
    assert again.tokens == s.tokens


def test_load_three_lines(fixtures):
    res = load_corpus(fixtures / "three.jsonl")
    assert len(res.sentences) == 3 and res.errors == []


def test_malformed_line_reported(fixtures):
    res = load_corpus(fixtures / "malformed.jsonl")
    assert len(res.sentences) == 3
    assert [e.line for e in res.errors] == [2]


def test_sahidic_sample_line(fixtures):
    res = load_corpus(fixtures / "three.jsonl")
    sah = [s for s in res.sentences if s.lang == "sahidic"][0]
    assert " ".join(sah.translation).startswith("in the day in which the Lord spoke")


def test_unreadable_and_empty(tmp_path):
    with pytest.raises(CorpusError):
        load_corpus(tmp_path / "missing.jsonl")
    p = tmp_path / "bad.jsonl"
    p.write_text("not json\n", encoding="utf-8")
    with pytest.raises(CorpusError):
        load_corpus(p)


def test_write_roundtrip(tmp_path, mini_corpus):
    write_corpus(mini_corpus, tmp_path / "c.jsonl")
    back = load_corpus(tmp_path / "c.jsonl").sentences
    assert [(s.lang, s.tokens, s.translation, s.upos) for s in back] == \
        [(s.lang, s.tokens, s.translation, s.upos) for s in mini_corpus]


def _toy(n, lang="hieroglyphic"):
    return [CleanSentence(lang, (f"w{i}",), doc_id=f"{lang}{i}") for i in range(n)]


def test_split_sizes_811():
    tr, va, te = split_corpus(_toy(10), (0.8, 0.1, 0.1), seed=7)
    assert (len(tr), len(va), len(te)) == (8, 1, 1)


def test_split_deterministic_and_disjoint():
    corpus = _toy(40) + _toy(25, "sahidic")
    a = split_corpus(corpus, seed=3)
    b = split_corpus(corpus, seed=3)
    assert a == b
    ids = [s.doc_id for part in a for s in part]
    assert sorted(ids) == sorted(s.doc_id for s in corpus)
    assert len(set(ids)) == len(ids)


def test_split_stratified():
    corpus = _toy(50) + _toy(50, "demotic")
    tr, va, te = split_corpus(corpus, seed=1)
    for lang in ("hieroglyphic", "demotic"):
        sizes = [sum(1 for s in part if s.lang == lang) for part in (tr, va, te)]
        assert abs(sizes[0] - 40) <= 1 and abs(sizes[1] - 5) <= 1 and abs(sizes[2] - 5) <= 1


def test_split_independent_of_input_order():
    corpus = _toy(30) + _toy(30, "bohairic")
    a = split_corpus(corpus, seed=5)
    b = split_corpus(list(reversed(corpus)), seed=5)
    assert [sorted(s.doc_id for s in p) for p in a] == [sorted(s.doc_id for s in p) for p in b]


def test_split_too_small():
    with pytest.raises(CorpusError):
        split_corpus(_toy(2), seed=0)


def test_split_bad_ratios():
    with pytest.raises(ValueError):
        split_corpus(_toy(10), (0.5, 0.1, 0.1), seed=0)


def test_rounded_percentages_sum():
    assert sum(rounded_percentages([1, 1, 1])) == 100
    assert rounded_percentages([0, 0]) == [0, 0]


def test_stats_toy_counts():
    tok = train_bpe(["ab ab ab"], 267 + 1)
    corpus = [CleanSentence("hieroglyphic", ("ab", "c", GAP))]
    stats = corpus_stats(corpus, tok)
    row = dict((r[0], r) for r in stats.rows())
    # " ab" -> [" ", "ab"], " c" -> [" ", "c"], [gap] excluded
    assert [tok.vocab[i] for i in tok.encode_word("ab")] == ["Ġ", "ab"]
    assert stats.tokens["hieroglyphic"] == 4
    assert "H" in row and "TOTAL" in row


def test_stats_empty_bucket_and_totals(mini_corpus, mini_tok):
    stats = corpus_stats([s for s in mini_corpus if s.lang != "bohairic"], mini_tok)
    assert stats.sentences["bohairic"] == 0 and stats.tokens["bohairic"] == 0
    tsv = stats.to_tsv().splitlines()
    assert tsv[0].split("\t") == ["Lang", "Sentences", "Sent%", "Tokens", "Tok%"]
    body = [line.split("\t") for line in tsv[1:-1]]
    total = tsv[-1].split("\t")
    assert total[0] == "TOTAL"
    assert sum(int(r[1]) for r in body) == int(total[1])
    assert sum(int(r[3]) for r in body) == int(total[3])
    assert sum(int(r[2].rstrip("%")) for r in body) == 100
    assert sum(int(r[4].rstrip("%")) for r in body) == 100


def test_stats_excludes_reserved(mini_tok):
    s = CleanSentence("demotic", (GAP, GAP))
    assert corpus_stats([s], mini_tok).tokens["demotic"] == 0
