import json

from scriptalign.corpus import load_corpus
from scriptalign.evaluation import load_cognate_pairs, load_dictionary_pairs
from scriptalign.synthetic import CIPHER, CONSONANTS, cipher_word, make_twin_corpus


def test_cipher_is_injective_on_letters_and_disjoint_scripts():
    assert len(set(CIPHER.values())) == len(CONSONANTS)
    twin = make_twin_corpus(20, 30, seed=1)
    a_chars = {ch for c in twin.concepts for ch in c.word_a}
    b_chars = {ch for c in twin.concepts for ch in c.word_b}
    assert not a_chars & b_chars
    for c in twin.concepts:
        assert c.word_b == cipher_word(c.word_a)
        assert len(c.word_b) == 2 * len(c.word_a)


def test_twin_sentences_parallel():
    twin = make_twin_corpus(40, 20, seed=0)
    assert len(twin.sentences) == 80
    by_a = {c.word_a: c for c in twin.concepts}
    for a, b in zip(twin.sentences[::2], twin.sentences[1::2]):
        assert a.translation == b.translation
        assert [by_a[w].word_b for w in a.tokens][::-1] == list(b.tokens)
        assert a.lang == "hieroglyphic" and b.lang == "sahidic"


def test_deterministic():
    a, b = make_twin_corpus(30, 20, seed=3), make_twin_corpus(30, 20, seed=3)
    assert a.sentences == b.sentences and a.concepts == b.concepts
    assert make_twin_corpus(30, 20, seed=4).sentences != a.sentences


def test_write_roundtrip(tmp_path):
    twin = make_twin_corpus(30, 20, seed=0)
    paths = twin.write(tmp_path, n_cognates=12)
    res = load_corpus(paths["corpus"])
    assert not res.errors and res.sentences == twin.sentences
    cog = load_cognate_pairs(paths["cognates"])
    assert len(cog) == 12 and all(p.category == "Cross-Branch (Heterograph)" for p in cog)
    dic = load_dictionary_pairs(paths["dictionary"])
    assert len(dic) == 40
    rec = json.loads(paths["cognates"].read_text(encoding="utf-8").splitlines()[0])
    assert set(rec) == {"lang1", "word1", "lang2", "word2", "source_concept_id"}
