"""Deterministic twin-language corpus with cipher cognates.

Two languages share one concept inventory and one English gloss per concept.
Words of the first language are consonant skeletons in transliteration
letters; the second language spells each concept through a fixed letter
cipher into the Coptic alphabet, adds vowels and reverses word order.  The
two scripts share no characters, so only the English side can tie the
languages together.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import CleanSentence, write_corpus

CONSONANTS = ("p", "b", "f", "m", "n", "r", "h", "ḥ", "ḫ", "s", "š", "q", "k", "g", "t", "ṯ", "d", "ḏ")
CIPHER = {
    "p": "ⲡ", "b": "ⲃ", "f": "ϥ", "m": "ⲙ", "n": "ⲛ", "r": "ⲣ", "h": "ϩ", "ḥ": "ⲫ", "ḫ": "ϧ",
    "s": "ⲥ", "š": "ϣ", "q": "ⲭ", "k": "ⲕ", "g": "ⲅ", "t": "ⲧ", "ṯ": "ⲑ", "d": "ⲇ", "ḏ": "ϫ",
}
COPTIC_VOWELS = ("ⲁ", "ⲉ", "ⲟ", "ⲓ", "ⲏ", "ⲱ")
POS_CYCLE = ("NOUN", "VERB", "ADJ", "NOUN", "PRON", "NOUN", "VERB", "ADV")


@dataclass(frozen=True)
class Concept:
    cid: str
    english: str
    word_a: str
    word_b: str
    upos: str


@dataclass
class TwinCorpus:
    concepts: list
    sentences: list
    lang_a: str
    lang_b: str

    def cognate_records(self, n: int | None = None, seed: int = 0) -> list:
        """Cognate-file rows, one per concept (optionally a seeded subset)."""
        concepts = self.concepts
        if n is not None and n < len(concepts):
            idx = np.sort(np.random.default_rng(seed).choice(len(concepts), size=n, replace=False))
            concepts = [concepts[i] for i in idx]
        return [{"lang1": self.lang_a, "word1": c.word_a, "lang2": self.lang_b, "word2": c.word_b,
                 "source_concept_id": c.cid} for c in concepts]

    def dictionary_records(self) -> list:
        rows = []
        for c in self.concepts:
            rows.append({"lang": self.lang_a, "word": c.word_a, "english": c.english})
            rows.append({"lang": self.lang_b, "word": c.word_b, "english": c.english})
        return rows

    def write(self, out_dir, n_cognates: int | None = 50, seed: int = 0) -> dict:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {"corpus": out / "corpus.jsonl", "cognates": out / "cognates.jsonl",
                 "dictionary": out / "dictionary.jsonl"}
        write_corpus(self.sentences, paths["corpus"])
        _write_jsonl(paths["cognates"], self.cognate_records(n_cognates, seed))
        _write_jsonl(paths["dictionary"], self.dictionary_records())
        return paths


def _write_jsonl(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        for r in rows:
            fh.write(json.dumps(r, ensure_ascii=False) + "\n")


def cipher_word(word: str) -> str:
    """Encipher a consonant skeleton; the vowel after each letter depends on
    the letter and its position, so the mapping is deterministic."""
    out = []
    for i, ch in enumerate(word):
        out.append(CIPHER[ch])
        out.append(COPTIC_VOWELS[(CONSONANTS.index(ch) + i) % len(COPTIC_VOWELS)])
    return "".join(out)


def _gloss(i: int) -> str:
    syll = ("ka", "lo", "mi", "ru", "te", "vo", "si", "na", "pe", "du")
    return syll[i % 10] + syll[(i // 10) % 10] + ("" if i < 100 else syll[(i // 100) % 10])


def make_twin_corpus(n_sentences: int = 500, n_concepts: int = 60, seed: int = 0,
                     lang_a: str = "hieroglyphic", lang_b: str = "sahidic",
                     min_len: int = 3, max_len: int = 7) -> TwinCorpus:
    """Generate ``n_sentences`` concept sequences rendered in both languages.

    Concepts fall into a handful of topics and a sentence draws mostly from
    one topic, which gives each language its own co-occurrence structure.
    English glosses are pseudo-words so no real-language prior leaks in.
    """
    rng = np.random.default_rng(seed)
    seen, concepts = set(), []
    while len(concepts) < n_concepts:
        k = int(rng.integers(2, 5))
        w = "".join(CONSONANTS[j] for j in rng.integers(len(CONSONANTS), size=k))
        if w in seen:
            continue
        seen.add(w)
        i = len(concepts)
        concepts.append(Concept(f"c{i:03d}", _gloss(i), w, cipher_word(w), POS_CYCLE[i % len(POS_CYCLE)]))

    n_topics = max(1, n_concepts // 10)
    topic_of = rng.integers(n_topics, size=n_concepts)
    members = [np.flatnonzero(topic_of == t) for t in range(n_topics)]
    sentences = []
    for s in range(n_sentences):
        length = int(rng.integers(min_len, max_len + 1))
        topic = int(rng.integers(n_topics))
        picks = []
        for _ in range(length):
            pool = members[topic] if len(members[topic]) and rng.random() < 0.8 else np.arange(n_concepts)
            picks.append(concepts[int(rng.choice(pool))])
        english = " ".join(c.english for c in picks)
        sentences.append(CleanSentence(lang_a, tuple(c.word_a for c in picks), tuple(english.split()),
                                       tuple(c.upos for c in picks), f"syn{s:04d}a"))
        rev = picks[::-1]
        sentences.append(CleanSentence(lang_b, tuple(c.word_b for c in rev), tuple(english.split()),
                                       tuple(c.upos for c in rev), f"syn{s:04d}b"))
    return TwinCorpus(concepts, sentences, lang_a, lang_b)
