"""Corpus ingestion, cleaning, stratified splitting and size statistics."""

from __future__ import annotations

import json
import logging
import random
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

from .languages import LANG_TAGS, SHORT_LABELS, UnknownLanguageError, canonical

log = logging.getLogger(__name__)

GAP = "[gap]"
LACUNA_MARKERS = ("---", "...", "<gap>")
_LACUNA_RE = re.compile("|".join(re.escape(m) for m in sorted(LACUNA_MARKERS, key=len, reverse=True)))
# English: words (with inner apostrophes) and single punctuation marks
_ENGLISH_RE = re.compile(r"\w+(?:['’]\w+)*|[^\w\s]")


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CleanSentence:
    lang: str
    tokens: tuple[str, ...]
    translation: tuple[str, ...] = ()
    upos: tuple[str, ...] | None = None
    doc_id: str = ""

    def __post_init__(self):
        if self.upos is not None and len(self.upos) != len(self.tokens):
            raise CorpusError(
                f"record {self.doc_id or '<unnamed>'}: {len(self.upos)} UPOS tags for {len(self.tokens)} tokens"
            )

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def to_record(self) -> dict:
        rec = {"lang": self.lang, "text": self.text, "translation": " ".join(self.translation)}
        if self.upos is not None:
            rec["upos"] = list(self.upos)
        if self.doc_id:
            rec["doc_id"] = self.doc_id
        return rec


def replace_lacunae(text: str) -> str:
    """Turn every lacuna marker occurrence into a standalone ``[gap]`` token."""
    return _LACUNA_RE.sub(f" {GAP} ", text)


def tokenize_english(text: str) -> tuple[str, ...]:
    return tuple(_ENGLISH_RE.findall(text))


def clean_sentence(raw_text, lang, translation="", upos=None, doc_id="", languages=None):
    """Clean one attested sentence.

    Lacuna markers (``---``, ``...``, ``<gap>``) become one ``[gap]`` each; the
    period, suffix sign and hyphen stay part of their words.  ``translation``
    may be a string or an already tokenized sequence.
    """
    lang = canonical(lang, languages)
    if raw_text is None or not str(raw_text).strip():
        raise CorpusError(f"record {doc_id or '<unnamed>'}: empty text")
    tokens = tuple(replace_lacunae(str(raw_text)).split())
    if isinstance(translation, str):
        trans = tokenize_english(translation)
    else:
        trans = tuple(translation or ())
    if upos is not None:
        upos = tuple(upos)
        if len(upos) != len(tokens):
            raise CorpusError(
                f"record {doc_id or '<unnamed>'}: {len(upos)} UPOS tags for {len(tokens)} tokens"
            )
    return CleanSentence(lang=lang, tokens=tokens, translation=trans, upos=upos, doc_id=str(doc_id or ""))


# ---------------------------------------------------------------------------
# loading / writing
# ---------------------------------------------------------------------------

class LoadError(NamedTuple):
    line: int
    message: str


class LoadResult(NamedTuple):
    sentences: list
    errors: list


def parse_record(rec: dict, languages=None, default_id="") -> CleanSentence:
    if not isinstance(rec, dict):
        raise CorpusError("record is not an object")
    missing = [k for k in ("lang", "text") if k not in rec]
    if missing:
        raise CorpusError(f"missing field(s): {', '.join(missing)}")
    return clean_sentence(
        rec["text"],
        rec["lang"],
        rec.get("translation", "") or "",
        rec.get("upos"),
        rec.get("doc_id", default_id) or default_id,
        languages=languages,
    )


def load_corpus(path, languages=None) -> LoadResult:
    """Read a line-delimited JSON corpus.

    Malformed lines do not abort loading; they are returned in ``errors`` as
    ``(line number, message)``.  Raises :class:`CorpusError` when the file
    cannot be read or holds no valid record.
    """
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    sentences, errors = [], []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            sentences.append(parse_record(rec, languages, default_id=f"{path.stem}:{lineno}"))
        except (json.JSONDecodeError, CorpusError, UnknownLanguageError, TypeError) as exc:
            errors.append(LoadError(lineno, str(exc)))
    for err in errors:
        log.warning("%s:%d: %s", path, err.line, err.message)
    if not sentences:
        raise CorpusError(f"no valid records in {path}")
    return LoadResult(sentences, errors)


def write_corpus(sentences: Iterable[CleanSentence], path, extra: Sequence[dict] | None = None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for i, sent in enumerate(sentences):
            rec = sent.to_record()
            if extra is not None:
                rec.update(extra[i])
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def _split_sizes(n, ratios):
    n_val = max(1, round(n * ratios[1]))
    n_test = max(1, round(n * ratios[2]))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise CorpusError(f"stratum of {n} sentences is too small to split")
    return n_train, n_val, n_test


def _stable_key(item):
    idx, s = item
    return (s.doc_id, s.text, " ".join(s.translation), idx)


def split_corpus(corpus: Sequence[CleanSentence], ratios=(0.8, 0.1, 0.1), seed: int = 0):
    """Deterministic per-language stratified train/val/test split.

    Within each language the sentences are sorted by a stable key and then
    shuffled with a seed-derived generator, so the result depends only on the
    corpus content, the ratios and the seed.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-6:
        raise ValueError(f"ratios must be three positive numbers summing to 1, got {ratios}")
    by_lang = defaultdict(list)
    for idx, s in enumerate(corpus):
        by_lang[s.lang].append((idx, s))
    parts = ([], [], [])
    for lang in sorted(by_lang):
        items = by_lang[lang]
        if len(items) < 3:
            raise CorpusError(f"language {lang} has {len(items)} sentences; at least 3 are needed")
        items = sorted(items, key=_stable_key)
        random.Random(f"{seed}:{lang}").shuffle(items)
        n_train, n_val, _ = _split_sizes(len(items), ratios)
        bounds = (0, n_train, n_train + n_val, len(items))
        for k in range(3):
            parts[k].extend(items[bounds[k]:bounds[k + 1]])
    # restore corpus order inside each part
    return tuple([s for _, s in sorted(part, key=lambda it: it[0])] for part in parts)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

@dataclass
class CorpusStats:
    langs: list
    sentences: dict
    tokens: dict
    labels: dict = field(default_factory=dict)

    @property
    def total_sentences(self):
        return sum(self.sentences.values())

    @property
    def total_tokens(self):
        return sum(self.tokens.values())

    def sentence_pct(self, lang):
        total = self.total_sentences
        return 100.0 * self.sentences[lang] / total if total else 0.0

    def token_pct(self, lang):
        total = self.total_tokens
        return 100.0 * self.tokens[lang] / total if total else 0.0

    def rows(self):
        """Table rows ``(Lang, Sentences, Sent%, Tokens, Tok%)`` plus a TOTAL row."""
        out = []
        for lang in self.langs:
            out.append((self.labels.get(lang, lang), self.sentences[lang], self.sentence_pct(lang),
                        self.tokens[lang], self.token_pct(lang)))
        total_s = 100.0 if self.total_sentences else 0.0
        total_t = 100.0 if self.total_tokens else 0.0
        out.append(("TOTAL", self.total_sentences, total_s, self.total_tokens, total_t))
        return out

    def to_tsv(self) -> str:
        """Delimited table in the column order Lang, Sentences, Sent%, Tokens, Tok%.

        Percentages are whole numbers rounded by largest remainder, so each
        column adds up to exactly 100.
        """
        sent_pct = rounded_percentages([self.sentences[lang] for lang in self.langs])
        tok_pct = rounded_percentages([self.tokens[lang] for lang in self.langs])
        lines = ["Lang\tSentences\tSent%\tTokens\tTok%"]
        for i, lang in enumerate(self.langs):
            lines.append(f"{self.labels.get(lang, lang)}\t{self.sentences[lang]}\t{sent_pct[i]}%"
                         f"\t{self.tokens[lang]}\t{tok_pct[i]}%")
        lines.append(f"TOTAL\t{self.total_sentences}\t{sum(sent_pct)}%\t{self.total_tokens}\t{sum(tok_pct)}%")
        return "\n".join(lines) + "\n"


def rounded_percentages(counts) -> list:
    """Integer percentages that sum to 100 (largest-remainder rounding)."""
    total = sum(counts)
    if total == 0:
        return [0] * len(counts)
    raw = [100.0 * c / total for c in counts]
    floors = [int(r) for r in raw]
    short = 100 - sum(floors)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - floors[i]), i))
    for i in order[:short]:
        floors[i] += 1
    return floors


def corpus_stats(corpus: Sequence[CleanSentence], tokenizer, languages=None) -> CorpusStats:
    """Sentence and subword counts per language.

    Tokens are counted by encoding each sentence's words with the shared
    tokenizer; special, language-tag and separator tokens are not counted.
    """
    languages = LANG_TAGS if languages is None else languages
    langs = list(languages)
    sentences = {lang: 0 for lang in langs}
    tokens = {lang: 0 for lang in langs}
    for s in corpus:
        if s.lang not in sentences:
            langs.append(s.lang)
            sentences[s.lang] = tokens[s.lang] = 0
        sentences[s.lang] += 1
        tokens[s.lang] += tokenizer.count_tokens(s.tokens)
    labels = {lang: SHORT_LABELS.get(lang, lang) for lang in langs}
    return CorpusStats(langs, sentences, tokens, labels)
