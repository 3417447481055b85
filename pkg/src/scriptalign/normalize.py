"""Word-aligned Latin and IPA-style views driven by grapheme rule tables."""

from __future__ import annotations

import re
import unicodedata
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .corpus import GAP, CleanSentence
from .languages import BRANCHES, ENGLISH

SCHEMES = ("latin", "ipa")
CONTEXTS = ("any", "between-consonants", "word-boundary")
SEPARATORS = ("⸗", "=", ".", "-")
VOWEL_CHARS = frozenset("aeiouəː")

_SEP_RE = re.compile("(" + "|".join(re.escape(s) for s in SEPARATORS) + ")")


class NormalizationError(ValueError):
    def __init__(self, message, grapheme=None, position=None, word_index=None):
        super().__init__(message)
        self.grapheme = grapheme
        self.position = position
        self.word_index = word_index


@dataclass(frozen=True)
class Rule:
    pattern: str
    context: str
    replacement: str


@dataclass
class RuleTable:
    """Ordered grapheme rules for one scheme.

    ``rows`` keeps the file order as ``(lang_selector, Rule)`` where the
    selector is a language id, a branch name or ``*``.
    """

    scheme: str
    rows: list = field(default_factory=list)
    branches: dict = field(default_factory=lambda: dict(BRANCHES))

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}")
        self._cache = {}

    def rules_for(self, lang: str) -> list:
        if lang not in self._cache:
            branch = self.branches.get(lang)
            self._cache[lang] = [r for sel, r in self.rows if sel in ("*", lang, branch)]
        return self._cache[lang]

    @classmethod
    def load(cls, path, scheme: str, branches=None) -> "RuleTable":
        text = Path(path).read_text(encoding="utf-8")
        return cls.parse(text, scheme, branches)

    @classmethod
    def default(cls, scheme: str, branches=None) -> "RuleTable":
        text = resources.files("scriptalign").joinpath("data/rules_default.tsv").read_text(encoding="utf-8")
        return cls.parse(text, scheme, branches)

    @classmethod
    def parse(cls, text: str, scheme: str, branches=None) -> "RuleTable":
        table = cls(scheme, branches=dict(branches or BRANCHES))
        header_seen = False
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.rstrip("\r\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            cols = line.split("\t")
            if not header_seen and cols[0] == "scheme":
                header_seen = True
                continue
            if len(cols) != 5:
                raise ValueError(f"rule table line {lineno}: expected 5 columns, got {len(cols)}")
            row_scheme, lang, pattern, context, replacement = cols
            if context not in CONTEXTS:
                raise ValueError(f"rule table line {lineno}: unknown context {context!r}")
            if not pattern:
                raise ValueError(f"rule table line {lineno}: empty pattern")
            if row_scheme == scheme:
                pattern = unicodedata.normalize("NFC", pattern)
                table.rows.append((lang, Rule(pattern, context, replacement)))
        table._cache = {}
        return table


def _is_vowel(text: str) -> bool:
    return bool(text) and all(c in VOWEL_CHARS for c in text)


def _segment(seg: str, rules: list, word: str, offset: int):
    """Split a separator-free segment into graphemes with their candidate rules."""
    units = []
    i = 0
    while i < len(seg):
        first = next((r for r in rules if seg.startswith(r.pattern, i)), None)
        if first is None:
            raise NormalizationError(
                f"no rule for grapheme {seg[i]!r} (U+{ord(seg[i]):04X}) at position {offset + i} in {word!r}",
                grapheme=seg[i], position=offset + i,
            )
        candidates = [r for r in rules if r.pattern == first.pattern]
        units.append(candidates)
        i += len(first.pattern)
    return units


def _resolve(units: list) -> list:
    """Pick one replacement per grapheme, honouring contexts."""
    defaults = []
    for cands in units:
        plain = next((r for r in cands if r.context == "any"), None)
        defaults.append(plain.replacement if plain is not None else None)

    def cls(k):
        rep = defaults[k]
        if rep is None or rep == "":
            return None
        return "V" if _is_vowel(rep) else "C"

    out = []
    n = len(units)
    for k, cands in enumerate(units):
        chosen = None
        for rule in cands:
            if rule.context == "any":
                chosen = rule
            elif rule.context == "word-boundary":
                if k == 0 or k == n - 1:
                    chosen = rule
            else:
                prev_k = next((j for j in range(k - 1, -1, -1) if cls(j) is not None), None)
                next_k = next((j for j in range(k + 1, n) if cls(j) is not None), None)
                if prev_k is not None and next_k is not None and cls(prev_k) == "C" and cls(next_k) == "C":
                    chosen = rule
            if chosen is not None:
                break
        if chosen is None:
            raise NormalizationError(f"no applicable rule for {cands[0].pattern!r}", grapheme=cands[0].pattern)
        out.append(chosen.replacement)
    return out


def _epenthesize(pieces: list) -> str:
    """Insert ``e`` between every pair of adjacent consonant units."""
    out = []
    prev_cons = False
    for p in pieces:
        if not p:
            continue
        cons = not _is_vowel(p)
        if cons and prev_cons:
            out.append("e")
        out.append(p)
        prev_cons = cons
    return "".join(out)


def _apply(word: str, lang: str, table: RuleTable, epenthesis: bool) -> str:
    if word == GAP:
        return word
    word = unicodedata.normalize("NFC", word)
    if table.branches.get(lang) == "coptic":
        word = word.lower()
    rules = table.rules_for(lang)
    out = []
    offset = 0
    for part in _SEP_RE.split(word):
        if not part:
            continue
        if part in SEPARATORS:
            sep = next((r for r in rules if r.pattern == part), None)
            out.append(sep.replacement if sep is not None else part)
        else:
            pieces = _resolve(_segment(part, rules, word, offset))
            out.append(_epenthesize(pieces) if epenthesis else "".join(pieces))
        offset += len(part)
    return "".join(out)


def normalize_latin(word: str, lang: str, table: RuleTable | None = None) -> str:
    """Map a word onto basic Latin letters (``⸗`` becomes ``=``)."""
    table = table or default_table("latin")
    if table.scheme != "latin":
        raise ValueError(f"expected a latin rule table, got {table.scheme!r}")
    return _apply(word, lang, table, epenthesis=False)


def normalize_ipa(word: str, lang: str, table: RuleTable | None = None) -> str:
    """Approximate phonemic rendering.

    Pre-Coptic words: weak consonants become vowels, ``w`` between two
    consonants becomes ``u`` and an ``e`` is inserted between any remaining
    adjacent consonants.  Coptic is mapped letter by letter.
    """
    table = table or default_table("ipa")
    if table.scheme != "ipa":
        raise ValueError(f"expected an ipa rule table, got {table.scheme!r}")
    if lang == ENGLISH:
        raise ValueError("English is not normalized")
    return _apply(word, lang, table, epenthesis=table.branches.get(lang) == "pre-coptic")


@dataclass(frozen=True)
class NormalizedView:
    scheme: str
    lang: str
    words: tuple
    translation: tuple = ()
    upos: tuple | None = None

    @property
    def tokens(self):
        return self.words


_DEFAULT_TABLES: dict = {}


def default_table(scheme: str) -> RuleTable:
    if scheme not in _DEFAULT_TABLES:
        _DEFAULT_TABLES[scheme] = RuleTable.default(scheme)
    return _DEFAULT_TABLES[scheme]


def normalize_word(word: str, lang: str, scheme: str, table: RuleTable | None = None) -> str:
    fn = normalize_latin if scheme == "latin" else normalize_ipa
    return fn(word, lang, table)


def normalize_sentence(sentence: CleanSentence, scheme: str, table: RuleTable | None = None) -> NormalizedView:
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    table = table or default_table(scheme)
    words = []
    for idx, w in enumerate(sentence.tokens):
        if w == GAP or all(c in SEPARATORS for c in w):
            words.append(w)
            continue
        try:
            words.append(normalize_word(w, sentence.lang, scheme, table))
        except NormalizationError as exc:
            raise NormalizationError(f"word {idx}: {exc}", exc.grapheme, exc.position, idx) from exc
    return NormalizedView(scheme, sentence.lang, tuple(words), sentence.translation, sentence.upos)
