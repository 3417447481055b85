"""Language identifiers, input tags and branch membership."""

from __future__ import annotations

LANG_TAGS: dict[str, str] = {
    "hieroglyphic": "<hiero>",
    "demotic": "<dem>",
    "sahidic": "<sah>",
    "bohairic": "<boh>",
}
ENGLISH = "english"
ENGLISH_TAG = "<eng>"

BRANCHES: dict[str, str] = {
    "hieroglyphic": "pre-coptic",
    "demotic": "pre-coptic",
    "sahidic": "coptic",
    "bohairic": "coptic",
}

# short codes as used in tables and on the command line
ALIASES: dict[str, str] = {
    "h": "hieroglyphic",
    "hiero": "hieroglyphic",
    "d": "demotic",
    "dem": "demotic",
    "s": "sahidic",
    "sah": "sahidic",
    "b": "bohairic",
    "boh": "bohairic",
    "e": ENGLISH,
    "eng": ENGLISH,
    "en": ENGLISH,
}

# row labels used in the corpus statistics table
SHORT_LABELS: dict[str, str] = {
    "hieroglyphic": "H",
    "demotic": "D",
    "sahidic": "S",
    "bohairic": "B",
}


class UnknownLanguageError(ValueError):
    def __init__(self, lang):
        super().__init__(f"unknown language id: {lang!r}")
        self.lang = lang


def canonical(lang: str, languages=None, allow_english=False) -> str:
    """Resolve an alias to a canonical language id, checking membership."""
    languages = LANG_TAGS if languages is None else languages
    key = str(lang).strip().lower()
    key = ALIASES.get(key, key)
    if key == ENGLISH and allow_english:
        return key
    if key not in languages:
        raise UnknownLanguageError(lang)
    return key


def tag_for(lang: str, languages=None) -> str:
    languages = LANG_TAGS if languages is None else languages
    if lang == ENGLISH:
        return ENGLISH_TAG
    return languages[lang]


def branch_of(lang: str, branches=None) -> str:
    branches = BRANCHES if branches is None else branches
    return branches[lang]
