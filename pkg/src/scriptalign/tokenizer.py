"""Shared byte-level BPE tokenizer and multitask input composition.

Text is split on whitespace boundaries first (a word keeps its leading space,
as in GPT-2), every piece is turned into UTF-8 bytes and the learned merges are
applied inside each piece.  All 256 bytes are in the vocabulary, so any string
can be encoded and decoding is lossless.
"""

from __future__ import annotations

import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .corpus import GAP
from .languages import ENGLISH, ENGLISH_TAG, LANG_TAGS

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIALS = (PAD, UNK, CLS, SEP, MASK, GAP)
DEFAULT_LANG_TAGS = tuple(LANG_TAGS.values()) + (ENGLISH_TAG,)
TASKS = ("mlm", "tlm", "trans", "pos")

UPOS_TAGS = (
    "ADJ", "ADP", "ADV", "AUX", "CCONJ", "DET", "INTJ", "NOUN", "NUM",
    "PART", "PRON", "PROPN", "PUNCT", "SCONJ", "SYM", "VERB", "X",
)
UPOS_INDEX = {t: i for i, t in enumerate(UPOS_TAGS)}
IGNORE_INDEX = -100

# lossless pre-segmentation: a word with at most one leading space, or whitespace runs
_PRETOKEN_RE = re.compile(r" ?\S+|\s+(?!\S)|\s+")


@lru_cache(maxsize=1)
def bytes_to_unicode() -> dict:
    """Printable stand-ins for the 256 byte values (the GPT-2 table)."""
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("¡"), ord("¬") + 1)) + list(range(ord("®"), ord("ÿ") + 1))
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return {b: chr(c) for b, c in zip(bs, cs)}


@lru_cache(maxsize=1)
def unicode_to_bytes() -> dict:
    return {c: b for b, c in bytes_to_unicode().items()}


class TokenizerError(ValueError):
    pass


@dataclass
class TokenSeq:
    ids: list
    strings: list
    word_spans: list = field(default_factory=list)

    def __len__(self):
        return len(self.ids)


@dataclass
class TaskInput:
    task: str
    input: TokenSeq
    target: TokenSeq | None = None
    pos_labels: list | None = None


class TokenizerModel:
    def __init__(self, vocab: Sequence[str], merges: Sequence[tuple], specials=SPECIALS,
                 lang_tags=DEFAULT_LANG_TAGS):
        self.specials = tuple(specials)
        self.lang_tags = tuple(lang_tags)
        self.vocab = list(vocab)
        self.merges = [tuple(m) for m in merges]
        reserved = self.specials + self.lang_tags
        if tuple(self.vocab[: len(reserved)]) != reserved:
            raise TokenizerError("vocabulary does not start with the reserved tokens")
        self.n_reserved = len(reserved)
        self.token_to_id = {t: i for i, t in enumerate(self.vocab)}
        if len(self.token_to_id) != len(self.vocab):
            raise TokenizerError("duplicate vocabulary entries")
        b2u = bytes_to_unicode()
        self._byte_ids = np.array([self.token_to_id[b2u[b]] for b in range(256)], dtype=np.int64)
        self._byte_of_id = {int(i): b for b, i in enumerate(self._byte_ids)}
        self._merge_rank = {}
        for rank, (a, b) in enumerate(self.merges):
            ia, ib = self.token_to_id[a], self.token_to_id[b]
            self._merge_rank[(ia, ib)] = (rank, self.token_to_id[a + b])
        atoms = sorted(reserved, key=len, reverse=True)
        self._atom_re = re.compile("(" + "|".join(re.escape(t) for t in atoms) + ")")
        self._cache = {}

    # -- ids -------------------------------------------------------------
    def __len__(self):
        return len(self.vocab)

    @property
    def vocab_size(self):
        return len(self.vocab)

    pad_id = property(lambda self: self.token_to_id[PAD])
    unk_id = property(lambda self: self.token_to_id[UNK])
    cls_id = property(lambda self: self.token_to_id[CLS])
    sep_id = property(lambda self: self.token_to_id[SEP])
    mask_id = property(lambda self: self.token_to_id[MASK])
    gap_id = property(lambda self: self.token_to_id[GAP])

    def tag_id(self, lang: str) -> int:
        tag = ENGLISH_TAG if lang == ENGLISH else LANG_TAGS.get(lang, lang)
        try:
            return self.token_to_id[tag]
        except KeyError:
            raise TokenizerError(f"no language tag for {lang!r}") from None

    def is_reserved(self, token_id: int) -> bool:
        """Specials (``[gap]`` included) and language tags."""
        return token_id < self.n_reserved

    def is_fallback(self, token_id: int) -> bool:
        """Single-byte token that is only part of a multi-byte character."""
        b = self._byte_of_id.get(int(token_id))
        return b is not None and b >= 0x80

    # -- encoding ----------------------------------------------------------
    def _bpe(self, piece: str) -> tuple:
        cached = self._cache.get(piece)
        if cached is not None:
            return cached
        ids = [int(self._byte_ids[b]) for b in piece.encode("utf-8")]
        while len(ids) > 1:
            best = None
            for k in range(len(ids) - 1):
                hit = self._merge_rank.get((ids[k], ids[k + 1]))
                if hit is not None and (best is None or hit[0] < best[0]):
                    best = (hit[0], ids[k], ids[k + 1], hit[1])
            if best is None:
                break
            _, a, b, new = best
            merged = []
            k = 0
            while k < len(ids):
                if k + 1 < len(ids) and ids[k] == a and ids[k + 1] == b:
                    merged.append(new)
                    k += 2
                else:
                    merged.append(ids[k])
                    k += 1
            ids = merged
        out = tuple(ids)
        if len(self._cache) < 200_000:
            self._cache[piece] = out
        return out

    def encode(self, text: str) -> TokenSeq:
        """Encode free text; reserved tokens written literally stay atomic."""
        ids, spans = [], []
        for chunk in self._atom_re.split(text):
            if not chunk:
                continue
            if chunk in self.token_to_id and self.token_to_id[chunk] < self.n_reserved:
                if chunk == GAP:
                    spans.append((len(ids), len(ids) + 1))
                ids.append(self.token_to_id[chunk])
                continue
            for piece in _PRETOKEN_RE.findall(chunk):
                sub = self._bpe(piece)
                if piece.strip():
                    spans.append((len(ids), len(ids) + len(sub)))
                ids.extend(sub)
        return TokenSeq(ids, [self.vocab[i] for i in ids], spans)

    def encode_word(self, word: str) -> tuple:
        """Ids for one whitespace-free word as it appears mid-sentence."""
        if word in self.token_to_id and self.token_to_id[word] < self.n_reserved:
            return (self.token_to_id[word],)
        return self._bpe(" " + word)

    def encode_words(self, words: Iterable[str]) -> TokenSeq:
        ids, spans = [], []
        for w in words:
            sub = self.encode_word(w)
            spans.append((len(ids), len(ids) + len(sub)))
            ids.extend(sub)
        return TokenSeq(ids, [self.vocab[i] for i in ids], spans)

    def count_tokens(self, words: Iterable[str]) -> int:
        """Subword count of a word sequence, reserved tokens excluded."""
        return sum(1 for w in words for i in self.encode_word(w) if not self.is_reserved(i))

    def decode(self, ids: Iterable[int], skip_reserved: bool = False) -> str:
        u2b = unicode_to_bytes()
        out, buf = [], bytearray()
        for i in ids:
            i = int(i)
            if i < self.n_reserved:
                if skip_reserved and self.is_reserved(i):
                    continue
                out.append(buf.decode("utf-8", errors="replace"))
                buf = bytearray()
                out.append(self.vocab[i])
            else:
                buf.extend(u2b[c] for c in self.vocab[i])
        out.append(buf.decode("utf-8", errors="replace"))
        return "".join(out)

    # -- persistence -------------------------------------------------------
    def manifest(self) -> dict:
        return {
            "specials": list(self.specials),
            "lang_tags": list(self.lang_tags),
            "vocab_size": len(self.vocab),
            "n_merges": len(self.merges),
            "hash": self.hash,
        }

    @property
    def hash(self) -> str:
        h = hashlib.sha256()
        for part in (self.specials, self.lang_tags, self.vocab):
            h.update("\n".join(part).encode("utf-8"))
            h.update(b"\x00")
        h.update("\n".join(f"{a} {b}" for a, b in self.merges).encode("utf-8"))
        return h.hexdigest()

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / "vocab.txt").write_text("\n".join(self.vocab) + "\n", encoding="utf-8")
        (d / "merges.txt").write_text("".join(f"{a} {b}\n" for a, b in self.merges), encoding="utf-8")
        (d / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, ensure_ascii=False) + "\n",
                                         encoding="utf-8")
        return d

    @classmethod
    def load(cls, directory) -> "TokenizerModel":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text(encoding="utf-8"))
        vocab = (d / "vocab.txt").read_text(encoding="utf-8").split("\n")[:-1]
        merges = [tuple(line.split(" ")) for line in (d / "merges.txt").read_text(encoding="utf-8").splitlines()]
        tok = cls(vocab, merges, manifest["specials"], manifest["lang_tags"])
        if manifest.get("hash") and manifest["hash"] != tok.hash:
            raise TokenizerError(f"tokenizer files in {d} do not match their manifest hash")
        return tok

    # -- task inputs -------------------------------------------------------
    def build_task_input(self, task: str, sentence, max_len: int | None = None) -> TaskInput:
        return build_task_input(task, sentence, self, max_len)


def pretokenize(text: str, atoms: Sequence[str] = ()) -> list:
    """Whitespace pre-segmentation; reserved ``atoms`` are removed."""
    if atoms:
        pattern = re.compile("|".join(re.escape(a) for a in sorted(atoms, key=len, reverse=True)))
        chunks = pattern.split(text)
    else:
        chunks = [text]
    out = []
    for chunk in chunks:
        out.extend(_PRETOKEN_RE.findall(chunk))
    return out


def train_bpe(texts: Iterable[str], vocab_size: int, min_freq: int = 2, specials=SPECIALS,
              lang_tags=DEFAULT_LANG_TAGS) -> TokenizerModel:
    """Learn byte-level BPE merges.

    Pair counts are weighted by pre-token frequency; the most frequent pair is
    merged (ties go to the smallest ``(left id, right id)``) until the
    vocabulary reaches ``vocab_size`` or no pair occurs ``min_freq`` times.
    """
    specials, lang_tags = tuple(specials), tuple(lang_tags)
    n_base = len(specials) + len(lang_tags) + 256
    if vocab_size < n_base:
        raise TokenizerError(f"vocab_size {vocab_size} is below the {n_base} mandatory tokens")
    counts = Counter()
    n_texts = 0
    for t in texts:
        n_texts += 1
        counts.update(pretokenize(t, specials + lang_tags))
    if n_texts == 0:
        raise TokenizerError("empty training corpus")

    b2u = bytes_to_unicode()
    vocab = list(specials) + list(lang_tags) + [b2u[b] for b in range(256)]
    index = {t: i for i, t in enumerate(vocab)}
    merges = []
    offset = len(specials) + len(lang_tags)

    words = list(counts)
    freqs = np.array([counts[w] for w in words], dtype=np.int64)
    encoded = [np.frombuffer(w.encode("utf-8"), dtype=np.uint8).astype(np.int64) + offset for w in words]
    if encoded:
        ids = np.concatenate(encoded)
        word_ids = np.repeat(np.arange(len(words), dtype=np.int64), [e.size for e in encoded])
    else:
        ids = word_ids = np.empty(0, np.int64)

    while len(vocab) < vocab_size:
        codes, pair_counts = _kernels.bpe_pair_counts(ids, word_ids, freqs, vocab_size)
        if codes.size == 0:
            break
        k = int(np.argmax(pair_counts))
        if pair_counts[k] < min_freq:
            break
        left, right = divmod(int(codes[k]), vocab_size)
        merged = vocab[left] + vocab[right]
        # two merge paths can spell the same string; reuse its id
        new_id = index.get(merged)
        if new_id is None:
            new_id = index[merged] = len(vocab)
            vocab.append(merged)
        merges.append((vocab[left], vocab[right]))
        ids, word_ids = _kernels.bpe_apply_merge(ids, word_ids, left, right, new_id)

    return TokenizerModel(vocab, merges, specials, lang_tags)


# ---------------------------------------------------------------------------
# multitask inputs
# ---------------------------------------------------------------------------

def _fit_words(tok, words, budget):
    """Encode words, dropping trailing ones that do not fit in ``budget`` ids."""
    seq = tok.encode_words(words)
    if budget is None or len(seq.ids) <= budget:
        return seq
    keep = [k for k, (s, e) in enumerate(seq.word_spans) if e <= budget]
    return tok.encode_words(list(words)[: len(keep)])


def _shift(seq: TokenSeq, offset: int) -> list:
    return [(s + offset, e + offset) for s, e in seq.word_spans]


def build_task_input(task: str, sentence, tok: TokenizerModel, max_len: int | None = None) -> TaskInput:
    """Compose the encoder (and decoder) sequences for one task.

    mlm          ``[CLS] <lang> w1 .. wn [SEP]``
    tlm          ``[CLS] <lang> w1 .. wn [SEP] <eng> e1 .. em [SEP]``
    trans        encoder as mlm, decoder target ``<eng> e1 .. em [SEP]``
    pos          as mlm, with UPOS ids on the first subword of each word

    ``sentence`` is a CleanSentence or a NormalizedView.  ``word_spans`` of
    the returned input refer to positions in the full sequence.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    words = sentence.tokens
    translation = tuple(getattr(sentence, "translation", ()) or ())
    if task in ("tlm", "trans") and not translation:
        raise TokenizerError(f"task {task} needs a translation")
    upos = getattr(sentence, "upos", None)
    if task == "pos" and upos is None:
        raise TokenizerError("task pos needs UPOS tags")

    head = [tok.cls_id, tok.tag_id(sentence.lang)]
    budget = None if max_len is None else max_len - 3

    if task == "tlm":
        src_budget = trg_budget = None
        if budget is not None:
            n_src = len(tok.encode_words(words).ids)
            n_trg = len(tok.encode_words(translation).ids)
            avail = budget - 2
            if n_src + n_trg > avail:
                trg_budget = max(avail // 2, avail - n_src)
                src_budget = avail - min(n_trg, trg_budget)
        src = _fit_words(tok, words, src_budget)
        trg = _fit_words(tok, translation, trg_budget)
        ids = head + src.ids + [tok.sep_id, tok.tag_id(ENGLISH)] + trg.ids + [tok.sep_id]
        spans = _shift(src, 2)
        return TaskInput(task, TokenSeq(ids, [tok.vocab[i] for i in ids], spans))

    src = _fit_words(tok, words, budget)
    ids = head + src.ids + [tok.sep_id]
    seq = TokenSeq(ids, [tok.vocab[i] for i in ids], _shift(src, 2))
    if task == "mlm":
        return TaskInput(task, seq)
    if task == "trans":
        trg = _fit_words(tok, translation, None if max_len is None else max_len - 2)
        tids = [tok.tag_id(ENGLISH)] + trg.ids + [tok.sep_id]
        return TaskInput(task, seq, target=TokenSeq(tids, [tok.vocab[i] for i in tids], _shift(trg, 1)))
    labels = [IGNORE_INDEX] * len(ids)
    for (s, _e), tag in zip(seq.word_spans, upos):
        labels[s] = UPOS_INDEX.get(tag, UPOS_INDEX["X"])
    return TaskInput(task, seq, pos_labels=labels)


# ---------------------------------------------------------------------------
# fragmentation diagnostics
# ---------------------------------------------------------------------------

@dataclass
class ViewFragmentation:
    name: str
    length: int
    ratio: float
    fallback: int


@dataclass
class FragmentationStats:
    views: list

    def __getitem__(self, name):
        return next(v for v in self.views if v.name == name)

    def to_tsv(self) -> str:
        lines = ["view\tlength\tratio\tfallback"]
        lines += [f"{v.name}\t{v.length}\t{v.ratio:.4f}\t{v.fallback}" for v in self.views]
        return "\n".join(lines) + "\n"


def fragmentation_report(original: TokenSeq, views, tok: TokenizerModel | None = None,
                         names: Sequence[str] | None = None) -> FragmentationStats:
    """Length, expansion ratio against the original, and byte-fallback count per view."""
    views = list(views)
    names = list(names) if names is not None else [f"view{k}" for k in range(1, len(views) + 1)]

    def fallback(seq):
        return 0 if tok is None else sum(1 for i in seq.ids if tok.is_fallback(i))

    base = len(original.ids)
    out = [ViewFragmentation("original", base, 1.0, fallback(original))]
    for name, v in zip(names, views):
        ratio = len(v.ids) / base if base else 0.0
        out.append(ViewFragmentation(name, len(v.ids), ratio, fallback(v)))
    return FragmentationStats(out)
