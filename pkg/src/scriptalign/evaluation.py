"""Word embeddings, pair curation and alignment metrics (triplet accuracy, ROC-AUC)."""

from __future__ import annotations

import csv
import io
import json
import logging
import zlib
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import _kernels
from .languages import BRANCHES, ENGLISH, canonical
from .tokenizer import TokenizerModel, build_task_input

log = logging.getLogger(__name__)

INTRA = "Intra-Egyptian"
EGY_ENG = "Egyptian-English"


class EvaluationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# embeddings
# ---------------------------------------------------------------------------

@dataclass
class WordEmbeddingTable:
    """Unit-norm word vectors keyed by ``(lang, word)`` with occurrence counts."""

    keys: list
    vectors: np.ndarray
    counts: np.ndarray
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {k: i for i, k in enumerate(self.keys)}

    def __contains__(self, key):
        return key in self._index

    def __len__(self):
        return len(self.keys)

    def get(self, lang, word):
        i = self._index.get((lang, word))
        return None if i is None else self.vectors[i]

    def count(self, lang, word) -> int:
        i = self._index.get((lang, word))
        return 0 if i is None else int(self.counts[i])

    def words(self, lang) -> list:
        return sorted(w for l, w in self.keys if l == lang)

    @property
    def languages(self) -> list:
        return sorted({l for l, _ in self.keys})

    def similarity(self, a, b) -> float:
        return float(np.dot(self.vectors[self._index[a]], self.vectors[self._index[b]]))

    @classmethod
    def from_vectors(cls, mapping: dict, counts: dict | None = None) -> "WordEmbeddingTable":
        """Build a table from raw vectors (normalised here)."""
        keys = sorted(mapping)
        vecs = np.array([np.asarray(mapping[k], dtype=np.float64) for k in keys])
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        vecs = vecs / np.where(norms == 0, 1.0, norms)
        cnt = np.array([(counts or {}).get(k, 1) for k in keys], dtype=np.int64)
        return cls(keys, vecs, cnt)


@torch.no_grad()
def extract_word_embeddings(model, tok: TokenizerModel, sentences, min_freq: int = 1, seed: int = 0,
                            include_english: bool = False, batch_size: int = 64,
                            max_len: int | None = None) -> WordEmbeddingTable:
    """Mean-pool subword states per occurrence, then average over occurrences.

    Encoder inputs are the unmasked ``[CLS] <lang> words [SEP]`` sequences;
    English words come from ``[CLS] <eng> translation [SEP]``.  Vectors are L2
    normalised; words seen fewer than ``min_freq`` times are dropped.
    """
    torch.manual_seed(seed)
    model.eval()
    max_len = max_len or model.config.max_len
    items = []
    for s in sentences:
        inp = build_task_input("mlm", s, tok, max_len).input
        items.append((s.lang, s.tokens, inp))
        if include_english and s.translation:
            eng = _EnglishView(s.translation)
            items.append((ENGLISH, eng.tokens, build_task_input("mlm", eng, tok, max_len).input))
    if not items:
        raise EvaluationError("empty context pool")

    key_index, occ_vectors, occ_keys = {}, [], []
    for start in range(0, len(items), batch_size):
        chunk = items[start:start + batch_size]
        width = max(len(it[2].ids) for it in chunk)
        ids = torch.full((len(chunk), width), tok.pad_id, dtype=torch.long)
        for r, (_, _, inp) in enumerate(chunk):
            ids[r, : len(inp.ids)] = torch.as_tensor(inp.ids)
        hidden = model.encode(ids, ids.eq(tok.pad_id)).double().numpy()
        for r, (lang, words, inp) in enumerate(chunk):
            for w, (s, e) in zip(words, inp.word_spans):
                key = (lang, w)
                if key not in key_index:
                    key_index[key] = len(key_index)
                occ_keys.append(key_index[key])
                occ_vectors.append(hidden[r, s:e].mean(axis=0))
    occ = np.asarray(occ_vectors, dtype=np.float64)
    sums, counts = _kernels.segment_sum(occ, np.asarray(occ_keys, dtype=np.int64), len(key_index))
    means = sums / counts[:, None]
    keys = list(key_index)
    keep = [i for i in sorted(range(len(keys)), key=lambda i: keys[i]) if counts[i] >= min_freq]
    vecs = means[keep]
    vecs = vecs / np.linalg.norm(vecs, axis=1, keepdims=True)
    return WordEmbeddingTable([keys[i] for i in keep], vecs, counts[keep].astype(np.int64))


@dataclass(frozen=True)
class _EnglishView:
    tokens: tuple
    lang: str = ENGLISH
    translation: tuple = ()


# ---------------------------------------------------------------------------
# pairs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EvalPair:
    lang1: str
    word1: str
    lang2: str
    word2: str
    concept_id: str | None = None
    category: str = ""

    @property
    def homograph(self) -> bool:
        return self.word1 == self.word2


def cognate_category(lang1: str, lang2: str, word1: str, word2: str, branches=None) -> str:
    branches = BRANCHES if branches is None else branches
    scope = "Within-Branch" if branches[lang1] == branches[lang2] else "Cross-Branch"
    kind = "Homograph" if word1 == word2 else "Heterograph"
    return f"{scope} ({kind})"


def pair_label(lang1: str, lang2: str) -> str:
    a, b = sorted((lang1.capitalize(), lang2.capitalize()))
    return f"{a}-{b}"


def load_cognate_pairs(path, branches=None) -> list:
    """Read ``{"lang1", "word1", "lang2", "word2", "source_concept_id"}`` lines."""
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            l1, l2 = canonical(rec["lang1"]), canonical(rec["lang2"])
            w1, w2 = rec["word1"], rec["word2"]
        except (KeyError, json.JSONDecodeError, ValueError) as exc:
            raise EvaluationError(f"{path}:{lineno}: {exc}") from exc
        pairs.append(EvalPair(l1, w1, l2, w2, rec.get("source_concept_id"),
                              cognate_category(l1, l2, w1, w2, branches)))
    return pairs


def load_dictionary_pairs(path) -> list:
    """Read ``{"lang", "word", "english"}`` lines (category left empty)."""
    pairs = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            pairs.append(EvalPair(canonical(rec["lang"]), rec["word"], ENGLISH, rec["english"]))
        except (KeyError, json.JSONDecodeError, ValueError) as exc:
            raise EvaluationError(f"{path}:{lineno}: {exc}") from exc
    return pairs


def split_seen_unseen(pairs: Iterable[EvalPair], train_corpus) -> list:
    """Label word-translation pairs Seen or Unseen.

    Seen means some training record of the pair's language has ``word1`` among
    its tokens and ``word2`` among its translation tokens.
    """
    by_word = defaultdict(set)
    by_trans = defaultdict(set)
    for i, s in enumerate(train_corpus):
        for w in set(s.tokens):
            by_word[(s.lang, w)].add(i)
        for w in set(s.translation):
            by_trans[w].add(i)
    out = []
    for p in pairs:
        seen = bool(by_word.get((p.lang1, p.word1), set()) & by_trans.get(p.word2, set()))
        out.append(EvalPair(p.lang1, p.word1, p.lang2, p.word2, p.concept_id, "Seen" if seen else "Unseen"))
    return out


def sample_negatives(positives: Sequence[EvalPair], table: WordEmbeddingTable, seed: int,
                     gold: Iterable[EvalPair] | None = None) -> list:
    """One negative per positive: a uniformly drawn target-language word that is
    not a gold partner of the anchor."""
    partners = defaultdict(set)
    for p in (positives if gold is None else gold):
        partners[(p.lang1, p.word1, p.lang2)].add(p.word2)
        partners[(p.lang2, p.word2, p.lang1)].add(p.word1)
    pools = {}
    rng = np.random.default_rng(seed)
    out = []
    for p in positives:
        pool = pools.get(p.lang2)
        if pool is None:
            pool = pools[p.lang2] = table.words(p.lang2)
        banned = partners[(p.lang1, p.word1, p.lang2)]
        cands = [w for w in pool if w not in banned]
        if not cands:
            raise EvaluationError(f"no negative candidate in {p.lang2} for {p.word1!r}")
        w = cands[int(rng.integers(len(cands)))]
        out.append(EvalPair(p.lang1, p.word1, p.lang2, w, None, "negative"))
    return out


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

def pair_similarities(pairs: Sequence[EvalPair], table: WordEmbeddingTable) -> np.ndarray:
    return np.array([table.similarity((p.lang1, p.word1), (p.lang2, p.word2)) for p in pairs], dtype=np.float64)


def triplet_accuracy_from_scores(pos_sims, neg_sims) -> float:
    pos, neg = np.asarray(pos_sims, dtype=np.float64), np.asarray(neg_sims, dtype=np.float64)
    if pos.shape != neg.shape:
        raise ValueError("positives and negatives must be matched one to one")
    if pos.size == 0:
        raise ValueError("no triplets")
    return int(np.count_nonzero(pos > neg)) / pos.size


def auc_from_scores(pos_sims, neg_sims, strict: bool = False) -> float:
    """Share of (positive, negative) score pairs ranked correctly.

    Ties earn half credit unless ``strict`` (then they count as losses).
    """
    pos = np.ascontiguousarray(pos_sims, dtype=np.float64)
    neg = np.ascontiguousarray(neg_sims, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    wins, ties = _kernels.auc_counts(pos, neg)
    credit = wins if strict else wins + 0.5 * ties
    return credit / (pos.size * neg.size)


def triplet_accuracy(positives, negatives, table: WordEmbeddingTable) -> float:
    if len(positives) != len(negatives):
        raise ValueError("positives and negatives must be matched one to one")
    return triplet_accuracy_from_scores(pair_similarities(positives, table), pair_similarities(negatives, table))


def roc_auc(positives, negatives, table: WordEmbeddingTable, strict: bool = False) -> float:
    return auc_from_scores(pair_similarities(positives, table), pair_similarities(negatives, table), strict)


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

@dataclass
class EvalRow:
    task: str
    category: str
    pair: str
    variant: str
    n: int
    auc: float | None
    acc: float | None
    seed: int = 0


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)

    COLUMNS = ("task", "category", "pair", "variant", "seed", "N", "AUC", "Acc")

    def to_tsv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(self.COLUMNS)
        for r in self.rows:
            w.writerow([r.task, r.category, r.pair, r.variant, r.seed, r.n,
                        "" if r.auc is None else f"{r.auc:.6f}", "" if r.acc is None else f"{r.acc:.6f}"])
        return buf.getvalue()

    def write(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(self.to_tsv(), encoding="utf-8")

    @classmethod
    def read(cls, path) -> "EvalReport":
        rows = []
        with open(path, encoding="utf-8") as fh:
            for rec in csv.DictReader(fh, delimiter="\t"):
                rows.append(EvalRow(rec["task"], rec["category"], rec["pair"], rec["variant"], int(rec["N"]),
                                    float(rec["AUC"]) if rec["AUC"] else None,
                                    float(rec["Acc"]) if rec["Acc"] else None, int(rec["seed"])))
        return cls(rows)

    def merged(self, other: "EvalReport") -> "EvalReport":
        return EvalReport(self.rows + other.rows)

    def lookup(self, category: str, pair: str, variant: str | None = None) -> list:
        return [r for r in self.rows if r.category == category and r.pair == pair
                and (variant is None or r.variant == variant)]


def _group_seed(seed: int, *labels) -> int:
    return (seed * 1_000_003 + zlib.crc32("|".join(labels).encode("utf-8"))) % (2 ** 32)


def _score_group(pairs, table, seed, labels, gold, strict):
    valid = [p for p in pairs if (p.lang1, p.word1) in table and (p.lang2, p.word2) in table]
    if not valid:
        return 0, None, None
    negs = sample_negatives(valid, table, _group_seed(seed, *labels), gold=gold)
    pos_s, neg_s = pair_similarities(valid, table), pair_similarities(negs, table)
    return len(valid), auc_from_scores(pos_s, neg_s, strict), triplet_accuracy_from_scores(pos_s, neg_s)


def evaluate_table(table: WordEmbeddingTable, variant: str, seed: int = 0, cognates: Sequence[EvalPair] = (),
                   dictionary: Sequence[EvalPair] = (), train_corpus=None, strict: bool = False) -> EvalReport:
    """Score every pair group against a ready embedding table.

    Intra-family pairs are grouped by category and language pair; dictionary
    pairs by language and Seen/Unseen.  Pairs with a word missing from the
    table are excluded; a group left empty gets ``N = 0`` and no metrics.
    """
    report = EvalReport()
    groups = defaultdict(list)
    for p in cognates:
        groups[(INTRA, p.category, pair_label(p.lang1, p.lang2))].append(p)
    if dictionary:
        labelled = split_seen_unseen(dictionary, train_corpus or [])
        for p in labelled:
            groups[(EGY_ENG, f"{p.lang1.capitalize()}-English", p.category)].append(p)
        for lang in sorted({p.lang1 for p in dictionary}):
            for cat in ("Seen", "Unseen"):
                groups.setdefault((EGY_ENG, f"{lang.capitalize()}-English", cat), [])
    gold = list(cognates) + list(dictionary)
    for key in sorted(groups):
        n, auc, acc = _score_group(groups[key], table, seed, key, gold, strict)
        if n == 0:
            log.info("no valid pairs for %s / %s / %s", *key)
        report.rows.append(EvalRow(key[0], key[1], key[2], variant, n, auc, acc, seed))
    return report


def evaluate(model, tok: TokenizerModel, heldout, variant: str, *, cognates=(), dictionary=(), train_corpus=None,
             seed: int = 0, min_freq: int = 1, strict: bool = False) -> EvalReport:
    """Embed the held-out pool with ``model`` and score all pair groups."""
    table = extract_word_embeddings(model, tok, heldout, min_freq=min_freq, seed=seed,
                                    include_english=bool(dictionary))
    return evaluate_table(table, variant, seed, cognates, dictionary, train_corpus, strict)
