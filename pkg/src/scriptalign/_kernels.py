"""Hot numeric loops, compiled with numba when available.

Every kernel has a numba implementation (``*_nb``) and a vectorised numpy
implementation (``*_np``).  The public name is bound to one of them at import
time.  Set ``SCRIPTALIGN_DISABLE_NUMBA=1`` to force the numpy path; it is also
used automatically when numba cannot be imported.

Both paths return identical results (same dtypes, same ordering), which the
test-suite checks.
"""

from __future__ import annotations

import os
from warnings import warn

import numpy as np

_DISABLED = os.environ.get("SCRIPTALIGN_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes"}

try:
    import numba as nb
    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    nb = None
    HAS_NUMBA = False
    if not _DISABLED:
        warn("numba not found, using the numpy kernels")

USE_NUMBA = HAS_NUMBA and not _DISABLED


def _njit(fn):
    if HAS_NUMBA:
        return nb.njit(cache=True, nogil=True)(fn)
    return fn


# ---------------------------------------------------------------------------
# BPE: pair counting
# ---------------------------------------------------------------------------

def bpe_pair_counts_np(ids, word_ids, freqs, vocab_size):
    """Count adjacent symbol pairs inside words, weighted by word frequency.

    ``ids`` is the flat symbol array of all unique words, ``word_ids`` gives the
    owning word of each symbol and ``freqs`` the corpus frequency of each word.
    Returns ``(codes, counts)`` with ``code = left * vocab_size + right``,
    sorted by code.
    """
    if ids.size < 2:
        return np.empty(0, np.int64), np.empty(0, np.int64)
    same = word_ids[:-1] == word_ids[1:]
    codes = ids[:-1][same].astype(np.int64) * vocab_size + ids[1:][same]
    weights = freqs[word_ids[:-1][same]]
    uniq, inv = np.unique(codes, return_inverse=True)
    counts = np.bincount(inv, weights=weights, minlength=uniq.size).astype(np.int64)
    return uniq, counts


@_njit
def _pair_codes_nb(ids, word_ids, freqs, vocab_size):
    n = ids.size
    codes = np.empty(max(n - 1, 0), np.int64)
    weights = np.empty(max(n - 1, 0), np.int64)
    j = 0
    for i in range(n - 1):
        if word_ids[i] == word_ids[i + 1]:
            codes[j] = np.int64(ids[i]) * vocab_size + ids[i + 1]
            weights[j] = freqs[word_ids[i]]
            j += 1
    return codes[:j], weights[:j]


@_njit
def _run_sums_nb(sorted_codes, sorted_weights):
    m = sorted_codes.size
    out_codes = np.empty(m, np.int64)
    out_counts = np.empty(m, np.int64)
    k = -1
    for t in range(m):
        c = sorted_codes[t]
        if k < 0 or out_codes[k] != c:
            k += 1
            out_codes[k] = c
            out_counts[k] = 0
        out_counts[k] += sorted_weights[t]
    return out_codes[: k + 1], out_counts[: k + 1]


def bpe_pair_counts_nb(ids, word_ids, freqs, vocab_size):
    # the sort itself stays in numpy, which beats numba's argsort here
    codes, weights = _pair_codes_nb(ids, word_ids, freqs.astype(np.int64), np.int64(vocab_size))
    order = np.argsort(codes, kind="stable")
    return _run_sums_nb(codes[order], weights[order])


# ---------------------------------------------------------------------------
# BPE: apply one merge
# ---------------------------------------------------------------------------

def bpe_apply_merge_np(ids, word_ids, left, right, new_id):
    """Replace every non-overlapping (left, right) pair inside a word.

    Matches are taken greedily left to right, so ``a a a`` with the merge
    ``(a, a)`` becomes ``aa a``.
    """
    if ids.size < 2:
        return ids.copy(), word_ids.copy()
    match = np.zeros(ids.size, dtype=bool)
    match[:-1] = (ids[:-1] == left) & (ids[1:] == right) & (word_ids[:-1] == word_ids[1:])
    if not match.any():
        return ids.copy(), word_ids.copy()
    if left == right:
        # inside a run of consecutive matches only every other one is taken
        idx = np.flatnonzero(match)
        run_start = np.ones(idx.size, dtype=bool)
        run_start[1:] = idx[1:] != idx[:-1] + 1
        start_pos = np.maximum.accumulate(np.where(run_start, np.arange(idx.size), 0))
        keep = ((np.arange(idx.size) - start_pos) % 2) == 0
        match = np.zeros(ids.size, dtype=bool)
        match[idx[keep]] = True
    drop = np.zeros(ids.size, dtype=bool)
    drop[1:] = match[:-1]
    out = ids.copy()
    out[match] = new_id
    keep_mask = ~drop
    return out[keep_mask], word_ids[keep_mask]


@_njit
def _apply_merge_nb(ids, word_ids, left, right, new_id):
    n = ids.size
    out = np.empty(n, ids.dtype)
    out_w = np.empty(n, word_ids.dtype)
    i = 0
    j = 0
    while i < n:
        if (i + 1 < n and ids[i] == left and ids[i + 1] == right
                and word_ids[i] == word_ids[i + 1]):
            out[j] = new_id
            out_w[j] = word_ids[i]
            i += 2
        else:
            out[j] = ids[i]
            out_w[j] = word_ids[i]
            i += 1
        j += 1
    return out[:j].copy(), out_w[:j].copy()


def bpe_apply_merge_nb(ids, word_ids, left, right, new_id):
    return _apply_merge_nb(ids, word_ids, ids.dtype.type(left), ids.dtype.type(right),
                           ids.dtype.type(new_id))


# ---------------------------------------------------------------------------
# AUC pair counting
# ---------------------------------------------------------------------------

def auc_counts_np(pos, neg):
    """Return ``(wins, ties)``: pairs with ``pos > neg`` and ``pos == neg``."""
    neg_sorted = np.sort(neg)
    lo = np.searchsorted(neg_sorted, pos, side="left")
    hi = np.searchsorted(neg_sorted, pos, side="right")
    return int(lo.sum()), int((hi - lo).sum())


@_njit
def _auc_counts_nb(pos, neg):
    # two-pointer sweep over both sorted score lists
    p = np.sort(pos)
    q = np.sort(neg)
    wins = 0
    ties = 0
    lo = 0
    hi = 0
    for i in range(p.size):
        v = p[i]
        while lo < q.size and q[lo] < v:
            lo += 1
        if hi < lo:
            hi = lo
        while hi < q.size and q[hi] == v:
            hi += 1
        wins += lo
        ties += hi - lo
    return wins, ties


def auc_counts_nb(pos, neg):
    wins, ties = _auc_counts_nb(pos, neg)
    return int(wins), int(ties)


# ---------------------------------------------------------------------------
# segment mean (word pooling)
# ---------------------------------------------------------------------------

def segment_sum_np(values, segment_ids, n_segments):
    """Row sums of ``values`` grouped by ``segment_ids`` (float64 accumulation)."""
    out = np.zeros((n_segments, values.shape[1]), dtype=np.float64)
    np.add.at(out, segment_ids, values.astype(np.float64))
    counts = np.bincount(segment_ids, minlength=n_segments).astype(np.int64)
    return out, counts


@_njit
def _segment_sum_nb(values, segment_ids, n_segments):
    out = np.zeros((n_segments, values.shape[1]), dtype=np.float64)
    counts = np.zeros(n_segments, dtype=np.int64)
    for i in range(values.shape[0]):
        s = segment_ids[i]
        counts[s] += 1
        for k in range(values.shape[1]):
            out[s, k] += values[i, k]
    return out, counts


def segment_sum_nb(values, segment_ids, n_segments):
    return _segment_sum_nb(np.ascontiguousarray(values, dtype=np.float64),
                           segment_ids.astype(np.int64), np.int64(n_segments))


# pair counting is sort-bound and numpy's radix sort wins (see
# benchmarks/bench_kernels.py), so it stays on numpy under both settings
bpe_pair_counts = bpe_pair_counts_np
if USE_NUMBA:
    bpe_apply_merge = bpe_apply_merge_nb
    auc_counts = auc_counts_nb
    segment_sum = segment_sum_nb
else:
    bpe_apply_merge = bpe_apply_merge_np
    auc_counts = auc_counts_np
    segment_sum = segment_sum_np

BACKEND = "numba" if USE_NUMBA else "numpy"

__all__ = [
    "BACKEND",
    "HAS_NUMBA",
    "USE_NUMBA",
    "auc_counts",
    "bpe_apply_merge",
    "bpe_pair_counts",
    "segment_sum",
]
