"""Time the numba and numpy kernels on synthetic inputs of realistic size.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Also times a full BPE training run under each backend (in a subprocess, since
the backend is fixed at import time).
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from scriptalign import _kernels as K


def best_of(fn, repeat):
    fn()  # warm-up, includes jit compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def bpe_inputs(rng, n_words=20_000, vocab=2_000):
    lengths = rng.integers(2, 12, size=n_words)
    ids = rng.integers(11, 267, size=int(lengths.sum())).astype(np.int64)
    word_ids = np.repeat(np.arange(n_words, dtype=np.int64), lengths)
    freqs = rng.integers(1, 50, size=n_words).astype(np.int64)
    return ids, word_ids, freqs, vocab


BPE_SCRIPT = """
import time
from scriptalign.synthetic import make_twin_corpus
from scriptalign.tokenizer import train_bpe
from scriptalign import _kernels
tw = make_twin_corpus(3000, 400, seed=0)
texts = [s.text for s in tw.sentences] + [" ".join(s.translation) for s in tw.sentences]
train_bpe(texts[:50], 300)
t0 = time.perf_counter()
train_bpe(texts, 1500)
print(_kernels.BACKEND, time.perf_counter() - t0)
"""


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--skip-bpe", action="store_true")
    args = ap.parse_args()
    if not K.HAS_NUMBA:
        sys.exit("numba is not installed")

    rng = np.random.default_rng(0)
    ids, word_ids, freqs, vocab = bpe_inputs(rng)
    pos, neg = rng.random(3_000), rng.random(3_000)
    vals = rng.standard_normal((200_000, 64))
    segs = rng.integers(0, 5_000, size=200_000).astype(np.int64)
    cases = {
        "bpe_pair_counts": (K.bpe_pair_counts_np, K.bpe_pair_counts_nb, (ids, word_ids, freqs, vocab)),
        "bpe_apply_merge": (K.bpe_apply_merge_np, K.bpe_apply_merge_nb, (ids, word_ids, 20, 30, 3000)),
        "auc_counts": (K.auc_counts_np, K.auc_counts_nb, (pos, neg)),
        "segment_sum": (K.segment_sum_np, K.segment_sum_nb, (vals, segs, 5_000)),
    }
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, (f_np, f_nb, a) in cases.items():
        t_np = best_of(lambda: f_np(*a), args.repeat)
        t_nb = best_of(lambda: f_nb(*a), args.repeat)
        print(f"{name:<18}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.1f}x")

    if not args.skip_bpe:
        print("\nend-to-end BPE training (1500 vocab)")
        for flag in ("1", "0"):
            env = dict(os.environ, SCRIPTALIGN_DISABLE_NUMBA=flag)
            out = subprocess.run([sys.executable, "-c", BPE_SCRIPT], env=env, capture_output=True, text=True,
                                 check=True)
            backend, secs = out.stdout.split()
            print(f"  {backend:<8}{float(secs):8.2f} s")


if __name__ == "__main__":
    main()
