"""Static figures (AUC/accuracy heatmap, t-SNE scatter), each backed by a table."""

from __future__ import annotations

import csv
import logging
import warnings
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.patches import Rectangle  # noqa: E402

from .evaluation import EvalReport, WordEmbeddingTable  # noqa: E402
from .languages import ENGLISH  # noqa: E402

log = logging.getLogger(__name__)

VMIN, VMAX = 0.40, 1.00
TSNE_PERPLEXITY = 30
TSNE_ITERATIONS = 2000
TSNE_MIN_FREQ = 3


def cell_text(auc: float | None, acc: float | None) -> str:
    if auc is None:
        return "n/a"
    return f"{auc:.2f} ({acc:.2f})"


def heatmap_table(report: EvalReport) -> list:
    """Seed-averaged grid rows ``(group, variant, N, AUC, Acc, text, row_max)``.

    Groups keep first-appearance order, as do variants.  ``row_max`` marks the
    highest AUC in each group (first one on ties).
    """
    if not report.rows:
        raise ValueError("empty report")
    groups, variants, acc = [], [], {}
    for r in report.rows:
        g = f"{r.category} | {r.pair}"
        if g not in groups:
            groups.append(g)
        if r.variant not in variants:
            variants.append(r.variant)
        bucket = acc.setdefault((g, r.variant), {"n": r.n, "auc": [], "acc": []})
        if r.auc is not None:
            bucket["auc"].append(r.auc)
            bucket["acc"].append(r.acc)
    out = []
    for g in groups:
        row = []
        for v in variants:
            b = acc.get((g, v))
            if b is None:
                continue
            auc = float(np.mean(b["auc"])) if b["auc"] else None
            ac = float(np.mean(b["acc"])) if b["acc"] else None
            row.append([g, v, b["n"], auc, ac, cell_text(auc, ac), False])
        scored = [c for c in row if c[3] is not None]
        if scored:
            best = max(scored, key=lambda c: c[3])
            best[6] = True
        out.extend(tuple(c) for c in row)
    return out


def write_heatmap_table(rows, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["group", "variant", "N", "AUC", "Acc", "text", "row_max"])
        for g, v, n, auc, ac, text, best in rows:
            w.writerow([g, v, n, "" if auc is None else f"{auc:.6f}", "" if ac is None else f"{ac:.6f}",
                        text, int(best)])


def read_heatmap_table(path) -> list:
    rows = []
    with open(path, encoding="utf-8") as fh:
        for r in csv.DictReader(fh, delimiter="\t"):
            rows.append((r["group"], r["variant"], int(r["N"]), float(r["AUC"]) if r["AUC"] else None,
                         float(r["Acc"]) if r["Acc"] else None, r["text"], r["row_max"] == "1"))
    return rows


def render_heatmap(rows, image_path, title: str = "AUC (accuracy)"):
    """Draw the grid from table rows; colour is AUC clipped to [0.40, 1.00]."""
    groups = list(dict.fromkeys(r[0] for r in rows))
    variants = list(dict.fromkeys(r[1] for r in rows))
    grid = np.full((len(groups), len(variants)), np.nan)
    fig, ax = plt.subplots(figsize=(2.4 + 1.6 * len(variants), 0.9 + 0.5 * len(groups)))
    cells = {}
    for g, v, n, auc, ac, text, best in rows:
        i, j = groups.index(g), variants.index(v)
        cells[(i, j)] = (text, best)
        if auc is not None:
            grid[i, j] = auc
    im = ax.imshow(grid, cmap="viridis", vmin=VMIN, vmax=VMAX, aspect="auto")
    for (i, j), (text, best) in cells.items():
        ax.text(j, i, text, ha="center", va="center", fontsize=8, color="white" if grid[i, j] < 0.8 else "black")
        if best:
            ax.add_patch(Rectangle((j - 0.5, i - 0.5), 1, 1, fill=False, edgecolor="white", linewidth=2.5))
    ax.set_xticks(range(len(variants)), variants, rotation=30, ha="right", fontsize=8)
    ax.set_yticks(range(len(groups)), groups, fontsize=8)
    ax.set_title(title, fontsize=9)
    fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
    fig.tight_layout()
    Path(image_path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(image_path, dpi=120)
    plt.close(fig)
    return grid


def emit_heatmap(report: EvalReport, out_dir, stem: str = "heatmap") -> dict:
    """Write ``<stem>.tsv`` and ``<stem>.png``; the image is drawn from the table."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table_path, image_path = out / f"{stem}.tsv", out / f"{stem}.png"
    write_heatmap_table(heatmap_table(report), table_path)
    render_heatmap(read_heatmap_table(table_path), image_path)
    return {"table": table_path, "image": image_path}


# ---------------------------------------------------------------------------
# t-SNE
# ---------------------------------------------------------------------------

def tsne_sample(table: WordEmbeddingTable, sample_size: int | None, seed: int,
                min_freq: int = TSNE_MIN_FREQ) -> list:
    """Seeded per-language sample of frequent words (500, or 400 with English)."""
    langs = table.languages
    if sample_size is None:
        sample_size = 400 if ENGLISH in langs else 500
    rng = np.random.default_rng(seed)
    keys = []
    for lang in langs:
        pool = [w for w in table.words(lang) if table.count(lang, w) >= min_freq]
        if len(pool) < sample_size:
            warnings.warn(f"{lang}: only {len(pool)} words with frequency >= {min_freq}, "
                          f"wanted {sample_size}", stacklevel=2)
            chosen = pool
        else:
            chosen = [pool[i] for i in sorted(rng.choice(len(pool), size=sample_size, replace=False))]
        keys.extend((lang, w) for w in chosen)
    return keys


def project_tsne(vectors: np.ndarray, seed: int, perplexity: float = TSNE_PERPLEXITY,
                 iterations: int = TSNE_ITERATIONS) -> np.ndarray:
    from sklearn.manifold import TSNE

    n = len(vectors)
    if n < 2:
        raise ValueError("t-SNE needs at least two points")
    x = np.asarray(vectors, dtype=np.float64)
    x = x / np.maximum(np.linalg.norm(x, axis=1, keepdims=True), 1e-12)
    if np.allclose(x, x[0]):
        # sklearn's PCA init and Barnes-Hut tree both break on coincident points
        warnings.warn("all embeddings are identical; the layout is degenerate", stacklevel=2)
        return np.zeros((n, 2))
    perp = min(perplexity, max(1.0, (n - 1) / 3))
    tsne = TSNE(n_components=2, perplexity=perp, init="pca", max_iter=iterations, random_state=seed)
    return tsne.fit_transform(x)


def emit_tsne(table: WordEmbeddingTable, out_dir, sample_size: int | None = None, seed: int = 0,
              min_freq: int = TSNE_MIN_FREQ, stem: str = "tsne", iterations: int = TSNE_ITERATIONS) -> dict:
    """Project a per-language sample to 2-D and persist coordinates plus scatter."""
    keys = tsne_sample(table, sample_size, seed, min_freq)
    if len(keys) < 2:
        raise ValueError("t-SNE needs at least two points")
    vecs = np.stack([table.get(*k) for k in keys])
    coords = project_tsne(vecs, seed, iterations=iterations)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    coord_path, image_path = out / f"{stem}.tsv", out / f"{stem}.png"
    with open(coord_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["lang", "word", "x", "y"])
        for (lang, word), (x, y) in zip(keys, coords):
            w.writerow([lang, word, f"{x:.6f}", f"{y:.6f}"])
    render_tsne(coord_path, image_path)
    return {"table": coord_path, "image": image_path}


def render_tsne(coord_path, image_path):
    by_lang = {}
    with open(coord_path, encoding="utf-8") as fh:
        for r in csv.DictReader(fh, delimiter="\t"):
            by_lang.setdefault(r["lang"], []).append((float(r["x"]), float(r["y"])))
    fig, ax = plt.subplots(figsize=(6, 5))
    for lang, pts in sorted(by_lang.items()):
        arr = np.array(pts)
        ax.scatter(arr[:, 0], arr[:, 1], s=6, alpha=0.7, label=lang.capitalize())
    ax.legend(fontsize=8, markerscale=2)
    ax.set_xticks([])
    ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(image_path, dpi=120)
    plt.close(fig)
