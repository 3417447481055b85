"""One-config pipeline: clean, split, tokenize, train the grid, evaluate, plot."""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from .corpus import load_corpus, split_corpus, write_corpus
from .evaluation import EvalReport, evaluate, load_cognate_pairs, load_dictionary_pairs
from .figures import emit_heatmap
from .languages import BRANCHES, LANG_TAGS
from .model import state_hash
from .normalize import RuleTable, normalize_sentence
from .tokenizer import TokenizerModel, train_bpe
from .training import ConfigError, TrainConfig, ablation_grid, train

log = logging.getLogger(__name__)

OUTPUT_ENV = "SCRIPTALIGN_OUTPUT"


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunConfig:
    corpus: list
    output_dir: str = "run"
    cognates: str | None = None
    dictionary: str | None = None
    branches: dict = field(default_factory=lambda: dict(BRANCHES))
    rule_tables: dict = field(default_factory=dict)
    tokenizer: dict = field(default_factory=lambda: {"vocab_size": 2000, "min_freq": 2, "include_views": False})
    train: dict = field(default_factory=dict)
    grid: list | str = "full"
    seeds: list = field(default_factory=lambda: [0])
    split: dict = field(default_factory=lambda: {"ratios": [0.8, 0.1, 0.1], "seed": 0})
    eval: dict = field(default_factory=lambda: {"min_freq": 1, "strict_auc": False})
    figures: bool = True
    base_dir: str = field(default=".", repr=False)

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data, base_dir=str(path.parent))

    @classmethod
    def from_dict(cls, data: dict, base_dir: str = ".") -> "RunConfig":
        known = set(cls.__dataclass_fields__) - {"base_dir"}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown config key(s): {', '.join(sorted(extra))}")
        if "corpus" not in data:
            raise ConfigError("config needs a 'corpus' entry")
        d = dict(data)
        if isinstance(d["corpus"], str):
            d["corpus"] = [d["corpus"]]
        cfg = cls(**d, base_dir=base_dir)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")).hexdigest()

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else Path(self.base_dir) / q

    def output_path(self) -> Path:
        q = Path(self.output_dir)
        if q.is_absolute():
            return q
        root = os.environ.get(OUTPUT_ENV)
        return Path(root) / q if root else self.resolve(self.output_dir)

    def train_configs(self) -> list:
        """Grid cells (without seeds) after applying shared training options."""
        try:
            base = TrainConfig.from_dict(self.train) if self.train else TrainConfig()
            cells = ablation_grid(base)
            if self.grid == "full":
                return cells
            by_name = {c.name: c for c in cells}
            out = []
            for entry in self.grid:
                if isinstance(entry, str):
                    if entry not in by_name:
                        raise ConfigError(f"unknown grid cell {entry!r}; known: {', '.join(by_name)}")
                    out.append(by_name[entry])
                else:
                    out.append(TrainConfig.from_dict({**base.to_dict(), **entry}))
            return out
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    def validate(self):
        missing = [p for p in self.corpus if not self.resolve(p).is_file()]
        for key in ("cognates", "dictionary"):
            p = getattr(self, key)
            if p is not None and not self.resolve(p).is_file():
                missing.append(p)
        missing += [p for p in self.rule_tables.values() if not self.resolve(p).is_file()]
        if missing:
            raise ConfigError(f"missing file(s): {', '.join(missing)}")
        bad_schemes = set(self.rule_tables) - {"latin", "ipa"}
        if bad_schemes:
            raise ConfigError(f"unknown rule-table scheme(s): {', '.join(sorted(bad_schemes))}")
        unknown_langs = set(self.branches) - set(LANG_TAGS)
        if unknown_langs:
            raise ConfigError(f"unknown language(s) in branch map: {', '.join(sorted(unknown_langs))}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if not self.train_configs():
            raise ConfigError("empty grid")


def _sha_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class _Stage:
    def __init__(self, name):
        self.name = name

    def __enter__(self):
        log.info("stage %s", self.name)
        return self

    def __exit__(self, et, exc, tb):
        if exc is not None and not isinstance(exc, (StageError, KeyboardInterrupt)):
            raise StageError(self.name, exc) from exc
        return False


def run_pipeline(cfg: RunConfig) -> Path:
    """Run every stage and return the run directory.

    Layout: ``data/`` splits, ``tokenizer/``, ``cells/<cell>/seed<k>/`` with
    checkpoint, loss log and per-cell report, ``report.tsv`` (merged),
    ``figures/`` and ``manifest.json``.  A failing stage raises
    :class:`StageError`; files written so far are left in place.
    """
    out = cfg.output_path()
    out.mkdir(parents=True, exist_ok=True)
    langs = list(cfg.branches)

    with _Stage("clean"):
        corpus, errors = [], []
        for p in cfg.corpus:
            res = load_corpus(cfg.resolve(p), languages=langs)
            corpus.extend(res.sentences)
            errors.extend(f"{p}:{e.line}: {e.message}" for e in res.errors)
        (out / "data").mkdir(exist_ok=True)
        (out / "data" / "rejected.txt").write_text("".join(e + "\n" for e in errors), encoding="utf-8")

    with _Stage("split"):
        train_s, val_s, test_s = split_corpus(corpus, tuple(cfg.split.get("ratios", (0.8, 0.1, 0.1))),
                                              seed=int(cfg.split.get("seed", 0)))
        for name, part in (("train", train_s), ("val", val_s), ("test", test_s)):
            write_corpus(part, out / "data" / f"{name}.jsonl")

    cells = cfg.train_configs()
    tables = {}
    with _Stage("normalize"):
        for scheme in sorted({c.representation for c in cells} - {"raw"}):
            path = cfg.rule_tables.get(scheme)
            tables[scheme] = (RuleTable.load(cfg.resolve(path), scheme, cfg.branches) if path
                              else RuleTable.default(scheme, cfg.branches))
            # fail early on graphemes without a rule
            for s in corpus:
                normalize_sentence(s, scheme, tables[scheme])

    with _Stage("tokenizer"):
        tok_cfg = dict(cfg.tokenizer)
        texts = [s.text for s in train_s] + [" ".join(s.translation) for s in train_s if s.translation]
        if tok_cfg.get("include_views"):
            for table in tables.values():
                texts += [" ".join(normalize_sentence(s, table.scheme, table).words) for s in train_s]
        tok = train_bpe(texts, int(tok_cfg.get("vocab_size", 2000)), int(tok_cfg.get("min_freq", 2)))
        tok.save(out / "tokenizer")

    with _Stage("pairs"):
        cognates = load_cognate_pairs(cfg.resolve(cfg.cognates), cfg.branches) if cfg.cognates else []
        dictionary = load_dictionary_pairs(cfg.resolve(cfg.dictionary)) if cfg.dictionary else []

    merged = EvalReport()
    cell_hashes = {}
    heldout = val_s + test_s
    for cell in cells:
        for seed in cfg.seeds:
            cell_dir = out / "cells" / cell.name / f"seed{seed}"
            with _Stage(f"train:{cell.name}:seed{seed}"):
                run_cfg = replace(cell, seed=int(seed))
                result = train(run_cfg, train_s, tok, table=tables.get(cell.representation),
                               log_path=cell_dir / "loss.tsv", checkpoint_path=cell_dir / "model.pt")
                cell_hashes[f"{cell.name}/seed{seed}"] = state_hash(result.model)
            with _Stage(f"eval:{cell.name}:seed{seed}"):
                rep = evaluate(result.model, tok, heldout, cell.name, cognates=cognates, dictionary=dictionary,
                               train_corpus=train_s, seed=int(seed), min_freq=int(cfg.eval.get("min_freq", 1)),
                               strict=bool(cfg.eval.get("strict_auc", False)))
                rep.write(cell_dir / "report.tsv")
                merged = merged.merged(rep)

    with _Stage("report"):
        merged.rows.sort(key=lambda r: (r.task, r.category, r.pair, r.variant, r.seed))
        merged.write(out / "report.tsv")

    figures = {}
    if cfg.figures and merged.rows:
        with _Stage("figures"):
            figures = {k: str(v.relative_to(out)) for k, v in emit_heatmap(merged, out / "figures").items()}

    manifest = {
        "config_hash": cfg.hash,
        "config": cfg.to_dict(),
        "seeds": list(cfg.seeds),
        "tokenizer_hash": tok.hash,
        "cells": [c.name for c in cells],
        "model_hashes": cell_hashes,
        "report_hash": _sha_file(out / "report.tsv"),
        "figures": figures,
        "counts": {"train": len(train_s), "val": len(val_s), "test": len(test_s), "rejected": len(errors)},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                                       encoding="utf-8")
    return out


def load_tokenizer(run_dir) -> TokenizerModel:
    return TokenizerModel.load(Path(run_dir) / "tokenizer")
