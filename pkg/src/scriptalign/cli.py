"""Command line entry point: ``scriptalign <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .corpus import CorpusError, corpus_stats, load_corpus, split_corpus, write_corpus
from .evaluation import (EvalReport, EvaluationError, evaluate, extract_word_embeddings, load_cognate_pairs,
                         load_dictionary_pairs)
from .languages import UnknownLanguageError, canonical
from .model import CheckpointError, load_checkpoint
from .normalize import SCHEMES, NormalizationError, RuleTable, default_table, normalize_sentence
from .pipeline import OUTPUT_ENV, RunConfig, StageError, run_pipeline
from .tokenizer import TokenizerError, TokenizerModel, fragmentation_report, train_bpe
from .training import ConfigError, INTEGRATIONS, REPRESENTATIONS, TrainConfig, train

EXIT_OK, EXIT_CONFIG, EXIT_STAGE = 0, 2, 3

log = logging.getLogger("scriptalign")


def _out(path: str) -> Path:
    """Relative output paths live under $SCRIPTALIGN_OUTPUT when it is set."""
    p = Path(path)
    root = os.environ.get(OUTPUT_ENV)
    return p if p.is_absolute() or not root else Path(root) / p


def _sentences(path):
    res = load_corpus(path)
    for e in res.errors:
        log.warning("%s:%d: %s", path, e.line, e.message)
    return res.sentences


def _table(scheme, path):
    return RuleTable.load(path, scheme) if path else default_table(scheme)


# -- corpus ------------------------------------------------------------------

def cmd_corpus(args):
    if args.action == "clean":
        langs = [canonical(x.strip()) for x in args.langs.split(",")] if args.langs else None
        res = load_corpus(args.input, languages=langs)
        write_corpus(res.sentences, _out(args.out))
        for e in res.errors:
            print(f"rejected line {e.line}: {e.message}", file=sys.stderr)
        print(f"{len(res.sentences)} kept, {len(res.errors)} rejected")
    elif args.action == "split":
        ratios = tuple(float(x) for x in args.ratios.split(","))
        parts = split_corpus(_sentences(args.input), ratios, seed=args.seed)
        out = _out(args.out)
        for name, part in zip(("train", "val", "test"), parts):
            write_corpus(part, out / f"{name}.jsonl")
            print(f"{name}\t{len(part)}")
    else:
        tok = TokenizerModel.load(args.tokenizer)
        text = corpus_stats(_sentences(args.input), tok).to_tsv()
        if args.out:
            _out(args.out).write_text(text, encoding="utf-8")
        sys.stdout.write(text)


def cmd_normalize(args):
    table = _table(args.scheme, args.table)
    lines = []
    for s in _sentences(args.input):
        rec = s.to_record()
        rec["view"] = " ".join(normalize_sentence(s, args.scheme, table).words)
        rec["scheme"] = args.scheme
        lines.append(json.dumps(rec, ensure_ascii=False))
    if args.out:
        p = _out(args.out)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    else:
        print("\n".join(lines))


# -- tokenizer -----------------------------------------------------------------

def cmd_tokenizer(args):
    if args.action == "train":
        sents = _sentences(args.input)
        texts = [s.text for s in sents] + [" ".join(s.translation) for s in sents if s.translation]
        for scheme in filter(None, (args.include_views or "").split(",")):
            texts += [" ".join(normalize_sentence(s, scheme).words) for s in sents]
        tok = train_bpe(texts, args.vocab_size, args.min_freq)
        tok.save(_out(args.out))
        print(f"vocab {tok.vocab_size}, {len(tok.merges)} merges, hash {tok.hash[:12]}")
    elif args.action == "encode":
        tok = TokenizerModel.load(args.tokenizer)
        seq = tok.encode(args.text)
        print(" ".join(map(str, seq.ids)))
        print(" ".join(seq.strings))
    else:
        tok = TokenizerModel.load(args.tokenizer)
        schemes = args.schemes.split(",")
        totals = {"original": [0, 0]}
        totals.update({s: [0, 0] for s in schemes})
        for s in _sentences(args.input):
            orig = tok.encode_words(s.tokens)
            views = [tok.encode_words(normalize_sentence(s, sc).words) for sc in schemes]
            rep = fragmentation_report(orig, views, tok, schemes)
            for v in rep.views:
                totals[v.name][0] += v.length
                totals[v.name][1] += v.fallback
        base = totals["original"][0] or 1
        print("view\ttokens\tratio\tfallback")
        for name, (n, fb) in totals.items():
            print(f"{name}\t{n}\t{n / base:.4f}\t{fb}")


# -- train / eval ----------------------------------------------------------------

def cmd_train(args):
    base = {}
    if args.config:
        base = json.loads(Path(args.config).read_text(encoding="utf-8"))
    overrides = {k: v for k, v in {
        "tasks": args.tasks, "representation": args.repr, "integration": args.integration,
        "consistency_lambda": args.consistency_lambda, "seed": args.seed, "epochs": args.epochs,
    }.items() if v is not None}
    cfg = TrainConfig.from_dict({**base, **overrides})
    tok = TokenizerModel.load(args.tokenizer)
    out = _out(args.out)
    table = RuleTable.load(args.table, cfg.representation) if args.table and cfg.representation != "raw" else None
    result = train(cfg, _sentences(args.data), tok, table=table, log_path=out / "loss.tsv",
                   checkpoint_path=out / "model.pt")
    last = result.history[-1]
    print(f"{cfg.name}: " + " ".join(f"{k}={v:.4f}" for k, v in last.items() if k != "epoch"))


def _model(args):
    tok = TokenizerModel.load(args.tokenizer)
    model, extra = load_checkpoint(args.checkpoint, tok.hash)
    return tok, model, extra


def cmd_eval(args):
    tok, model, extra = _model(args)
    variant = args.variant
    if variant is None:
        variant = TrainConfig.from_dict(extra["train_config"]).name if "train_config" in extra else "model"
    cognates = load_cognate_pairs(args.cognates) if args.cognates else []
    dictionary = load_dictionary_pairs(args.dictionary) if args.dictionary else []
    train_corpus = _sentences(args.train_corpus) if args.train_corpus else []
    rep = evaluate(model, tok, _sentences(args.heldout), variant, cognates=cognates, dictionary=dictionary,
                   train_corpus=train_corpus, seed=args.seed, min_freq=args.min_freq, strict=args.strict)
    if args.out:
        rep.write(_out(args.out))
    sys.stdout.write(rep.to_tsv())


def cmd_fig(args):
    from .figures import emit_heatmap, emit_tsne

    if args.kind == "heatmap":
        paths = emit_heatmap(EvalReport.read(args.report), _out(args.out))
    else:
        tok, model, _ = _model(args)
        table = extract_word_embeddings(model, tok, _sentences(args.heldout), seed=args.seed,
                                        include_english=args.english)
        paths = emit_tsne(table, _out(args.out), sample_size=args.sample, seed=args.seed)
    for k, v in paths.items():
        print(f"{k}\t{v}")


def cmd_synth(args):
    from .synthetic import make_twin_corpus

    twin = make_twin_corpus(args.sentences, args.concepts, seed=args.seed)
    for k, v in twin.write(_out(args.out), n_cognates=args.cognates, seed=args.seed).items():
        print(f"{k}\t{v}")


def cmd_run(args):
    out = run_pipeline(RunConfig.load(args.config))
    print(out)


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scriptalign", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run the whole pipeline from a JSON config")
    r.add_argument("--config", required=True)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("corpus", help="clean, split or count a corpus")
    csub = c.add_subparsers(dest="action", required=True)
    cc = csub.add_parser("clean")
    cc.add_argument("input")
    cc.add_argument("--out", required=True)
    cc.add_argument("--langs", help="comma-separated language filter")
    cs = csub.add_parser("split")
    cs.add_argument("input")
    cs.add_argument("--out", required=True, help="directory for train/val/test files")
    cs.add_argument("--seed", type=int, default=0)
    cs.add_argument("--ratios", default="0.8,0.1,0.1")
    ct = csub.add_parser("stats")
    ct.add_argument("input")
    ct.add_argument("--tokenizer", required=True)
    ct.add_argument("--out")
    c.set_defaults(func=cmd_corpus)

    n = sub.add_parser("normalize", help="write a normalized view of a corpus")
    n.add_argument("input")
    n.add_argument("--scheme", choices=SCHEMES, required=True)
    n.add_argument("--table", help="rule table TSV (default: bundled)")
    n.add_argument("--out")
    n.set_defaults(func=cmd_normalize)

    t = sub.add_parser("tokenizer", help="train or inspect the BPE tokenizer")
    tsub = t.add_subparsers(dest="action", required=True)
    tt = tsub.add_parser("train")
    tt.add_argument("input")
    tt.add_argument("--out", required=True)
    tt.add_argument("--vocab-size", type=int, default=2000)
    tt.add_argument("--min-freq", type=int, default=2)
    tt.add_argument("--include-views", help="comma-separated schemes whose views join BPE training")
    te = tsub.add_parser("encode")
    te.add_argument("text")
    te.add_argument("--tokenizer", required=True)
    tf = tsub.add_parser("frag-report")
    tf.add_argument("input")
    tf.add_argument("--tokenizer", required=True)
    tf.add_argument("--schemes", default="latin,ipa")
    t.set_defaults(func=cmd_tokenizer)

    tr = sub.add_parser("train", help="train one grid cell")
    tr.add_argument("--data", required=True)
    tr.add_argument("--tokenizer", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--config", help="JSON file with training options")
    tr.add_argument("--tasks", help="comma-separated, e.g. mlm,trans")
    tr.add_argument("--repr", choices=REPRESENTATIONS)
    tr.add_argument("--integration", choices=INTEGRATIONS)
    tr.add_argument("--consistency_lambda", type=float)
    tr.add_argument("--seed", type=int)
    tr.add_argument("--epochs", type=int)
    tr.add_argument("--table", help="rule table TSV for the normalized view")
    tr.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on pair files")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--tokenizer", required=True)
    e.add_argument("--heldout", required=True)
    e.add_argument("--cognates")
    e.add_argument("--dictionary")
    e.add_argument("--train-corpus", help="training split, for seen/unseen labels")
    e.add_argument("--variant")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--min-freq", type=int, default=1)
    e.add_argument("--strict", action="store_true", help="ties count as losses in AUC")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    f = sub.add_parser("fig", help="heatmap or t-SNE figure with its data table")
    fsub = f.add_subparsers(dest="kind", required=True)
    fh = fsub.add_parser("heatmap")
    fh.add_argument("--report", required=True)
    fh.add_argument("--out", required=True)
    fs = fsub.add_parser("tsne")
    fs.add_argument("--checkpoint", required=True)
    fs.add_argument("--tokenizer", required=True)
    fs.add_argument("--heldout", required=True)
    fs.add_argument("--out", required=True)
    fs.add_argument("--sample", type=int)
    fs.add_argument("--seed", type=int, default=0)
    fs.add_argument("--english", action="store_true")
    f.set_defaults(func=cmd_fig)

    s = sub.add_parser("synth", help="write the synthetic twin-language corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--sentences", type=int, default=500)
    s.add_argument("--concepts", type=int, default=60)
    s.add_argument("--cognates", type=int, default=50)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, UnknownLanguageError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (CorpusError, NormalizationError, TokenizerError, CheckpointError, EvaluationError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
