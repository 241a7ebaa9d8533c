"""``ecomlm`` command line: one subcommand per pipeline stage.

Exit codes: 0 success, 1 usage error, 2 data or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import checkpoint as ckpt
from .assocgraph import load_graph
from .encoder import ModelConfig, cross_attention, content_embeddings, content_rows
from .fileio import DataError, atomic_open, open_text, write_csv
from .masking import Mode
from .phrases import (
    PhrasePool,
    build_temp_pool,
    collect_noun_phrases,
    filter_pool,
    load_phrase_set,
    match_phrases,
    mine_phrases,
    phrase_overlap,
)
from .textcorpus import (
    PosTagger,
    Vocabulary,
    build_vocab,
    encode,
    make_sequence,
    read_corpus,
    read_products,
    tokenize,
)
from .trainer import (
    TrainConfig,
    eval_mlm,
    finetune_classify,
    load_resources,
    predict_classes,
    prepare_examples,
    read_config_file,
    train_ahm,
    train_joint,
)

class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def _corpus_args(p):
    p.add_argument("--products", action="append", default=[], metavar="TSV",
                   help="product corpus: id<TAB>title<TAB>description")
    p.add_argument("--reviews", action="append", default=[], metavar="TSV",
                   help="review corpus: id<TAB>product_id<TAB>text")
    p.add_argument("--text", action="append", default=[], metavar="FILE",
                   help="plain text, one document per line")


def _corpus_specs(args):
    specs = ([(p, "product") for p in args.products] + [(p, "review") for p in args.reviews]
             + [(p, "text") for p in args.text])
    if not specs:
        raise UsageError("at least one of --products, --reviews, --text is required")
    return specs


# training flags that map one-to-one onto TrainConfig keys
TRAIN_FLAGS = {
    "products": str, "reviews": str, "vocab": str, "pool": str, "graph": str,
    "pos_lexicon": str, "out": str, "metrics": str, "trace": str,
    "masking": str, "ahm_steps": int, "joint_steps": int, "batch_size": int, "lr": float,
    "npr_weight": float, "t1_iters": int, "alpha0": float,
}


def _train_args(p):
    p.add_argument("--config", metavar="FILE", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    for key, typ in TRAIN_FLAGS.items():
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ, default=None)


def _train_config(args) -> TrainConfig:
    values = {}
    if args.config:
        values.update(read_config_file(args.config))
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = value.strip()
    for key in TRAIN_FLAGS:
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    if args.seed is not None:
        values["seed"] = args.seed
    return TrainConfig.from_mapping(values)


def _load_model(path):
    params, saved, _ = ckpt.load_checkpoint(path)
    model = ModelConfig.from_dict({k[6:]: v for k, v in saved.items() if k.startswith("model.")})
    vocab = Vocabulary.load(os.path.join(path, "vocab.txt"))
    return params, model, vocab, saved


# ---------------------------------------------------------------------------
# commands


def cmd_build_vocab(args):
    vocab = build_vocab(_corpus_specs(args), args.min_freq, args.max_size)
    vocab.save(args.out)
    print(f"vocabulary: {len(vocab)} entries -> {args.out}")


def cmd_mine_phrases(args):
    pool = mine_phrases(_corpus_specs(args), args.max_len, args.min_count)
    kept = filter_pool(pool, args.threshold)
    kept.save(args.out)
    print(f"mined {len(pool)} candidates, kept {len(kept)} with score >= {args.threshold} -> {args.out}")


def cmd_import_phrases(args):
    pool = PhrasePool.load(args.input)
    kept = filter_pool(pool, args.threshold)
    kept.save(args.out)
    print(f"imported {len(pool)} phrases, kept {len(kept)} -> {args.out}")


def cmd_match(args):
    pool = PhrasePool.load(args.pool)
    if args.line is not None:
        lines = [args.line]
    elif args.input:
        lines = [d.body for d in read_corpus(args.input, "text")]
    else:
        raise UsageError("match needs --line or --input")
    tagger = PosTagger.from_file(args.pos_lexicon) if args.pos_lexicon else PosTagger()
    rows = []
    vocab = Vocabulary()
    for n, item in enumerate(lines, 1):
        tokens = tokenize(item) if isinstance(item, str) else item
        if args.nouns:
            seq = make_sequence(tokens, vocab, len(tokens) + 2, tagger)
            for sp in build_temp_pool(seq, pool):
                rows.append([n, sp.start - 1, sp.end - 1, " ".join(seq.surface[sp.start:sp.end]),
                             sp.origin, repr(sp.score)])
        else:
            for s, e in match_phrases(tokens, pool):
                rows.append([n, s, e, " ".join(tokens[s:e]), "domain", repr(pool.score(tokens[s:e]))])
    header = ["line", "start", "end", "phrase", "origin", "score"]
    if args.out:
        write_csv(args.out, header, rows)
    else:
        w = csv.writer(sys.stdout, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_overlap(args):
    domain = PhrasePool.load(args.domain).phrases()
    if args.noun:
        nouns = load_phrase_set(args.noun)
    elif args.products:
        tagger = PosTagger.from_file(args.pos_lexicon) if args.pos_lexicon else PosTagger()
        vocab = Vocabulary()
        seqs = [make_sequence(d.content_tokens(), vocab, 10**9, tagger) for d in read_products(args.products)]
        nouns = collect_noun_phrases(seqs)
    else:
        raise UsageError("overlap needs --noun or --products")
    if not domain:
        raise DataError(f"{args.domain}: domain pool is empty")
    ratio = phrase_overlap(domain, nouns)
    print(f"{args.category}\t{ratio:.4f}\t({ratio * 100:.1f}% of {len(domain)} domain phrases)")
    if args.out:
        write_csv(args.out, ["category", "overlap_ratio"], [[args.category, repr(ratio)]])


def cmd_build_graph(args):
    products = [d.doc_id for d in read_products(args.products)] if args.products else None
    graph = load_graph(args.edges, products)
    st = graph.stats()
    print(f"nodes={st['nodes']} edges={st['edges']} dropped={st['dropped']} self_loops={graph.self_loops}")
    if args.out:
        graph.save(args.out)


def cmd_pretrain(args):
    config = _train_config(args)
    if not config.out:
        raise UsageError("pretrain needs an output checkpoint (--out or config key 'out')")
    products, reviews, vocab, pool, tagger = load_resources(config)
    tr = train_ahm([products, reviews], pool, config, vocab, resume=args.resume, tagger=tagger)
    last = tr.metrics[-1] if tr.metrics else None
    print(f"step {tr.step}: loss_ahm={last[3] if last else 'n/a'} -> {config.out}")


def cmd_pretrain_joint(args):
    config = _train_config(args)
    if not config.out:
        raise UsageError("pretrain-joint needs an output checkpoint (--out or config key 'out')")
    if not config.graph:
        raise DataError("config key 'graph' is required for joint training")
    init_vocab = Vocabulary.load(os.path.join(args.init, "vocab.txt"))
    products, _, vocab, pool, tagger = load_resources(config, init_vocab)
    graph = load_graph(config.graph, [d.doc_id for d in products])
    tr = train_joint(products, graph, config, args.init, pool, tagger)
    npr = [float(r[4]) for r in tr.metrics if r[1] == "joint" and r[4]]
    tail = np.mean(npr[-100:]) if npr else float("nan")
    print(f"step {tr.step}: mean NPR loss over last {min(100, len(npr))} steps = {tail:.4f} -> {config.out}")


def cmd_eval_mlm(args):
    params, model, vocab, saved = _load_model(args.ckpt)
    pool_path = args.pool or saved.get("train.pool", "")
    pool = PhrasePool.load(pool_path) if pool_path else PhrasePool()
    corpus = read_corpus(args.corpus, args.kind)
    examples = prepare_examples(corpus, vocab, pool, model.max_len)
    modes = [Mode.WORD, Mode.PHRASE] if args.mode == "both" else [Mode(args.mode)]
    seed = 1234 if args.seed is None else args.seed
    rows = []
    for mode in modes:
        res = eval_mlm(params, model, examples, mode, seed)
        rows.append([mode.value, repr(res.loss), repr(res.accuracy), res.tokens])
        print(f"{mode.value}\tloss={res.loss:.4f}\taccuracy={res.accuracy:.4f}\ttokens={res.tokens}")
    if args.out:
        write_csv(args.out, ["mode", "loss", "accuracy", "tokens"], rows)


def cmd_probe_attention(args):
    params, model, vocab, _ = _load_model(args.ckpt)
    pair = [x.strip() for x in args.pair.split(",")]
    if len(pair) != 2 or not all(pair):
        raise UsageError("--pair expects two product ids: a,b")
    docs = read_products(args.products).by_id()
    missing = [p for p in pair if p not in docs]
    if missing:
        raise DataError(f"unknown product id {missing[0]!r} in {args.products}")
    seqs = [make_sequence(docs[p].content_tokens(), vocab, model.max_len) for p in pair]
    tokens = [[seq.surface[i] for i in content_rows(seq.ids)] for seq in seqs]
    emb = [content_embeddings(seq.ids, params, model) for seq in seqs]
    mats = cross_attention(emb[0], emb[1])
    with atomic_open(args.out, newline="") as fh:
        w = csv.writer(fh)
        for name, m in (("alpha", mats.A), ("beta", mats.B)):
            w.writerow([f"{name}:{pair[0]}\\{pair[1]}"] + tokens[1])
            for tok, row in zip(tokens[0], m):
                w.writerow([tok] + [repr(float(x)) for x in row])
            w.writerow([])
    print(f"{len(tokens[0])}x{len(tokens[1])} attention matrices -> {args.out}")


def _read_labeled(path, vocab, max_len, labels=None):
    texts, names = [], []
    with open_text(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t", 1)
            if len(parts) != 2:
                raise DataError(f"{path}:{lineno}: expected label<TAB>text")
            names.append(parts[0].strip())
            texts.append(encode(tokenize(parts[1]), vocab, max_len))
    if not texts:
        raise DataError(f"{path}: no labeled examples")
    labels = labels or sorted(set(names))
    index = {n: i for i, n in enumerate(labels)}
    unknown = [n for n in names if n not in index]
    if unknown:
        raise DataError(f"{path}: label {unknown[0]!r} not seen in training data")
    return [(ids, index[n]) for ids, n in zip(texts, names)], labels


def cmd_finetune_classify(args):
    params, model, vocab, saved = _load_model(args.ckpt)
    data, labels = _read_labeled(args.train, vocab, model.max_len)
    if len(labels) < 2:
        raise DataError("classification needs at least two labels")
    seed = 0 if args.seed is None else args.seed
    history = finetune_classify(params, model, data, len(labels), args.steps, args.lr,
                                args.batch_size, seed)
    print(f"final train-batch accuracy {history[-1]:.3f} over {len(labels)} classes")
    if args.test:
        test, _ = _read_labeled(args.test, vocab, model.max_len, labels)
        pred = predict_classes(params, model, [ids for ids, _ in test])
        acc = float(np.mean(pred == np.array([y for _, y in test])))
        print(f"test accuracy {acc:.4f} on {len(test)} examples")
    if args.out:
        config = {k: v for k, v in saved.items() if k.startswith("model.")}
        config["classify.labels"] = ",".join(labels)
        ckpt.save_checkpoint(args.out, params, config, {}, {"vocab.txt": vocab.to_text()})


# ---------------------------------------------------------------------------
# parser


def build_parser() -> Parser:
    top = Parser(prog="ecomlm", description="E-commerce masked-LM pre-training pipeline.")
    top.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = top.add_subparsers(dest="command", metavar="COMMAND", parser_class=Parser)
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--seed", type=int, default=None, help="random seed")
        p.set_defaults(func=func)
        return p

    p = add("build-vocab", cmd_build_vocab, "Build a word vocabulary from corpora.")
    _corpus_args(p)
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--max-size", type=int, default=8192)
    p.add_argument("--out", required=True)

    p = add("mine-phrases", cmd_mine_phrases, "Mine and score candidate phrases.")
    _corpus_args(p)
    p.add_argument("--max-len", type=int, default=6)
    p.add_argument("--min-count", type=int, default=2)
    p.add_argument("--threshold", type=float, default=0.5, help="drop phrases scoring below this")
    p.add_argument("--out", required=True)

    p = add("import-phrases", cmd_import_phrases, "Validate and filter an external phrase<TAB>score pool.")
    p.add_argument("--input", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", required=True)

    p = add("match", cmd_match, "Show phrase-pool matches in text.")
    p.add_argument("--pool", required=True)
    p.add_argument("--line", help="a single line of text")
    p.add_argument("--input", help="text file, one document per line")
    p.add_argument("--nouns", action="store_true", help="include noun-phrase supplements")
    p.add_argument("--pos-lexicon")
    p.add_argument("--out", help="CSV output (default: TSV on stdout)")

    p = add("overlap", cmd_overlap, "Share of domain phrases that are also noun phrases.")
    p.add_argument("--domain", required=True, help="phrase pool TSV")
    p.add_argument("--noun", help="noun phrase list, one per line")
    p.add_argument("--products", help="extract noun phrases from this product corpus instead")
    p.add_argument("--pos-lexicon")
    p.add_argument("--category", default="all")
    p.add_argument("--out", help="CSV: category,overlap_ratio")

    p = add("build-graph", cmd_build_graph, "Load, symmetrize and clean an association edge list.")
    p.add_argument("--edges", required=True)
    p.add_argument("--products", help="drop edges touching products not in this corpus")
    p.add_argument("--out")

    p = add("pretrain", cmd_pretrain, "Phase one: adaptive hybrid masking on products and reviews.")
    _train_args(p)
    p.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint")

    p = add("pretrain-joint", cmd_pretrain_joint, "Phase two: masking plus neighbour reconstruction.")
    _train_args(p)
    p.add_argument("--init", required=True, metavar="CKPT", help="phase-one checkpoint")

    p = add("eval-mlm", cmd_eval_mlm, "Masked-token loss and accuracy on held-out text.")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--kind", choices=["product", "review", "text"], default="product")
    p.add_argument("--pool", help="phrase pool for phrase mode (default: the one used in training)")
    p.add_argument("--mode", choices=["word", "phrase", "both"], default="both")
    p.add_argument("--out")

    p = add("probe-attention", cmd_probe_attention, "Dump cross-attention matrices for a product pair.")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--products", required=True)
    p.add_argument("--pair", required=True, metavar="A,B")
    p.add_argument("--out", required=True)

    p = add("finetune-classify", cmd_finetune_classify, "Fine-tune a [CLS] classifier on label<TAB>text.")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--test")
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--out")
    return top


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"ecomlm {args.command}: {exc}", file=sys.stderr)
        return 1
    except (DataError, ValueError, LookupError, OSError, FloatingPointError) as exc:
        print(f"ecomlm {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
