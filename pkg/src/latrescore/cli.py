"""Command-line entry point: ``latrescore <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import __version__
from .config import DATA_DIR_ENV, apply_config, read_config, resolve

log = logging.getLogger("latrescore")

SUBCOMMANDS = ("gen-corpus", "train-ngram", "train-lstm", "quantize", "gen-lattices",
               "rescore", "ppl", "wer", "experiment")


class UsageError(Exception):
    pass


# -- text helpers ------------------------------------------------------------------


def read_text(path, lowercase: bool = False) -> list[list[str]]:
    out = []
    with open(resolve(path), encoding="utf-8") as fh:
        for line in fh:
            words = (line.lower() if lowercase else line).split()
            if words:
                out.append(words)
    return out


def write_text(path, sentences) -> None:
    with open(resolve(path), "w", encoding="utf-8") as fh:
        for s in sentences:
            fh.write(" ".join(s) + "\n")


def read_keyed(path) -> dict:
    """``<id> word word ...`` lines as an ordered dict of id -> words."""
    out = {}
    with open(resolve(path), encoding="utf-8") as fh:
        for n, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if parts[0] in out:
                raise UsageError(f"{path}:{n}: duplicate id {parts[0]!r}")
            out[parts[0]] = parts[1:]
    return out


def write_keyed(path, rows) -> None:
    with open(resolve(path), "w", encoding="utf-8") as fh:
        for key, words in rows:
            fh.write(" ".join([key, *words]) + "\n")


def load_vocab(path):
    from .vocab import Vocabulary

    return Vocabulary.from_json(Path(resolve(path)).read_text(encoding="utf-8"))


def vocab_for_training(args, sentences):
    """Load ``--vocab`` when it exists, else build from text and save it there."""
    from .vocab import Vocabulary

    if args.vocab and resolve(args.vocab).exists():
        return load_vocab(args.vocab)
    vocab = Vocabulary.build(sentences, max_size=args.max_vocab, min_count=args.min_count)
    if args.vocab:
        resolve(args.vocab).write_text(vocab.to_json(), encoding="utf-8")
        log.info("wrote vocabulary (%d words) to %s", len(vocab), args.vocab)
    return vocab


def load_model(path, vocab=None):
    """``.npz`` containers are LSTM models; anything else is read as ARPA."""
    from .lm.lstm import LstmLM
    from .lm.ngram import NGramLM

    p = resolve(path)
    if p.suffix == ".npz":
        return LstmLM.load(p)
    return NGramLM.from_arpa(p.read_text(encoding="utf-8"), vocab)


def _need(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"{args.command}: missing {flags}")


# -- subcommands ----------------------------------------------------------------------


def cmd_gen_corpus(args):
    from .corpus import ToyLanguage

    _need(args, "out")
    lang = ToyLanguage(seed=args.seed)
    segs = lang.generate(args.tokens, seed=args.seed, mean_length=args.mean_length)
    write_text(args.out, segs)
    print(f"wrote {len(segs)} segments, {sum(map(len, segs))} tokens to {args.out}")


def cmd_train_ngram(args):
    from .lm.ngram import NGramLM

    _need(args, "train", "out")
    sents = read_text(args.train, args.lowercase)
    vocab = vocab_for_training(args, sents)
    model = NGramLM(order=args.order, vocab=vocab, smoothing=args.smoothing)
    model.fit([vocab.encode(s) for s in sents])
    resolve(args.out).write_text(model.to_arpa(), encoding="utf-8")
    print(f"{args.order}-gram: {sum(model.num_ngrams())} n-grams written to {args.out}")


def cmd_train_lstm(args):
    from .lm.lstm import LstmLM

    _need(args, "train", "out")
    sents = read_text(args.train, args.lowercase)
    vocab = vocab_for_training(args, sents)
    heldout = None
    if args.heldout:
        heldout = [vocab.encode(s) for s in read_text(args.heldout, args.lowercase)]
    model = LstmLM(vocab=vocab, embed_dim=args.embed_dim, hidden_dim=args.hidden_dim,
                   proj_dim=args.proj_dim, num_layers=args.layers,
                   learning_rate=args.learning_rate, unroll=args.unroll,
                   batch_size=args.batch_size, clip_norm=args.clip_norm,
                   sample_size=args.sample_size, alpha=args.alpha, max_epochs=args.epochs,
                   seed=args.seed, verbose=args.verbose > 0)
    model.fit([vocab.encode(s) for s in sents], heldout=heldout)
    model.save(resolve(args.out))
    for h in model.history_:
        ppl = h.get("heldout_ppl")
        extra = f" heldout_ppl={ppl:.3f}" if ppl is not None else ""
        print(f"epoch {h['epoch']}: loss={h['train_loss']:.4f}{extra}")
    print(f"saved {model.num_parameters()} weights to {args.out}")


def cmd_quantize(args):
    from .lm.lstm import LstmLM
    from .quantization import quantize_model

    _need(args, "model", "out")
    model = LstmLM.load(resolve(args.model))
    q, report = quantize_model(model, args.chunk_size, args.centers, args.iters, args.seed)
    q.save(resolve(args.out))
    print(report)


def cmd_gen_lattices(args):
    from .corpus import ToyLanguage
    from .evaluation import SyntheticLatticeSpec, class_confusions, gen_lattices
    from .lattice import write_lattices

    _need(args, "refs", "ngram", "vocab", "out", "refs_out")
    vocab = load_vocab(args.vocab)
    ngram = load_model(args.ngram, vocab)
    refs = [vocab.encode(s) for s in read_text(args.refs, args.lowercase)]
    if args.limit:
        refs = refs[:args.limit]
    spec = SyntheticLatticeSpec(refs, n_confusions=args.confusions, skip_prob=args.skip_prob,
                                insert_prob=args.insert_prob, nonspeech_prob=args.nonspeech_prob,
                                am_noise=args.am_noise, density=args.density, seed=args.seed)
    confusions = class_confusions(ToyLanguage().confusions, vocab) if args.toy_confusions else None
    lats, refs = gen_lattices(spec, ngram, confusions)
    with open(resolve(args.out), "w", encoding="utf-8") as fh:
        write_lattices(lats, vocab, fh)
    write_keyed(args.refs_out, [(lat.id, vocab.decode(r)) for lat, r in zip(lats, refs)])
    print(f"wrote {len(lats)} lattices to {args.out}")


def cmd_rescore(args):
    from .lattice import read_lattices, write_lattices
    from .rescoring import LatticeRescorer

    _need(args, "lattices", "model", "out", "onebest")
    vocab = load_vocab(args.vocab) if args.vocab else None
    lm = load_model(args.model, vocab)
    if args.selfnorm:
        lm = lm.as_selfnorm()
    lats = read_lattices(resolve(args.lattices).read_text(encoding="utf-8"), lm.vocab_,
                         map_unk=True)
    rescorer = LatticeRescorer(lm, algorithm=args.algorithm, k=args.k,
                               expand_order=args.expand_order,
                               pool_weighting=args.pool_weighting, kbest_size=args.kbest_size,
                               lm_scale=args.lm_scale, wip=args.wip,
                               nonspeech_cost=args.nonspeech_cost).fit()
    results = rescorer.rescore(lats)
    if args.algorithm != "kbest":
        with open(resolve(args.out), "w", encoding="utf-8") as fh:
            write_lattices([r.lattice for r in results], lm.vocab_, fh)
    else:
        log.warning("kbest rescoring produces no lattice; %s not written", args.out)
    write_keyed(args.onebest, [(lat.id, lm.vocab_.decode(r.words))
                               for lat, r in zip(lats, results)])
    print(f"rescored {len(lats)} lattices with {args.algorithm}")


def cmd_ppl(args):
    from .evaluation import format_ppl, ppl_report

    _need(args, "text", "models")
    vocab = load_vocab(args.vocab) if args.vocab else None
    models = {}
    for spec in args.models:
        name, _, path = spec.rpartition("=")
        models[name or path] = load_model(path, vocab)
    text = read_text(args.text, args.lowercase)
    print(format_ppl(ppl_report(models, text)))


def cmd_wer(args):
    from .evaluation import wer

    _need(args, "ref", "hyp")
    refs, hyps = read_keyed(args.ref), read_keyed(args.hyp)
    missing = [k for k in refs if k not in hyps]
    if missing:
        raise UsageError(f"hypothesis file lacks {len(missing)} ids, e.g. {missing[0]!r}")
    s = i = d = n = 0
    for key, ref in refs.items():
        res = wer(ref, hyps[key])
        s, i, d, n = s + res.sub, i + res.ins, d + res.dels, n + len(ref)
        if args.per_utt:
            print(f"{key}\tS={res.sub}\tI={res.ins}\tD={res.dels}\tWER={100 * res.wer:.2f}")
    print(f"WER {100 * (s + i + d) / n:.2f}% [ S={s} I={i} D={d} / N={n} ]")


def cmd_experiment(args):
    from .corpus import ToyLanguage
    from .evaluation import (ExperimentConfig, SyntheticLatticeSpec, class_confusions,
                             gen_lattices, run_experiment)

    _need(args, "lstm", "vocab", "refs", "ngrams")
    vocab = load_vocab(args.vocab)
    lm = load_model(args.lstm, vocab)
    refs = [vocab.encode(s) for s in read_text(args.refs, args.lowercase)]
    if args.limit:
        refs = refs[:args.limit]
    confusions = class_confusions(ToyLanguage().confusions, vocab) if args.toy_confusions else None
    sets = {}
    for path in args.ngrams:
        ng = load_model(path, vocab)
        spec = SyntheticLatticeSpec(refs, n_confusions=args.confusions, seed=args.seed,
                                    density=args.density)
        sets[ng.order] = gen_lattices(spec, ng, confusions)
    cfg = ExperimentConfig(sets, ks=tuple(args.ks), expand_orders=tuple(args.expand_orders),
                           kbest_size=args.kbest_size, lm_scale=args.lm_scale)
    report = run_experiment(cfg, lm)
    print(report.format_table())
    if args.tsv:
        resolve(args.tsv).write_text(report.to_tsv(), encoding="utf-8")
        print(f"wrote {args.tsv}")


# -- parser -----------------------------------------------------------------------------


def _text_flags(p):
    p.add_argument("--lowercase", action="store_true", help="lowercase input text")


def _vocab_flags(p):
    p.add_argument("--vocab", help="vocabulary JSON; created from --train when missing")
    p.add_argument("--max-vocab", type=int, default=None)
    p.add_argument("--min-count", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="latrescore",
        description="Lattice rescoring with LSTM language models.",
        epilog=f"Relative paths are resolved against ${DATA_DIR_ENV} when set.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--config", help="INI file with one section per subcommand")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("gen-corpus", help="write synthetic topic-structured text")
    p.add_argument("--out")
    p.add_argument("--tokens", type=int, default=300_000)
    p.add_argument("--mean-length", type=int, default=60)
    p.add_argument("--seed", type=int, default=1234)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train-ngram", help="train a Witten-Bell N-gram model, write ARPA")
    p.add_argument("--train")
    p.add_argument("--out")
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--smoothing", choices=("witten_bell", "ml"), default="witten_bell")
    _vocab_flags(p)
    _text_flags(p)
    p.set_defaults(func=cmd_train_ngram)

    p = sub.add_parser("train-lstm", help="train an LSTM model with sampled softmax")
    p.add_argument("--train")
    p.add_argument("--heldout")
    p.add_argument("--out")
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--hidden-dim", type=int, default=256)
    p.add_argument("--proj-dim", type=int, default=128)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--learning-rate", type=float, default=0.2)
    p.add_argument("--unroll", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--clip-norm", type=float, default=1.0)
    p.add_argument("--sample-size", type=int, default=None)
    p.add_argument("--alpha", type=float, default=0.01, help="self-normalization weight")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    _vocab_flags(p)
    _text_flags(p)
    p.set_defaults(func=cmd_train_lstm)

    p = sub.add_parser("quantize", help="product-quantize embedding and softmax matrices")
    p.add_argument("--model")
    p.add_argument("--out")
    p.add_argument("--chunk-size", type=int, default=4)
    p.add_argument("--centers", type=int, default=256)
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("gen-lattices", help="synthesize first-pass lattices for references")
    p.add_argument("--refs", help="reference text, one segment per line")
    p.add_argument("--ngram", help="first-pass ARPA model")
    p.add_argument("--vocab")
    p.add_argument("--out")
    p.add_argument("--refs-out", help="keyed reference transcript to write")
    p.add_argument("--confusions", type=int, default=3)
    p.add_argument("--skip-prob", type=float, default=0.05)
    p.add_argument("--insert-prob", type=float, default=0.05)
    p.add_argument("--nonspeech-prob", type=float, default=0.05)
    p.add_argument("--am-noise", type=float, default=1.5)
    p.add_argument("--density", type=float, default=20.0)
    p.add_argument("--toy-confusions", action="store_true",
                   help="confuse words within their toy-language class")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    _text_flags(p)
    p.set_defaults(func=cmd_gen_lattices)

    p = sub.add_parser("rescore", help="rescore lattices with an LSTM or N-gram model")
    p.add_argument("--lattices")
    p.add_argument("--model", help=".npz LSTM container or ARPA file")
    p.add_argument("--vocab", help="vocabulary for ARPA models")
    p.add_argument("--out", help="rescored lattices")
    p.add_argument("--onebest", help="one-best transcript, '<lattice-id> <words>' per line")
    p.add_argument("--algorithm", choices=("push_forward", "state_pool", "arc_beam", "kbest"),
                   default="push_forward")
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--expand-order", type=int, default=0)
    p.add_argument("--pool-weighting", choices=("uniform", "max_prob", "sum_prob"),
                   default="max_prob")
    p.add_argument("--kbest-size", type=int, default=100)
    p.add_argument("--lm-scale", type=float, default=1.0)
    p.add_argument("--wip", type=float, default=0.0, help="word insertion penalty")
    p.add_argument("--nonspeech-cost", choices=("zero", "keep"), default="zero")
    p.add_argument("--selfnorm", action="store_true", help="score with unnormalized logits")
    p.set_defaults(func=cmd_rescore)

    p = sub.add_parser("ppl", help="perplexity table for models sharing a vocabulary")
    p.add_argument("--text")
    p.add_argument("--models", nargs="+", help="NAME=PATH or PATH")
    p.add_argument("--vocab")
    _text_flags(p)
    p.set_defaults(func=cmd_ppl)

    p = sub.add_parser("wer", help="score a keyed hypothesis file against references")
    p.add_argument("--ref")
    p.add_argument("--hyp")
    p.add_argument("--per-utt", action="store_true")
    p.set_defaults(func=cmd_wer)

    p = sub.add_parser("experiment", help="run the rescoring sweep on synthetic lattices")
    p.add_argument("--lstm")
    p.add_argument("--ngrams", nargs="+", help="first-pass ARPA models (one set per order)")
    p.add_argument("--vocab")
    p.add_argument("--refs")
    p.add_argument("--ks", type=int, nargs="+", default=[1, 10, 50])
    p.add_argument("--expand-orders", type=int, nargs="+", default=[2, 3, 4])
    p.add_argument("--kbest-size", type=int, default=100)
    p.add_argument("--lm-scale", type=float, default=1.0)
    p.add_argument("--confusions", type=int, default=3)
    p.add_argument("--density", type=float, default=20.0)
    p.add_argument("--toy-confusions", action="store_true")
    p.add_argument("--limit", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tsv", help="write the machine-readable table here")
    _text_flags(p)
    p.set_defaults(func=cmd_experiment)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    pre, _ = parser.parse_known_args(argv)
    if pre.config and pre.command:
        cp = read_config(resolve(pre.config))
        subparser = parser._subparsers._group_actions[0].choices[pre.command]
        apply_config(subparser, cp, pre.command)
    args = parser.parse_args(argv)
    if args.command is None:
        parser.error("a subcommand is required")
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except ValueError as e:
        print(f"latrescore: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, OSError, ValueError, KeyError) as e:
        print(f"latrescore {args.command}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
