"""Single command-line entry point for the whole experiment pipeline.

Subcommands: gen-corpus, train-lm, train-rnnt, finetune-cf, decode,
evaluate, report, reproduce. Every run is deterministic given its seed
(default from $RNNT_FUSION_SEED, else 7). Errors print one
machine-parseable line on stderr and exit with a distinct code:
2 usage, 3 missing file, 4 vocabulary-fingerprint mismatch,
5 malformed checkpoint/dataset/spec, 1 anything else.
"""

import os

for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .errors import (
    CheckpointFormatError,
    CheckpointKindError,
    CorpusSpecError,
    DatasetFormatError,
    FingerprintMismatchError,
    OracleSizeError,
    SessionError,
    ShapeError,
    VocabularyError,
)

EXIT_OK = 0
EXIT_OTHER = 1
EXIT_USAGE = 2
EXIT_MISSING_FILE = 3
EXIT_FINGERPRINT = 4
EXIT_FORMAT = 5

FUSION_FLAG_TO_MODE = {"none": "none", "sf": "shallow", "cf": "cold", "sf+cf": "shallow_cold"}


def _default_seed() -> int:
    return int(os.environ.get("RNNT_FUSION_SEED", "7"))


def _fail(code: int, message: str) -> int:
    flat = " ".join(str(message).split())
    print(f"error code={code} {flat}", file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(
        prog="rnnt-fusion",
        description="Desk-scale RNN-T with shallow and cold fusion of an external neural LM.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("gen-corpus", formatter_class=fmt, help="generate the synthetic task")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--paired", type=int, default=2000, help="paired training sentences")
    p.add_argument("--unpaired", type=int, default=50000, help="unpaired text sentences")
    p.add_argument("--dev", type=int, default=200, help="dev utterances")
    p.add_argument("--test", type=int, default=200, help="test utterances")
    p.add_argument("--noise-sigma", type=float, default=0.35, help="feature noise stddev")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("train-lm", formatter_class=fmt, help="train the external neural LM")
    p.add_argument("--text", required=True, help="training text corpus (one sentence per line)")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--dev-text", default=None, help="held-out text for perplexity")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--log", default=None, help="training log path (TSV)")
    p.add_argument("--epochs", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--base-lr", type=float, default=4e-3)
    p.add_argument("--hold-epochs", type=int, default=2)
    p.add_argument("--decay", type=float, default=0.8, help="LR decay factor after the hold")
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_train_lm)

    p = sub.add_parser("train-rnnt", formatter_class=fmt, help="train the baseline transducer")
    p.add_argument("--corpus", required=True, help="corpus directory from gen-corpus")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--log", default=None, help="training log path (TSV)")
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--base-lr", type=float, default=4e-3)
    p.add_argument("--hold-epochs", type=int, default=8)
    p.add_argument("--decay", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_train_rnnt)

    p = sub.add_parser("finetune-cf", formatter_class=fmt, help="train the cold-fusion model")
    p.add_argument("--mode", choices=["iterative", "scratch"], default="iterative")
    p.add_argument("--rnnt", default=None, help="pre-trained transducer checkpoint (iterative)")
    p.add_argument("--lm", required=True, help="frozen external LM checkpoint")
    p.add_argument("--corpus", required=True, help="corpus directory")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--log", default=None, help="training log path (TSV)")
    p.add_argument("--epochs", type=int, default=6)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--base-lr", type=float, default=1e-3)
    p.add_argument("--hold-epochs", type=int, default=2)
    p.add_argument("--decay", type=float, default=0.6)
    p.add_argument("--seed", type=int, default=_default_seed())
    p.set_defaults(func=cmd_finetune_cf)

    p = sub.add_parser("decode", formatter_class=fmt, help="beam-search decode a dataset")
    p.add_argument("--model", required=True, help="transducer checkpoint")
    p.add_argument("--lm", default=None, help="external LM checkpoint (fusion modes)")
    p.add_argument("--data", required=True, help="utterance dataset (.tsv)")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--out", required=True, help="n-best output file")
    p.add_argument("--fusion", choices=sorted(FUSION_FLAG_TO_MODE), default="none")
    p.add_argument("--lambda", dest="lam", type=float, default=0.3,
                   help="shallow-fusion weight (used by sf and sf+cf)")
    p.add_argument("--beam", type=int, default=15, help="beam size")
    p.add_argument("--max-symbols", type=int, default=3, help="max emissions per frame")
    p.add_argument("--swap-lm", default=None, help="LM checkpoint to hot-swap in before decoding")
    p.add_argument("--chunk-frames", type=int, default=0,
                   help="feed frames in chunks of this size (0 = whole utterance)")
    p.add_argument("--threads", type=int, default=1, help="parallel decode workers")
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", formatter_class=fmt, help="score a decode against references")
    p.add_argument("--refs", required=True, help="reference dataset (.tsv)")
    p.add_argument("--vocab", required=True, help="vocabulary file")
    p.add_argument("--hyp", required=True, help="n-best file (rank-1 lines are scored)")
    p.add_argument("--out", default=None, help="optional JSON result path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", formatter_class=fmt, help="render result tables")
    p.add_argument("--run", nargs="+", required=True,
                   help="one or more reproduce output directories (medians across them)")
    p.add_argument("--out", default=None, help="optional output path (default stdout)")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("reproduce", formatter_class=fmt,
                       help="run the full pipeline: corpus, training, fusion decodes, analysis")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=_default_seed())
    p.add_argument("--scale", choices=["default", "smoke"], default="default",
                   help="smoke = reduced sizes for quick determinism checks")
    p.add_argument("--paired", type=int, default=None, help="override paired train sentences")
    p.add_argument("--unpaired", type=int, default=None, help="override unpaired sentences")
    p.add_argument("--beam", type=int, default=None, help="override decode beam size")
    p.add_argument("--threads", type=int, default=1, help="parallel decode workers")
    p.set_defaults(func=cmd_reproduce)
    return parser


def _load_corpus_dir(corpus_dir: str):
    from .corpus import Vocabulary, read_dataset

    d = Path(corpus_dir)
    if not d.is_dir():
        raise FileNotFoundError(f"corpus directory {corpus_dir} does not exist")
    vocab = Vocabulary.from_file(d / "vocab.txt")
    train = read_dataset(d / "train.tsv", vocab)
    dev = read_dataset(d / "dev.tsv", vocab)
    return vocab, train, dev


def cmd_gen_corpus(args) -> int:
    from .corpus import CorpusSpec, generate_corpus, write_dataset, write_text_corpus

    spec = CorpusSpec(
        seed=args.seed,
        paired_sentence_count=args.paired,
        unpaired_sentence_count=args.unpaired,
        dev_count=args.dev,
        test_count=args.test,
        noise_sigma=args.noise_sigma,
    )
    corpus = generate_corpus(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    spec.to_json(out / "spec.json")
    corpus.vocab.to_file(out / "vocab.txt")
    for split in ("train", "dev", "test"):
        write_dataset(out / f"{split}.tsv", getattr(corpus, split), corpus.vocab)
    write_text_corpus(out / "unpaired.txt", corpus.unpaired, corpus.vocab)
    write_text_corpus(out / "oracle.txt", corpus.oracle, corpus.vocab)
    print(f"corpus written to {out}")
    return EXIT_OK


def cmd_train_lm(args) -> int:
    from .corpus import Vocabulary, read_text_corpus
    from .models import save_checkpoint
    from .training import Schedule, TrainRecipe, train_lm, write_training_log

    vocab = Vocabulary.from_file(args.vocab)
    train_sentences = read_text_corpus(args.text, vocab)
    dev_sentences = read_text_corpus(args.dev_text, vocab) if args.dev_text else []
    recipe = TrainRecipe(
        mode="lm", epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
        schedule=Schedule(args.base_lr, args.hold_epochs, args.decay),
    )
    lm, records = train_lm(recipe, train_sentences, dev_sentences, vocab)
    save_checkpoint(lm, args.out)
    if args.log:
        write_training_log(args.log, records)
    print(f"lm checkpoint written to {args.out} (final dev ppl {records[-1].dev_ppl:.3f})")
    return EXIT_OK


def cmd_train_rnnt(args) -> int:
    from .models import save_checkpoint
    from .training import Schedule, TrainRecipe, train_rnnt, write_training_log

    vocab, train, dev = _load_corpus_dir(args.corpus)
    recipe = TrainRecipe(
        mode="rnnt", epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
        schedule=Schedule(args.base_lr, args.hold_epochs, args.decay),
    )
    model, records = train_rnnt(recipe, train, dev, vocab)
    save_checkpoint(model, args.out)
    if args.log:
        write_training_log(args.log, records)
    print(f"rnnt checkpoint written to {args.out} (final dev loss {records[-1].dev_loss:.4f})")
    return EXIT_OK


def cmd_finetune_cf(args) -> int:
    from .models import save_checkpoint
    from .training import Schedule, TrainRecipe, finetune_coldfusion, write_training_log

    if args.mode == "iterative" and not args.rnnt:
        raise ValueError("--rnnt is required with --mode iterative")
    _, train, dev = _load_corpus_dir(args.corpus)
    recipe = TrainRecipe(
        mode=f"cf_{args.mode}", epochs=args.epochs, batch_size=args.batch_size,
        seed=args.seed, schedule=Schedule(args.base_lr, args.hold_epochs, args.decay),
    )
    model, _, records = finetune_coldfusion(recipe, args.rnnt, args.lm, train, dev)
    save_checkpoint(model, args.out)
    if args.log:
        write_training_log(args.log, records)
    print(f"cold-fusion checkpoint written to {args.out} (final dev loss {records[-1].dev_loss:.4f})")
    return EXIT_OK


def cmd_decode(args) -> int:
    from .corpus import Vocabulary, read_dataset
    from .decoder import DecodeConfig, DecodeSession, format_nbest
    from .models import load_lm, load_transducer

    mode = FUSION_FLAG_TO_MODE[args.fusion]
    needs_lm = mode != "none"
    if needs_lm and not args.lm:
        raise ValueError(f"--lm is required when --fusion {args.fusion}")
    if not needs_lm and args.lm:
        raise ValueError("--lm given but --fusion none does not use it")
    if not needs_lm and args.swap_lm:
        raise ValueError("--swap-lm needs a fusion mode that uses the LM")

    model = load_transducer(args.model)
    lm = load_lm(args.lm, expected_fingerprint=model.vocab_fingerprint) if args.lm else None
    swap_to = (
        load_lm(args.swap_lm, expected_fingerprint=model.vocab_fingerprint)
        if args.swap_lm
        else None
    )
    vocab = Vocabulary.from_file(args.vocab)
    utts = read_dataset(args.data, vocab)
    lam = args.lam if mode in ("shallow", "shallow_cold") else 0.0
    config = DecodeConfig(
        beam_size=args.beam, lam=lam, max_symbols_per_frame=args.max_symbols, fusion_mode=mode
    )

    def decode_one(u):
        session = DecodeSession(model, lm, config)
        if swap_to is not None:
            session.swap_lm(swap_to)
        if args.chunk_frames > 0:
            for i in range(0, u.frames.shape[0], args.chunk_frames):
                session.feed(u.frames[i : i + args.chunk_frames])
        else:
            session.feed(u.frames)
        return session.finish()

    if args.threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=args.threads) as pool:
            results = list(pool.map(decode_one, utts))
    else:
        results = [decode_one(u) for u in utts]
    lines = []
    for u, res in zip(utts, results):
        lines.extend(format_nbest(u.id, res, vocab))
    Path(args.out).write_text("".join(line + "\n" for line in lines))
    print(f"decoded {len(utts)} utterances -> {args.out}")
    return EXIT_OK


def read_nbest_best(path) -> dict[str, list[str]]:
    """Rank-1 hypothesis words per utterance id from an n-best file."""
    best: dict[str, list[str]] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise DatasetFormatError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
            uid, rank, _score, text = parts
            if rank == "1":
                best[uid] = text.split()
    return best


def cmd_evaluate(args) -> int:
    from .corpus import Vocabulary, read_dataset
    from .evaluation import corpus_wer

    vocab = Vocabulary.from_file(args.vocab)
    refs = {
        u.id: [vocab.word(t) for t in u.reference] for u in read_dataset(args.refs, vocab)
    }
    hyps = read_nbest_best(args.hyp)
    result = corpus_wer(refs, hyps)
    payload = {
        "wer": result.wer,
        "substitutions": result.substitutions,
        "insertions": result.insertions,
        "deletions": result.deletions,
        "ref_words": result.ref_words,
    }
    if args.out:
        Path(args.out).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n")
    print(
        f"WER {100 * result.wer:.2f}%  (S={result.substitutions} I={result.insertions} "
        f"D={result.deletions} N={result.ref_words})"
    )
    return EXIT_OK


def cmd_report(args) -> int:
    from .experiments import render_summary

    results = []
    for run in args.run:
        path = Path(run) / "results.json"
        if not path.exists():
            raise FileNotFoundError(f"{path} not found (is {run} a reproduce output dir?)")
        results.append(json.loads(path.read_text()))
    text = render_summary(results)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text, end="")
    return EXIT_OK


def cmd_reproduce(args) -> int:
    from .corpus import CorpusSpec
    from .experiments import PipelineConfig, run_pipeline

    if args.scale == "smoke":
        cfg = PipelineConfig.smoke(seed=args.seed)
    else:
        cfg = PipelineConfig(seed=args.seed, corpus=CorpusSpec(seed=args.seed))
    updates = {}
    corpus_updates = {}
    if args.paired is not None:
        corpus_updates["paired_sentence_count"] = args.paired
    if args.unpaired is not None:
        corpus_updates["unpaired_sentence_count"] = args.unpaired
    if corpus_updates:
        updates["corpus"] = dataclasses.replace(cfg.corpus, **corpus_updates)
    if args.beam is not None:
        updates["beam_size"] = args.beam
    if args.threads != 1:
        updates["threads"] = args.threads
    if updates:
        cfg = dataclasses.replace(cfg, **updates)
    result = run_pipeline(cfg, args.out)
    print((Path(args.out) / "reports" / "summary.txt").read_text(), end="")
    print(f"artifacts in {result.outdir}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as e:
        return _fail(EXIT_MISSING_FILE, e)
    except FingerprintMismatchError as e:
        return _fail(EXIT_FINGERPRINT, e)
    except (CheckpointFormatError, CheckpointKindError, DatasetFormatError, CorpusSpecError) as e:
        return _fail(EXIT_FORMAT, e)
    except (ValueError, ShapeError, SessionError, VocabularyError, OracleSizeError, KeyError) as e:
        return _fail(EXIT_OTHER, e)


if __name__ == "__main__":
    sys.exit(main())
