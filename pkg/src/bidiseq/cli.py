"""Command-line entry point: data generation, training, decoding, evaluation.

Exit status: 0 on success, 2 for configuration problems (the message names
the offending key or flag), 3 for I/O problems (the message names the path).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from bidiseq.beam import sync_bidi_beam_search, unidirectional_beam_search
from bidiseq.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from bidiseq.config import (ConfigError, RunConfig, apply_overrides,
                            load_run_config)
from bidiseq.data import (BOS, EOS, L2R, R2L, CorpusFormatError, Vocab,
                          gen_bracket_task, gen_copy_task, read_corpus,
                          write_corpus)
from bidiseq.metrics import (bleu, full_report, length_bucket_bleu,
                             match_accuracy_first_last,
                             position_bucket_precision)
from bidiseq.training import (AdamState, fine_tune, train_model,
                              two_pass_train)
from bidiseq.training import ConfigError as TrainingConfigError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat key=value configuration file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one configuration key (repeatable)")
    parser.add_argument("--seed", type=int, help="global random seed")
    parser.add_argument("--arch", choices=("transformer", "lstm"))
    parser.add_argument("--strategy",
                        choices=("two-pass", "fine-tune", "no-interaction"))


def _run_config(args) -> RunConfig:
    overrides: dict = {}
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key] = value
    for key in ("seed", "arch", "strategy", "beam_size", "max_len", "alpha"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = str(value)
    return load_run_config(args.config, overrides)


def _read_lines(path) -> list[str]:
    return Path(path).read_text(encoding="utf-8").splitlines()


def _read_reference_lines(path) -> list[str]:
    """Plain token lines, or the target field of a source<TAB>target corpus."""
    lines = _read_lines(path)
    if lines and all("\t" in line for line in lines if line):
        return [line.split("\t")[1] for line in lines if line]
    return lines


def cmd_gen_data(args) -> int:
    cfg = _run_config(args)
    if args.task == "copy":
        corpus = gen_copy_task(args.count, args.vocab_size,
                               (args.min_len, args.max_len), seed=cfg.seed)
    else:
        corpus = gen_bracket_task(args.count, (args.min_depth, args.max_depth),
                                  args.noise_symbols, seed=cfg.seed)
    write_corpus(args.out, corpus)
    if args.vocab_out:
        Vocab.build([corpus]).save(args.vocab_out)
    print(f"wrote {len(corpus)} examples to {args.out}")
    return EXIT_OK


def _load_vocab(args, corpora) -> Vocab:
    if args.vocab and Path(args.vocab).exists():
        return Vocab.load(args.vocab)
    vocab = Vocab.build(corpora)
    if args.vocab:
        vocab.save(args.vocab)
    return vocab


def cmd_train(args) -> int:
    cfg = _run_config(args)
    train_corpus = read_corpus(args.train)
    if args.valid:
        valid_corpus = read_corpus(args.valid)
    else:
        split = max(1, len(train_corpus) // 10)
        valid_corpus = train_corpus[-split:]
        train_corpus = train_corpus[:-split]
    vocab = _load_vocab(args, [train_corpus, valid_corpus])
    model = cfg.build_model(len(vocab))
    tcfg = cfg.training_config()
    log_path = args.log or (args.out + ".log")
    optimizer = AdamState()
    with open(log_path, "w", encoding="utf-8") as log:
        if cfg.strategy == "no-interaction":
            train_model(model, train_corpus, valid_corpus, vocab, tcfg,
                        interactive=False, log=log, optimizer=optimizer)
        elif cfg.strategy == "two-pass":
            model, _, skipped = two_pass_train(model, train_corpus, valid_corpus,
                                               vocab, tcfg, log=log,
                                               fresh_model_fn=lambda: cfg.build_model(len(vocab)))
            if skipped:
                print(f"skipped {skipped} sources with empty decodes")
        else:
            model, _, skipped = fine_tune(model, train_corpus, valid_corpus,
                                          vocab, tcfg, log=log)
            if skipped:
                print(f"skipped {skipped} sources with empty decodes")
    save_checkpoint(args.out, model, vocab, cfg.items(),
                    optimizer=optimizer if args.save_optimizer else None)
    print(f"checkpoint written to {args.out}")
    return EXIT_OK


def cmd_decode(args) -> int:
    model, vocab, snapshot, _ = load_checkpoint(args.checkpoint)
    defaults = {"beam_size": snapshot.get("beam_size", "4"),
                "max_len": snapshot.get("max_len", "32"),
                "alpha": snapshot.get("alpha", "0.6")}
    cfg = RunConfig()
    apply_overrides(cfg, defaults)
    for key in ("beam_size", "max_len", "alpha", "seed"):
        value = getattr(args, key, None)
        if value is not None:
            apply_overrides(cfg, {key: str(value)})
    cfg.validate()
    beam = cfg.beam_config()
    lines = _read_lines(args.input)
    outputs = []
    for line in lines:
        ids = [BOS] + vocab.encode_line(line) + [EOS]
        scorer = model.scorer(ids)
        if args.unidirectional:
            direction = L2R if args.unidirectional == "l2r" else R2L
            out_ids = unidirectional_beam_search(scorer, direction, beam)
        else:
            out_ids = sync_bidi_beam_search(scorer, beam)
        outputs.append(vocab.decode_line(out_ids))
    Path(args.output).write_text("".join(o + "\n" for o in outputs),
                                 encoding="utf-8")
    print(f"decoded {len(outputs)} lines to {args.output}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    hyps = _read_lines(args.hypotheses)
    refs = _read_reference_lines(args.references)
    if len(hyps) != len(refs):
        raise ConfigError(
            f"hypothesis/reference line counts differ: {len(hyps)} vs {len(refs)}")
    sources = _read_lines(args.sources) if args.sources else None
    report = full_report(hyps, refs, sources=sources, k=args.k,
                         case_insensitive=args.case_insensitive)
    print(report.text_block(), end="")
    if args.report:
        report.save(args.report)
    return EXIT_OK


def cmd_analyze(args) -> int:
    if not (1 <= len(args.hyp) <= 3):
        raise ConfigError("analyze compares between one and three hypothesis files")
    refs = _read_reference_lines(args.references)
    sources = _read_lines(args.sources) if args.sources else None
    edges = [int(e) for e in args.edges.split(",")] if args.edges else [5, 10, 20]
    names = [Path(h).name for h in args.hyp]
    print("metric\t" + "\t".join(names))
    rows: dict[str, list[str]] = {}
    for path in args.hyp:
        hyps = _read_lines(path)
        if len(hyps) != len(refs):
            raise ConfigError(f"{path}: line count {len(hyps)} != references {len(refs)}")
        first, last = match_accuracy_first_last(hyps, refs, k=args.k)
        rows.setdefault(f"match_first_{args.k}", []).append(f"{first:.2f}")
        rows.setdefault(f"match_last_{args.k}", []).append(f"{last:.2f}")
        for b, val in enumerate(position_bucket_precision(hyps, refs,
                                                          buckets=args.buckets)):
            rows.setdefault(f"position_bucket_{b}", []).append(f"{val:.2f}")
        rows.setdefault("bleu", []).append(f"{bleu(hyps, refs):.2f}")
        if sources is not None:
            for rec in length_bucket_bleu(hyps, refs, sources, edges):
                shown = "n/a" if rec["bleu"] is None else f"{rec['bleu']:.2f}"
                rows.setdefault(f"bleu_len_{rec['interval']}", []).append(shown)
    for name, cells in rows.items():
        print(name + "\t" + "\t".join(cells))
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write("metric\t" + "\t".join(names) + "\n")
            for name, cells in rows.items():
                fh.write(name + "\t" + "\t".join(cells) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bidiseq",
        description="Synchronous bidirectional sequence generation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a toy corpus")
    p.add_argument("--task", choices=("copy", "bracket"), required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-out")
    p.add_argument("--vocab-size", type=int, default=16)
    p.add_argument("--min-len", type=int, default=1)
    p.add_argument("--max-len", type=int, default=8)
    p.add_argument("--min-depth", type=int, default=1)
    p.add_argument("--max-depth", type=int, default=5)
    p.add_argument("--noise-symbols", type=int, default=2)
    _add_config_flags(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model with one of the strategies")
    p.add_argument("--train", required=True)
    p.add_argument("--valid")
    p.add_argument("--vocab")
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--save-optimizer", action="store_true")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", help="decode a source file with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--beam", dest="beam_size", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--max-len", dest="max_len", type=int)
    p.add_argument("--unidirectional", choices=("l2r", "r2l"))
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("evaluate", help="score hypotheses against references")
    p.add_argument("--hypotheses", required=True)
    p.add_argument("--references", required=True)
    p.add_argument("--sources")
    p.add_argument("--report")
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--case-insensitive", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="positional diagnostics for up to "
                                       "three hypothesis files")
    p.add_argument("--references", required=True)
    p.add_argument("--sources")
    p.add_argument("--hyp", action="append", required=True)
    p.add_argument("--k", type=int, default=4)
    p.add_argument("--buckets", type=int, default=10)
    p.add_argument("--edges")
    p.add_argument("--report")
    p.set_defaults(func=cmd_analyze)
    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except (ConfigError, TrainingConfigError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FileNotFoundError, IsADirectoryError) as exc:
        name = exc.filename if exc.filename else exc
        print(f"i/o error: missing or unreadable path: {name}", file=sys.stderr)
        return EXIT_IO
    except (CorpusFormatError, CheckpointError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
