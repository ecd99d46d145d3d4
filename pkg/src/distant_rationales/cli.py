"""Command-line entry point.

Every option can also come from a ``--config`` file holding ``key = value``
lines (``#`` starts a comment, keys use the option names with dashes or
underscores). Command-line flags override file values.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from .corpus import (
    SyntheticConfig,
    annotate_corpus,
    generate_synthetic,
    import_sst,
    load_corpus,
    load_lexicon,
    rationale_stats,
    save_corpus,
    save_lexicon,
)
from .experiments import ExperimentSpec, load_runs, perturbation_sweep, run_matrix, salience_trace_report, write_report
from .losses import METHODS, ConfigError
from .model import ModelConfig, Vocabulary, load_vectors
from .trainer import TrainConfig, train_run

log = logging.getLogger("distant_rationales")


class CliError(Exception):
    pass


def _floats(text: str) -> List[float]:
    return [float(x) for x in str(text).split(",") if x.strip()]


def _ints(text: str) -> List[int]:
    return [int(x) for x in str(text).split(",") if x.strip()]


def _methods(text: str) -> List[str]:
    return [x.strip() for x in str(text).split(",") if x.strip()]


SYNTHETIC = {f.name: f for f in fields(SyntheticConfig) if f.name != "seed"}
TRAIN_KEYS = ("batch_size", "epochs", "lr", "beta1", "beta2", "adam_eps", "weight_decay", "selection_metric")
MODEL_KEYS = ("embedding_dim", "kernel_widths", "kernels_per_width", "hidden_dim", "dropout", "init_scale")


def _add_synthetic(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("synthetic corpus")
    for name, f in SYNTHETIC.items():
        kind = float if f.type in (float, "float") else int
        g.add_argument(f"--{name.replace('_', '-')}", type=kind, default=None, metavar=kind.__name__.upper())


def _add_training(p: argparse.ArgumentParser, single: bool) -> None:
    g = p.add_argument_group("training")
    if single:
        g.add_argument("--method", choices=METHODS, default=None)
        g.add_argument("--lam", type=float, default=None)
    g.add_argument("--threshold", type=float, default=None, help="marginal-gate threshold")
    g.add_argument("--batch-size", type=int, default=None)
    g.add_argument("--epochs", type=int, default=None)
    g.add_argument("--lr", type=float, default=None)
    g.add_argument("--beta1", type=float, default=None)
    g.add_argument("--beta2", type=float, default=None)
    g.add_argument("--adam-eps", type=float, default=None)
    g.add_argument("--weight-decay", type=float, default=None)
    g.add_argument("--selection-metric", choices=("accuracy", "f1"), default=None)
    m = p.add_argument_group("model")
    m.add_argument("--embedding-dim", type=int, default=None)
    m.add_argument("--kernel-widths", type=_ints, default=None, metavar="W,W,...")
    m.add_argument("--kernels-per-width", type=int, default=None)
    m.add_argument("--hidden-dim", type=int, default=None)
    m.add_argument("--dropout", type=float, default=None)
    m.add_argument("--init-scale", type=float, default=None)


def _add_corpus_paths(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("corpus files (default: <out-dir>/{train,valid,test}.jsonl)")
    g.add_argument("--train", default=None)
    g.add_argument("--valid", default=None)
    g.add_argument("--test", default=None)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="key = value file; flags override it")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out-dir", default=None)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="distant-rationales", description="Salience-constrained text classification.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    sub.required = True

    p = sub.add_parser("generate", parents=[common], help="write a synthetic corpus and lexicon")
    _add_synthetic(p)

    p = sub.add_parser("annotate", parents=[common], help="mark lexicon words as rationales")
    p.add_argument("--input", default=None)
    p.add_argument("--lexicon", default=None)
    p.add_argument("--output", default=None)

    p = sub.add_parser("import-sst", parents=[common], help="convert treebank files to the corpus format")
    p.add_argument("--sst-dir", default=None, help="directory holding train.txt, dev.txt, test.txt")

    p = sub.add_parser("train", parents=[common], help="train one model")
    _add_corpus_paths(p)
    _add_training(p, single=True)
    p.add_argument("--vectors", default=None, help="pretrained vectors, 'token v1 ... vD' per line")

    for name, help_text in (("matrix", "compare methods over seeds"), ("perturb", "perturbation sweep")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        _add_corpus_paths(p)
        _add_synthetic(p)
        _add_training(p, single=False)
        p.add_argument("--methods", type=_methods, default=None, metavar="M,M,...")
        p.add_argument("--lams", type=_floats, default=None, metavar="L,L,...")
        p.add_argument("--seeds", type=int, default=None, help="number of seeds per setting")
        p.add_argument("--reference", default=None, help="method the t-tests compare against")
        if name == "perturb":
            p.add_argument("--removal", type=_floats, default=None, metavar="F,F,...",
                           help="shares of training rationales to drop")
            # --noise already names the generator's lexicon knob
            p.add_argument("--injection", type=_floats, default=None, metavar="F,F,...",
                           help="shares of extra noise rationales to add to training masks")

    for name, help_text in (("trace", "salience trace table"), ("report", "render tables and charts")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--runs", default=None, help="directory of run logs (default: <out-dir>/runs)")
        if name == "report":
            p.add_argument("--reference", default=None)
            p.add_argument("--no-charts", action="store_true")
    return parser


# ---------------------------------------------------------------------------
# config files

def read_config(path) -> Dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (x.strip() for x in line.split("=", 1))
            out[key.replace("-", "_")] = value
    return out


def merge_config(parser: argparse.ArgumentParser, args: argparse.Namespace) -> argparse.Namespace:
    """Fill options left unset on the command line from the config file."""
    if not args.config:
        return args
    values = read_config(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]  # noqa: SLF001
    actions = {a.dest: a for a in sub._actions}  # noqa: SLF001
    for key, raw in values.items():
        if key not in actions or key in ("config", "help"):
            raise CliError(f"{key}: unknown option for '{args.command}' in {args.config}")
        if getattr(args, key) is not None and getattr(args, key) is not False:
            continue
        action = actions[key]
        try:
            if action.const is True and action.nargs == 0:
                value = raw.lower() in ("1", "true", "yes", "on")
            else:
                value = action.type(raw) if action.type else raw
        except (TypeError, ValueError):
            raise CliError(f"{key}: invalid value {raw!r}") from None
        if action.choices and value not in action.choices:
            raise CliError(f"{key}: invalid choice {value!r} (choose from {', '.join(map(str, action.choices))})")
        setattr(args, key, value)
    return args


# ---------------------------------------------------------------------------
# commands

def _given(args, keys) -> Dict:
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _out(args) -> Path:
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _synthetic(args) -> Dict:
    return _given(args, SYNTHETIC)


def _model_overrides(args) -> Dict:
    mc = _given(args, MODEL_KEYS)
    if "kernel_widths" in mc:
        mc["kernel_widths"] = tuple(mc["kernel_widths"])
    return mc


def _corpus_paths(args, out: Path):
    return [getattr(args, n) or str(out / f"{n}.jsonl") for n in ("train", "valid", "test")]


def cmd_generate(args) -> int:
    out = _out(args)
    cfg = SyntheticConfig(seed=args.seed or 0, **_synthetic(args))
    train, valid, test, lexicon = generate_synthetic(cfg)
    for name, corpus in (("train", train), ("valid", valid), ("test", test)):
        save_corpus(corpus, out / f"{name}.jsonl")
    save_lexicon(lexicon, out / "lexicon.tsv")
    (out / "synthetic.json").write_text(json.dumps(asdict(cfg), indent=2, sort_keys=True) + "\n")
    stats = rationale_stats(train)
    print(f"wrote {len(train)}/{len(valid)}/{len(test)} sentences, {len(lexicon)} lexicon entries to {out}")
    print(f"train: {stats['rationales_per_sentence']:.2f} rationales per sentence, "
          f"{stats['with_rationale']:.1%} with at least one")
    return 0


def cmd_annotate(args) -> int:
    if not args.input or not args.lexicon:
        raise CliError("annotate: --input and --lexicon are required")
    corpus = annotate_corpus(load_corpus(args.input), load_lexicon(args.lexicon))
    output = args.output or str(_out(args) / Path(args.input).name)
    save_corpus(corpus, output)
    stats = rationale_stats(corpus)
    print(f"annotated {len(corpus)} sentences -> {output} "
          f"({stats['rationales_per_sentence']:.2f} rationales per sentence)")
    return 0


def cmd_import_sst(args) -> int:
    if not args.sst_dir:
        raise CliError("import-sst: --sst-dir is required")
    out = _out(args)
    train, valid, test, lexicon = import_sst(args.sst_dir)
    for name, corpus in (("train", train), ("valid", valid), ("test", test)):
        save_corpus(corpus, out / f"{name}.jsonl")
    save_lexicon(lexicon, out / "lexicon.tsv")
    print(f"imported {len(train)}/{len(valid)}/{len(test)} sentences, {len(lexicon)} lexicon entries to {out}")
    return 0


def cmd_train(args) -> int:
    out = _out(args)
    paths = _corpus_paths(args, out)
    train, valid, test = (load_corpus(p) for p in paths)
    tc = TrainConfig(**_given(args, TRAIN_KEYS + ("method", "lam", "threshold")), seed=args.seed or 0)
    mc = _model_overrides(args)
    vocab = embeddings = None
    if args.vectors:
        vocab = Vocabulary.build(inst.tokens for inst in train)
        dim = mc.get("embedding_dim", ModelConfig(vocab_size=2).embedding_dim)
        embeddings, found = load_vectors(args.vectors, vocab, dim, seed=tc.seed)
        log.info("pretrained vectors cover %d of %d vocabulary entries", found, len(vocab))
    record, model, vocab = train_run(train, valid, test, tc, mc, vocab=vocab, embeddings=embeddings)
    model.save(out / "model.npz", vocab)
    record.save(out / "run.jsonl")
    test_m = record.final.get("test", {})
    print(f"method={tc.method} lam={tc.lam:g} threshold={tc.threshold:g} best_epoch={record.best_epoch} "
          f"test_accuracy={test_m.get('accuracy', float('nan')):.4f} test_f1={test_m.get('f1', float('nan')):.4f}")
    print(f"wrote {out / 'model.npz'} and {out / 'run.jsonl'}")
    return 0


def _spec(args, out: Path) -> ExperimentSpec:
    train = _given(args, TRAIN_KEYS + ("threshold",))
    kw = dict(
        train=train,
        model=_model_overrides(args),
        seed=args.seed or 0,
        out_dir=str(out),
    )
    for key in ("methods", "lams", "seeds", "reference", "removal"):
        if getattr(args, key, None) is not None:
            kw[key] = getattr(args, key)
    if getattr(args, "injection", None) is not None:
        kw["noise"] = args.injection
    if args.train or args.valid or args.test:
        kw.update(train_path=args.train, valid_path=args.valid, test_path=args.test)
    else:
        kw["synthetic"] = _synthetic(args)
    return ExperimentSpec(**kw)


def cmd_matrix(args) -> int:
    out = _out(args)
    spec = _spec(args, out)
    report, _ = run_matrix(spec)
    text = report.to_tsv()
    (out / "comparison.tsv").write_text(text)
    sys.stdout.write(text)
    return 0 if report.complete else 1


def cmd_perturb(args) -> int:
    out = _out(args)
    spec = _spec(args, out)
    if not spec.removal and not spec.noise:
        raise CliError("perturb: give --removal and/or --injection fractions")
    tables, records = perturbation_sweep(spec)
    for kind, table in tables.items():
        text = table.to_tsv()
        (out / f"sweep_{kind}.tsv").write_text(text)
        sys.stdout.write(text)
    return 0 if all(r.status == "ok" for r in records) else 1


def _runs(args) -> List:
    runs = args.runs or str(Path(args.out_dir or ".") / "runs")
    if not Path(runs).is_dir():
        raise CliError(f"runs: no such directory {runs}")
    records = load_runs(runs)
    if not records:
        raise CliError(f"runs: no run logs in {runs}")
    return records


def cmd_trace(args) -> int:
    report = salience_trace_report(_runs(args))
    text = report.to_tsv()
    if args.out_dir:
        (_out(args) / "salience_trace.tsv").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_report(args) -> int:
    out = _out(args)
    written = write_report(_runs(args), out, reference=args.reference or "base", charts=not args.no_charts)
    for path in written:
        print(path)
    return 0


COMMANDS = {
    "generate": cmd_generate,
    "annotate": cmd_annotate,
    "import-sst": cmd_import_sst,
    "train": cmd_train,
    "matrix": cmd_matrix,
    "perturb": cmd_perturb,
    "trace": cmd_trace,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 with usage on unknown flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args = merge_config(parser, args)
        return COMMANDS[args.command](args)
    except (CliError, ConfigError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"{parser.prog} {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
