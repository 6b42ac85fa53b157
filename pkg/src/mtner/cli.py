"""Command-line driver: data generation, training, evaluation and experiments.

Every command takes one ``--seed``; named sub-seeds (data, split, init,
shuffle) are derived from it. Config files hold ``key=value`` lines for
either the model or the training config. Flags given on the command line
override file values.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional

from .config import build, load_kv
from .corpus import (
    CorpusError,
    SynthConfig,
    Vocab,
    generate_synthetic,
    load_corpus,
    load_type_names,
    save_corpus,
    save_type_names,
    split_corpus,
    standard_corpus,
)
from .gradcheck import gradient_suite
from .model import ConfigError, ModelConfig, MultiTaskNER
from .training import (
    DEFAULT_W_GRID,
    TrainConfig,
    TrainingError,
    dumps,
    evaluate,
    format_table,
    metrics_document,
    run_ablation,
    sub_seed,
    sweep_w,
    train,
)
from .typebase import LexiconError, lexicon_from_corpus, load_lexicon, save_lexicon

GRAD_TOLERANCE = 1e-4
MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"vocab_size", "n_types"}
TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}


class UsageError(Exception):
    """Bad flag combination; exits with status 2."""


# -- shared plumbing ---------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key=value file (model and training keys)")
    p.add_argument("--corpus", type=Path, help="JSON-lines corpus")
    p.add_argument("--dev", type=Path, help="dev corpus; default is a seeded split of --corpus")
    p.add_argument("--types", type=Path, help="type names, one per line")
    p.add_argument("--lexicon", type=Path, help="type lexicon TSV: type, phrase, frequency")
    p.add_argument("--out", type=Path, default=Path("runs"), help="output directory")
    p.add_argument("--seed", type=int, help="run seed (default 0)")
    p.add_argument("--jobs", type=int, default=1, help="parallel runs for ablate / sweep-w")
    p.add_argument("--use-rp", action="store_true", help="relation prediction task")
    p.add_argument("--use-tra", action="store_true", help="token relation attention (needs --use-rp)")
    p.add_argument("--use-eta", action="store_true", help="entity type attention")
    p.add_argument("--w", type=float, help="relation loss weight")
    p.add_argument("--alpha", type=float, help="focal loss alpha")
    p.add_argument("--tau", type=float, help="focal loss tau")
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr-schedule", choices=("constant", "linear"))
    p.add_argument("--d-h", type=int, help="hidden size")


def _file_values(path: Optional[Path]) -> tuple:
    if path is None:
        return {}, {}
    values = load_kv(path)
    unknown = set(values) - MODEL_KEYS - TRAIN_KEYS
    if unknown:
        raise UsageError(f"{path}: unknown config keys {sorted(unknown)}")
    return ({k: v for k, v in values.items() if k in MODEL_KEYS},
            {k: v for k, v in values.items() if k in TRAIN_KEYS})


def resolve_configs(args, vocab_size: int, n_types: int) -> tuple:
    """(ModelConfig, TrainConfig) from the config file, then flags on top.

    Giving any of the ablation flags selects exactly those components;
    with none of them the file values (or the full model) apply.
    """
    model_vals, train_vals = _file_values(args.config)
    if args.use_rp or args.use_tra or args.use_eta:
        if args.use_tra and not args.use_rp:
            raise UsageError("--use-tra requires --use-rp: relation attention reads the relation grid")
        model_vals.update(use_rp=args.use_rp, use_tra=args.use_tra, use_eta=args.use_eta)
    if args.d_h is not None:
        model_vals["d_h"] = args.d_h
    for key in ("w", "alpha", "tau", "epochs", "lr", "batch_size", "lr_schedule", "seed"):
        val = getattr(args, key, None)
        if val is not None:
            train_vals[key] = val
    model_vals.update(vocab_size=vocab_size, n_types=n_types)
    try:
        mc = build(ModelConfig, model_vals)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    return mc, build(TrainConfig, train_vals)


def _require(args, *names) -> None:
    missing = [f"--{n}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"missing required flag(s): {' '.join(missing)}")


class Data:
    """Corpus, dev set, vocabulary and lexicon weights for one command."""

    def __init__(self, args, seed: int, dev_fraction: float = 0.1):
        _require(args, "corpus", "types")
        self.type_names = load_type_names(args.types)
        corpus = load_corpus(args.corpus, len(self.type_names))
        if args.dev is not None:
            self.train, self.dev = corpus, load_corpus(args.dev, len(self.type_names))
        else:
            self.train, self.dev = split_corpus(corpus, sub_seed(seed, "split"), dev_fraction)
        self.lexicon = load_lexicon(args.lexicon, self.type_names) if args.lexicon else None
        self.vocab = Vocab(tok for s in self.train for tok in s.tokens)
        if self.lexicon is not None:
            for ents in self.lexicon.entries:
                for phrase, _ in ents:
                    for tok in phrase:
                        self.vocab.add(tok)

    @property
    def weights(self):
        return None if self.lexicon is None else self.lexicon.weight_matrix(self.vocab)


def write_manifest(out: Path, command: str, args, resolved: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config_path": str(args.config) if args.config else None,
        "argv": sys.argv[1:],
        "resolved": resolved,
        "seed": resolved.get("train", {}).get("seed"),
        "out": str(out),
        "started": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _configs_dict(mc: ModelConfig, tc: TrainConfig) -> dict:
    return {"model": dataclasses.asdict(mc), "train": dataclasses.asdict(tc)}


# -- commands --------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    rates = {"flat": args.flat_rate, "nested": args.nested_rate, "discontinuous": args.disc_rate}
    if any(v is not None for v in rates.values()):
        rates = {k: (v or 0.0) for k, v in rates.items()}
    else:
        rates = SynthConfig().rates
    args.out.mkdir(parents=True, exist_ok=True)
    if args.standard:
        corpus, dev, cfg = standard_corpus()
        save_corpus(dev, args.out / "dev.jsonl")
    else:
        cfg = SynthConfig(n_sentences=args.sentences, n_types=args.n_types, rates=rates)
        corpus = generate_synthetic(cfg, sub_seed(args.seed, "data"))
    names = cfg.type_names()
    save_corpus(corpus, args.out / "corpus.jsonl")
    save_type_names(names, args.out / "types.txt")
    save_lexicon(lexicon_from_corpus(corpus, names), args.out / "lexicon.tsv")
    print(f"wrote {len(corpus)} sentences, {len(names)} types to {args.out}")
    return 0


def cmd_train(args) -> int:
    seed = args.seed if args.seed is not None else 0
    data = Data(args, seed)
    mc, tc = resolve_configs(args, len(data.vocab), len(data.type_names))
    write_manifest(args.out, "train", args, _configs_dict(mc, tc))
    model = MultiTaskNER(mc, data.weights, seed=sub_seed(tc.seed, "init"))
    model, history = train(data.train, model, tc, data.vocab, data.dev)
    final = evaluate(model, data.dev, data.vocab, tc.max_decode_len)
    doc = metrics_document("train", mc, tc, history, final)
    model.save(args.out / "model.ckpt")
    (args.out / "model.cfg").write_text(mc.to_text())
    data.vocab.save(args.out / "vocab.txt")
    save_type_names(data.type_names, args.out / "types.txt")
    if data.lexicon is not None:
        save_lexicon(data.lexicon, args.out / "lexicon.tsv")
    (args.out / "metrics.json").write_text(dumps(doc))
    print(format_table([{"name": mc.ablation_name, **doc}]), end="")
    return 0


def cmd_eval(args) -> int:
    _require(args, "model", "corpus")
    mdir = args.model
    mc = ModelConfig.from_file(mdir / "model.cfg")
    vocab = Vocab.load(mdir / "vocab.txt")
    names = load_type_names(mdir / "types.txt")
    weights = None
    if (mdir / "lexicon.tsv").exists():
        weights = load_lexicon(mdir / "lexicon.tsv", names).weight_matrix(vocab)
    model = MultiTaskNER(mc, weights)
    model.load(mdir / "model.ckpt")
    corpus = load_corpus(args.corpus, len(names))
    write_manifest(args.out, "eval", args, {"model_dir": str(mdir), "corpus": str(args.corpus),
                                            "model": dataclasses.asdict(mc)})
    metrics = evaluate(model, corpus, vocab)
    doc = {"run_id": "eval", "final": metrics.final(), "n_gold": metrics.n_gold,
           "n_pred": metrics.n_pred, "n_discarded": metrics.n_discarded}
    (args.out / "eval.json").write_text(dumps(doc))
    print(format_table([{"name": mc.ablation_name, **doc}]), end="")
    return 0


def cmd_ablate(args) -> int:
    seeds = args.seeds or [args.seed if args.seed is not None else 0]
    data = Data(args, seeds[0])
    mc, tc = resolve_configs(args, len(data.vocab), len(data.type_names))
    write_manifest(args.out, "ablate", args, {**_configs_dict(mc, tc), "seeds": seeds})
    rows = run_ablation(data.train, data.dev, data.vocab, mc, tc, data.weights, seeds, args.jobs)
    (args.out / "ablation.json").write_text(dumps(rows))
    print(format_table(rows), end="")
    return 0


def cmd_sweep_w(args) -> int:
    seed = args.seed if args.seed is not None else 0
    data = Data(args, seed)
    mc, tc = resolve_configs(args, len(data.vocab), len(data.type_names))
    w_values = args.w_values if args.w_values is not None else list(DEFAULT_W_GRID)
    write_manifest(args.out, "sweep-w", args, {**_configs_dict(mc, tc), "w_values": w_values})
    rows = sweep_w(data.train, data.dev, data.vocab, mc, tc, w_values, data.weights, args.jobs)
    (args.out / "sweep_w.json").write_text(dumps(rows))
    print(format_table(rows, key="w"), end="")
    return 0


def cmd_grad_check(args) -> int:
    seed = args.seed if args.seed is not None else 0
    report = gradient_suite(d_h=args.d_h or 8, n_probe=args.probes, seed=seed)
    for group, err in report.items():
        print(f"{group:<16} {err:.3e}")
    worst = max(report.values())
    print(f"max relative error {worst:.3e}")
    return 0 if worst <= GRAD_TOLERANCE else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtner", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic corpus, type names and lexicon")
    p.add_argument("--sentences", type=int, default=200)
    p.add_argument("--n-types", type=int, default=4)
    p.add_argument("--flat-rate", type=float)
    p.add_argument("--nested-rate", type=float)
    p.add_argument("--disc-rate", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=Path("data"))
    p.add_argument("--standard", action="store_true",
                   help="the fixed 2000/200 benchmark split (corpus.jsonl + dev.jsonl); ignores size flags")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model and score it on dev")
    _common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a trained model directory on a corpus")
    _common(p)
    p.add_argument("--model", type=Path, help="directory written by train")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the four ablation arms")
    _common(p)
    p.add_argument("--seeds", type=int, nargs="+", help="one run per seed and arm")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep-w", help="one training per relation loss weight")
    _common(p)
    p.add_argument("--w-values", type=float, nargs="+")
    p.set_defaults(func=cmd_sweep_w)

    p = sub.add_parser("grad-check", help="finite-difference audit of every parameter group")
    p.add_argument("--seed", type=int)
    p.add_argument("--d-h", type=int)
    p.add_argument("--probes", type=int, default=30)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"mtner {args.command}: {exc}", file=sys.stderr)
        return 2
    except (OSError, CorpusError, LexiconError, TrainingError, ValueError) as exc:
        print(f"mtner {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
