"""Command-line entry points: train, eval, explain, synth.

Configuration is a plain-text key-value file (``key = value``, ``hp.name``
for hyperparameters, ``#`` comments); ``--profile`` seeds the hyperparameters
and ``--set key=value`` overrides individual entries. Exit codes: 0 success,
1 usage, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, fields, replace
from pathlib import Path

from . import data as data_mod
from . import interpret, model
from .autodiff import DegenerateMaskError, NonFiniteError, ShapeError
from .data import DatasetFormatError, DegenerateInputError, SnapshotResolver, SyntheticSpec
from .metrics import MetricError
from .model import CheckpointError, DivergenceError, HyperParams, ModelParams


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunConfig:
    dataset: str | None = None
    train: str | None = None
    val: str | None = None
    test: str | None = None
    embeddings: str | None = None
    entities: str | None = None
    mode: str = "N+C+E"
    out: str = "run"
    split_seed: int = 0
    hp: HyperParams = None

    def validate_paths(self, need_dataset: bool = True) -> None:
        if need_dataset:
            if self.dataset is None and not (self.train and self.val and self.test):
                raise UsageError("config needs either 'dataset' or all of train/val/test")
        if self.embeddings is None:
            raise UsageError("config needs an 'embeddings' path")
        for key in ("dataset", "train", "val", "test", "embeddings", "entities"):
            value = getattr(self, key)
            if value is not None and not Path(value).exists():
                raise DatasetFormatError(f"configured {key} path does not exist: {value}")
        if self.mode not in model.MODES:
            raise UsageError(f"mode must be one of {model.MODES}, got '{self.mode}'")


def _parse_value(raw: str):
    raw = raw.strip()
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            continue
    return raw


def parse_config_file(path) -> dict:
    entries = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise UsageError(f"{path}:{line_no}: expected 'key = value'")
            key, value = stripped.split("=", 1)
            entries[key.strip()] = _parse_value(value)
    return entries


_HP_KEYS = {f.name for f in fields(HyperParams)}


def build_run_config(args) -> RunConfig:
    entries = {}
    if getattr(args, "config", None):
        if not Path(args.config).exists():
            raise DatasetFormatError(f"config file does not exist: {args.config}")
        entries.update(parse_config_file(args.config))
    for override in getattr(args, "set", None) or []:
        if "=" not in override:
            raise UsageError(f"--set needs key=value, got '{override}'")
        key, value = override.split("=", 1)
        entries[key.strip()] = _parse_value(value)

    hp = HyperParams.profile(args.profile) if getattr(args, "profile", None) else HyperParams()
    hp_overrides = {}
    config = RunConfig(hp=hp)
    for key, value in entries.items():
        if key.startswith("hp."):
            name = key[3:]
            if name not in _HP_KEYS:
                raise UsageError(f"unknown hyperparameter 'hp.{name}'")
            caster = float if name == "learning_rate" else int
            try:
                hp_overrides[name] = caster(value)
            except (TypeError, ValueError) as e:
                raise UsageError(f"hp.{name} needs a {caster.__name__}, got {value!r}") from e
        elif key in ("dataset", "train", "val", "test", "embeddings", "entities", "mode", "out"):
            setattr(config, key, str(value))
        elif key == "split_seed":
            config.split_seed = int(value)
        elif key == "seed":
            hp_overrides.setdefault("seed", int(value))
        else:
            raise UsageError(f"unknown config key '{key}'")
    if hp_overrides:
        config.hp = replace(hp, **hp_overrides)
    if getattr(args, "mode", None):
        config.mode = args.mode
    if getattr(args, "seed", None) is not None:
        config.hp = replace(config.hp, seed=args.seed)
    if getattr(args, "out", None):
        config.out = args.out
    config.hp.validate()
    return config


@dataclass
class PreparedData:
    train: list
    val: list
    test: list
    vocab: data_mod.Vocabulary
    embeddings: data_mod.EmbeddingTable
    warnings: list


def prepare_data(config: RunConfig, hp: HyperParams) -> PreparedData:
    """Read, resolve, split and pad the corpus into model-ready samples."""
    resolver = SnapshotResolver(config.entities) if config.entities else None
    warnings = []

    def read(path):
        docs, warns = data_mod.read_dataset(path, strict=False,
                                            max_sentences_per_comment=hp.max_sentences_per_comment)
        warnings.extend(warns)
        return data_mod.resolve_documents(docs, resolver)

    if config.dataset:
        docs = read(config.dataset)
        train_docs, val_docs, test_docs = data_mod.split_dataset(docs, config.split_seed)
    else:
        train_docs, val_docs, test_docs = read(config.train), read(config.val), read(config.test)
    vocab = data_mod.Vocabulary.build(train_docs + val_docs + test_docs)
    table = data_mod.load_embeddings(config.embeddings, vocab)
    if table.dim != hp.embedding_dim:
        raise CheckpointError(
            f"embedding file is {table.dim}-dimensional but the model expects "
            f"{hp.embedding_dim}")

    def encode(docs):
        samples = []
        for doc in docs:
            try:
                samples.append(data_mod.encode_document(doc, vocab, hp))
            except DegenerateInputError as e:
                warnings.append(f"skipped {doc.doc_id}: {e}")
        return samples

    return PreparedData(encode(train_docs), encode(val_docs), encode(test_docs),
                        vocab, table, warnings)


def _write_metrics(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_epoch_csv(path, history) -> None:
    columns = ["epoch", "train_loss", "val_accuracy", "val_precision_pos",
               "val_recall_pos", "val_f1_pos", "val_precision_macro",
               "val_recall_macro", "val_f1_macro", "val_pr_auc"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in history:
            writer.writerow([row.epoch, repr(row.train_loss)] +
                            [repr(row.val[c[4:]]) for c in columns[2:]])


def cmd_train(args) -> int:
    config = build_run_config(args)
    config.validate_paths()
    hp = config.hp
    prepared = prepare_data(config, hp)
    for warning in prepared.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    if not prepared.train or not prepared.val:
        raise DatasetFormatError("train/validation splits are empty after encoding")
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    params = ModelParams.create(hp)
    result = model.train(prepared.train, prepared.val, hp, params,
                         prepared.embeddings, config.mode)
    ckpt_path = out / "checkpoint.bin"
    model.save_checkpoint(ckpt_path, hp, result.params)
    _write_epoch_csv(out / "epochs.csv", result.history)

    # score the test split with the checkpoint as saved, so a later eval of
    # the same file reproduces these numbers exactly
    saved_hp, values = model.load_checkpoint(ckpt_path)
    saved_params = model.restore_params(saved_hp, values)
    test_report = model.evaluate(prepared.test, saved_params, prepared.embeddings,
                                 saved_hp, config.mode)
    _write_metrics(out / "metrics.json", test_report)
    print(f"best epoch {result.best_epoch} (val macro-F1 {result.best_val_f1:.4f})")
    print(f"test metrics: {json.dumps(test_report, sort_keys=True)}")
    print(f"artifacts written to {out}")
    return 0


def _load_for_eval(args):
    hp, values = model.load_checkpoint(args.checkpoint)
    params = model.restore_params(hp, values)
    config = build_run_config(args)
    config.hp = hp
    config.validate_paths()
    prepared = prepare_data(config, hp)
    return hp, params, config, prepared


def _pick_split(prepared: PreparedData, split: str) -> list:
    if split == "train":
        return prepared.train
    if split == "val":
        return prepared.val
    if split == "test":
        return prepared.test
    return prepared.train + prepared.val + prepared.test


def cmd_eval(args) -> int:
    hp, params, config, prepared = _load_for_eval(args)
    samples = _pick_split(prepared, args.split)
    if not samples:
        raise DatasetFormatError(f"split '{args.split}' has no usable samples")
    report = model.evaluate(samples, params, prepared.embeddings, hp, config.mode)
    print(json.dumps(report, indent=2, sort_keys=True))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        _write_metrics(args.out, report)
    return 0


def cmd_explain(args) -> int:
    hp, params, config, prepared = _load_for_eval(args)
    samples = _pick_split(prepared, args.split)
    by_id = {s.doc_id: s for s in samples}
    wanted = [i.strip() for i in args.ids.split(",") if i.strip()] if args.ids else list(by_id)
    entries, skipped = [], []
    for doc_id in wanted:
        sample = by_id.get(doc_id)
        if sample is None:
            skipped.append(doc_id)
            continue
        logits, attn = model.run_sample(model.ablate(sample, config.mode), params,
                                        prepared.embeddings, hp)
        probs = model.predict_probs(logits)
        entries.append(interpret.report_entry(sample.doc_id, sample.label, probs, attn))
    if not entries:
        raise DatasetFormatError("no requested sample ids were found")
    out = Path(args.out or config.out)
    out.mkdir(parents=True, exist_ok=True)
    interpret.write_report(out / "attention_report.json", entries, skipped)
    written = interpret.export_heatmaps(out, entries)
    print(f"report for {len(entries)} samples "
          f"({len(skipped)} skipped) in {out}")
    for path in written:
        print(f"  {path}")
    return 0


def cmd_synth(args) -> int:
    signal = tuple(s.strip() for s in args.signal.split(",") if s.strip())
    spec = SyntheticSpec(size=args.size, balance=args.balance, signal=signal,
                         seed=args.seed, embedding_dim=args.dim,
                         entity_slots=args.entity_slots)
    try:
        spec.validate()
    except ValueError as e:
        raise UsageError(str(e)) from e
    paths = data_mod.gen_synthetic(spec, args.out)
    config_path = Path(args.out) / "config.cfg"
    hp = HyperParams.profile("synthetic")
    with open(config_path, "w", encoding="utf-8") as fh:
        fh.write(f"dataset = {paths['dataset']}\n")
        fh.write(f"entities = {paths['entities']}\n")
        fh.write(f"embeddings = {paths['embeddings']}\n")
        fh.write(f"out = {Path(args.out) / 'run'}\n")
        fh.write(f"split_seed = {args.seed}\n")
        fh.write(f"hp.embedding_dim = {args.dim}\n")
        fh.write(f"hp.hidden_size = {hp.hidden_size}\n")
        fh.write(f"hp.max_words = {hp.max_words}\n")
        fh.write(f"hp.max_news_sentences = {hp.max_news_sentences}\n")
        fh.write(f"hp.max_entity_sentences = {args.entity_slots}\n")
        fh.write(f"hp.max_comment_sentences = {hp.max_comment_sentences}\n")
        fh.write(f"hp.batch_size = {hp.batch_size}\n")
        fh.write(f"hp.learning_rate = {hp.learning_rate}\n")
        fh.write(f"hp.seed = {args.seed}\n")
    for name, path in paths.items():
        print(f"{name}: {path}")
    print(f"config: {config_path}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="dualcan",
                     description="dual co-attention fake-news classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file")
        p.add_argument("--profile", choices=["gossipcop", "coaid", "synthetic"],
                       help="hyperparameter profile")
        p.add_argument("--mode", choices=list(model.MODES),
                       help="input ablation mode")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config entry")

    p_train = sub.add_parser("train", help="train and write checkpoint + logs")
    common(p_train)

    p_eval = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--split", choices=["train", "val", "test", "full"], default="test")
    common(p_eval)

    p_explain = sub.add_parser("explain", help="export attention reports and heatmaps")
    p_explain.add_argument("--checkpoint", required=True)
    p_explain.add_argument("--ids", help="comma-separated sample ids (default: whole split)")
    p_explain.add_argument("--split", choices=["train", "val", "test", "full"], default="test")
    common(p_explain)

    p_synth = sub.add_parser("synth", help="generate a synthetic corpus")
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--size", type=int, default=200)
    p_synth.add_argument("--balance", type=float, default=0.5)
    p_synth.add_argument("--signal", default="news,comments,entities",
                         help="comma-separated cue channels")
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--dim", type=int, default=16, help="embedding dimension")
    p_synth.add_argument("--entity-slots", type=int, default=8)
    return parser


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "explain": cmd_explain,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except (DatasetFormatError, DegenerateInputError, CheckpointError, MetricError,
            DegenerateMaskError, ShapeError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except (NonFiniteError, DivergenceError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        # remaining ValueErrors come from configuration validation
        print(f"usage error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
