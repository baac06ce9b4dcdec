"""Command-line entry point wiring the full pipeline.

Subcommands: synth, prepare, pretrain, finetune, predict, evaluate, ensemble,
baseline.  Every run writes a manifest (resolved config, seed, input/output
hashes) next to its primary output, so identical manifests imply identical
artifacts.  Config files are JSON; explicit flags win over config-file values.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

from . import baselines, corpus, evaluation, finetune, pretrain
from .encoder import EncoderConfig, load_checkpoint, save_checkpoint
from .errors import (
    AcrodisError,
    FormatError,
    ParameterError,
    ValidationError,
)

DEFAULT_OUT_ENV = "ACRODIS_OUT_DIR"


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _require_file(path: str | None, what: str) -> Path:
    if path is None:
        raise ValidationError(f"missing required path for {what}")
    p = Path(path)
    if not p.is_file():
        raise ValidationError(f"{what} file not found: {p}")
    return p


def _write_manifest(target: Path, subcommand: str, config: dict, seed,
                    inputs: list[Path], outputs: list[Path]) -> None:
    manifest = {
        "subcommand": subcommand,
        "seed": seed,
        "config": config,
        "inputs": {str(p): _sha256(p) for p in inputs},
        "outputs": {str(p): _sha256(p) for p in outputs},
    }
    if target.is_dir():
        path = target / "manifest.json"
    else:
        path = target.with_name(target.name + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _merge_config(cls, config_path: str | None, overrides: dict):
    """Config file first, explicit flags win."""
    values: dict = {}
    if config_path:
        raw = json.loads(_require_file(config_path, "config").read_text())
        if not isinstance(raw, dict):
            raise FormatError(f"config file {config_path}: expected a JSON object")
        known = {f.name for f in fields(cls)}
        values.update({k: v for k, v in raw.items() if k in known})
    values.update({k: v for k, v in overrides.items() if v is not None})
    return cls(**values)


def _out_dir(path: str | None) -> Path:
    base = path or os.environ.get(DEFAULT_OUT_ENV) or "."
    out = Path(base)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_predictions_file(path: Path) -> dict[str, str]:
    raw = json.loads(path.read_text())
    if not isinstance(raw, list):
        raise FormatError(f"{path}: expected a JSON array of id/label records")
    out = {}
    for record in raw:
        if "id" not in record or "label" not in record:
            raise FormatError(f"{path}: record without id/label: {record!r}")
        out[str(record["id"])] = record["label"]
    return out


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    out = _out_dir(args.out_dir)
    examples, dictionary = corpus.generate_synthetic(
        num_acronyms=args.num_acronyms,
        senses_per_acronym=args.senses,
        examples_per_sense=args.examples_per_sense,
        cue_strength=args.cue_strength,
        seed=args.seed,
        out_dir=out,
    )
    stats = corpus.split_stats(examples)
    print(f"wrote {stats.total} examples to {out} "
          f"(train={stats.counts['train']} dev={stats.counts['dev']} test={stats.counts['test']})")
    outputs = [out / f"{s}.json" for s in corpus.SPLITS] + [out / "dictionary.json"]
    _write_manifest(out, "synth", {
        "num_acronyms": args.num_acronyms, "senses": args.senses,
        "examples_per_sense": args.examples_per_sense, "cue_strength": args.cue_strength,
    }, args.seed, [], outputs)
    return 0


def cmd_prepare(args) -> int:
    dict_path = _require_file(args.dict, "dictionary")
    data_path = _require_file(args.data, "dataset")
    dictionary = corpus.load_dictionary(dict_path)
    examples = corpus.load_dataset(data_path, dictionary, split="train")
    inputs = [dict_path, data_path]
    for split, path in (("dev", args.dev), ("test", args.test)):
        if path:
            p = _require_file(path, f"{split} dataset")
            examples += corpus.load_dataset(p, dictionary, split=split)
            inputs.append(p)
    vocab = corpus.build_vocabulary(examples, dictionary, min_freq=args.min_freq)
    stats = corpus.split_stats(examples)
    out = _out_dir(args.out_dir)
    vocab_path = out / "vocab.json"
    vocab_path.write_text(json.dumps(vocab.token_to_id, indent=2, sort_keys=True) + "\n")
    stats_path = out / "stats.json"
    stats_path.write_text(json.dumps(
        {"counts": stats.counts, "ratios": stats.ratios, "total": stats.total,
         "vocab_size": vocab.size}, indent=2, sort_keys=True) + "\n")
    for split in corpus.SPLITS:
        print(f"{split}: {stats.counts[split]} ({stats.ratios[split]:.2f}%)")
    print(f"vocabulary size: {vocab.size}")
    _write_manifest(out, "prepare", {"min_freq": args.min_freq}, None,
                    inputs, [vocab_path, stats_path])
    return 0


def cmd_pretrain(args) -> int:
    dict_path = _require_file(args.dict, "dictionary")
    train_path = _require_file(args.train, "training dataset")
    dictionary = corpus.load_dictionary(dict_path)
    examples = corpus.load_dataset(train_path, dictionary, split="train")
    overrides = {
        "steps_phase1": args.steps_phase1, "steps_phase2": args.steps_phase2,
        "batch_size": args.batch_size, "tau": args.tau, "lr": args.lr,
        "warmup_fraction": args.warmup_fraction, "weight_decay": args.weight_decay,
        "seed": args.seed, "negatives": args.negatives, "mlm_rate": args.mlm_rate,
    }
    cfg = _merge_config(pretrain.PretrainConfig, args.config, overrides)
    vocab = corpus.build_vocabulary(examples, dictionary, min_freq=1)
    enc_overrides = {
        "hidden_dim": args.hidden_dim, "num_layers": args.num_layers,
        "num_heads": args.num_heads, "ffn_dim": args.ffn_dim,
        "max_sequence_length": args.max_seq_len, "dropout_rate": args.dropout,
    }
    enc_values = {"vocab_size": vocab.size}
    if args.config:
        raw = json.loads(Path(args.config).read_text())
        known = {f.name for f in fields(EncoderConfig)}
        enc_values.update(
            {k: v for k, v in raw.get("encoder", {}).items() if k in known}
        )
    enc_values.update({k: v for k, v in enc_overrides.items() if v is not None})
    enc_values["vocab_size"] = vocab.size
    enc_cfg = EncoderConfig(**enc_values)
    log_path = Path(args.log) if args.log else None
    bundle, log = pretrain.run_pretraining(
        cfg, examples, dictionary, encoder_config=enc_cfg, vocab=vocab, log_path=log_path
    )
    out_path = save_checkpoint(args.out, bundle)
    print(f"pre-trained for {cfg.total_steps} steps "
          f"(phase1={cfg.steps_phase1}, phase2={cfg.steps_phase2}); checkpoint: {out_path}")
    outputs = [out_path] + ([log_path] if log_path else [])
    _write_manifest(out_path, "pretrain",
                    {**asdict(cfg), "encoder": asdict(enc_cfg)}, cfg.seed,
                    [dict_path, train_path], outputs)
    return 0


def cmd_finetune(args) -> int:
    ckpt_path = _require_file(args.checkpoint, "checkpoint")
    dict_path = _require_file(args.dict, "dictionary")
    train_path = _require_file(args.train, "training dataset")
    dictionary = corpus.load_dictionary(dict_path)
    bundle = load_checkpoint(ckpt_path)
    train_examples = corpus.load_dataset(train_path, dictionary, split="train")
    dev_examples = []
    inputs = [ckpt_path, dict_path, train_path]
    if args.dev:
        dev_path = _require_file(args.dev, "dev dataset")
        dev_examples = corpus.load_dataset(dev_path, dictionary, split="dev")
        inputs.append(dev_path)
    overrides = {
        "epochs": args.epochs, "batch_size": args.batch_size,
        "lr_start": args.lr_start, "lr_end": args.lr_end,
        "warmup_epochs": args.warmup_epochs, "lambda_weight": getattr(args, "lambda"),
        "tau": args.tau, "negatives": args.negatives,
        "proj_hidden": args.proj_hidden, "proj_out": args.proj_out, "seed": args.seed,
    }
    cfg = _merge_config(finetune.FinetuneConfig, args.config, overrides)
    log_path = Path(args.log) if args.log else None
    model, log = finetune.run_finetuning(
        bundle, train_examples, dev_examples, dictionary, cfg, log_path=log_path
    )
    out_path = save_checkpoint(args.out, model)
    best = max((e.get("dev_macro_f1", 0.0) for e in log), default=None)
    msg = f"fine-tuned for {cfg.epochs} epochs; model: {out_path}"
    if best is not None and log:
        msg += f"; best dev macro F1: {best:.4f}"
    print(msg)
    outputs = [out_path] + ([log_path] if log_path else [])
    _write_manifest(out_path, "finetune", asdict(cfg), cfg.seed, inputs, outputs)
    return 0


def cmd_predict(args) -> int:
    model_path = _require_file(args.model, "model checkpoint")
    dict_path = _require_file(args.dict, "dictionary")
    data_path = _require_file(args.data, "dataset")
    dictionary = corpus.load_dictionary(dict_path)
    bundle = load_checkpoint(model_path)
    examples = corpus.load_dataset(data_path, dictionary, split=args.split)
    scored = finetune.predict_all(examples, dictionary, bundle)
    out_path = Path(args.out)
    finetune.save_predictions(scored, out_path)
    outputs = [out_path]
    if args.probs:
        probs_path = Path(args.probs)
        finetune.save_probabilities(scored, probs_path)
        outputs.append(probs_path)
    print(f"wrote {len(scored)} predictions to {out_path}")
    _write_manifest(out_path, "predict", {"split": args.split}, None,
                    [model_path, dict_path, data_path], outputs)
    return 0


def cmd_evaluate(args) -> int:
    pred_path = _require_file(args.pred, "predictions")
    gold_path = _require_file(args.gold, "gold labels")
    predictions = _load_predictions_file(pred_path)
    raw = json.loads(gold_path.read_text())
    if not isinstance(raw, list):
        raise FormatError(f"{gold_path}: expected a JSON array")
    gold = {}
    for record in raw:
        if "label" in record and record["label"] is not None:
            gold[str(record["id"])] = corpus.normalize_phrase(record["label"])
    if not gold:
        raise ValidationError(f"{gold_path}: no labeled records")
    report = evaluation.macro_metrics(predictions, gold)
    print(report.as_table())
    print(f"macro_precision {report.macro_precision:.2f}")
    print(f"macro_recall {report.macro_recall:.2f}")
    print(f"macro_f1 {report.macro_f1:.2f}")
    out_path = Path(args.out) if args.out else _out_dir(None) / "report.json"
    report.save(out_path)
    _write_manifest(out_path, "evaluate", {}, None, [pred_path, gold_path], [out_path])
    return 0


def cmd_ensemble(args) -> int:
    if len(args.weights) != len(args.probs):
        raise ParameterError("need exactly one weight per probability table")
    tables = []
    inputs = []
    for p in args.probs:
        path = _require_file(p, "probability table")
        tables.append(json.loads(path.read_text()))
        inputs.append(path)
    fused = evaluation.ensemble_fuse(tables, args.weights)
    records = [{"id": ex_id, "label": label} for ex_id, label in fused.items()]
    out_path = Path(args.out)
    out_path.write_text(json.dumps(records, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(records)} fused predictions to {out_path}")
    _write_manifest(out_path, "ensemble", {"weights": args.weights}, None,
                    inputs, [out_path])
    return 0


def cmd_baseline(args) -> int:
    dict_path = _require_file(args.dict, "dictionary")
    data_path = _require_file(args.data, "dataset")
    dictionary = corpus.load_dictionary(dict_path)
    examples = corpus.load_dataset(data_path, dictionary, split=args.split)
    records = []
    prob_table = {}
    for ex in examples:
        records.append({"id": ex.id, "label": baselines.rule_based_predict(ex, dictionary)})
        scores = {
            cand: baselines.schwartz_similarity(ex.tokens, cand).normalized
            for cand in dictionary.candidates(ex.short_form)
        }
        prob_table[ex.id] = scores
    out_path = Path(args.out)
    out_path.write_text(json.dumps(records, indent=2, sort_keys=True) + "\n")
    outputs = [out_path]
    if args.probs:
        probs_path = Path(args.probs)
        probs_path.write_text(json.dumps(prob_table, indent=2) + "\n")
        outputs.append(probs_path)
    print(f"wrote {len(records)} rule-based predictions to {out_path}")
    _write_manifest(out_path, "baseline", {"split": args.split}, None,
                    [dict_path, data_path], outputs)
    return 0


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="acrodis",
        description="Acronym disambiguation via contrastive pre-training and fine-tuning.",
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--num-acronyms", type=int, default=10)
    p.add_argument("--senses", type=int, default=3)
    p.add_argument("--examples-per-sense", type=int, default=40)
    p.add_argument("--cue-strength", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="validate data and build the vocabulary")
    p.add_argument("--data", required=True, help="training dataset JSON")
    p.add_argument("--dev", default=None)
    p.add_argument("--test", default=None)
    p.add_argument("--dict", required=True)
    p.add_argument("--min-freq", type=int, default=1)
    p.add_argument("--out-dir", default=None)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("pretrain", help="contrastive continual pre-training")
    p.add_argument("--train", required=True)
    p.add_argument("--dict", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--steps-phase1", type=int, default=None)
    p.add_argument("--steps-phase2", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--warmup-fraction", type=float, default=None)
    p.add_argument("--weight-decay", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--negatives", type=int, default=None)
    p.add_argument("--mlm-rate", type=float, default=None)
    p.add_argument("--hidden-dim", type=int, default=None)
    p.add_argument("--num-layers", type=int, default=None)
    p.add_argument("--num-heads", type=int, default=None)
    p.add_argument("--ffn-dim", type=int, default=None)
    p.add_argument("--max-seq-len", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("finetune", help="contrastive fine-tuning")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--dev", default=None)
    p.add_argument("--dict", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--lr-start", type=float, default=None)
    p.add_argument("--lr-end", type=float, default=None)
    p.add_argument("--warmup-epochs", type=int, default=None)
    p.add_argument("--lambda", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--negatives", type=int, default=None)
    p.add_argument("--proj-hidden", type=int, default=None)
    p.add_argument("--proj-out", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("predict", help="score dictionary candidates per example")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--dict", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--probs", default=None)
    p.add_argument("--split", default="test", choices=corpus.SPLITS)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="macro precision/recall/F1")
    p.add_argument("--pred", required=True)
    p.add_argument("--gold", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ensemble", help="weighted probability fusion")
    p.add_argument("--probs", nargs="+", required=True)
    p.add_argument("--weights", nargs="+", type=float, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("baseline", help="rule-based predictions")
    p.add_argument("--data", required=True)
    p.add_argument("--dict", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--probs", default=None)
    p.add_argument("--split", default="test", choices=corpus.SPLITS)
    p.set_defaults(func=cmd_baseline)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except (AcrodisError, LookupError) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"OSError: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
