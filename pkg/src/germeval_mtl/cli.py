"""Command-line surface: build-vocab, pretrain-lm, train, predict, evaluate, report.

Every command resolves its settings from an optional key=value config file
plus flag overrides, validates them before doing any work, and stamps a
hash of the resolved configuration into everything it writes. Exit codes:
0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from germeval_mtl import data as dt
from germeval_mtl import metrics as mx
from germeval_mtl import model as md
from germeval_mtl import tokenizer as tok
from germeval_mtl import train as tr
from germeval_mtl.data import DataError
from germeval_mtl.train import NumericError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(Exception):
    """Bad usage, unknown keys, unparsable values, or inconsistent settings."""


_TRAIN_KEYS = {f.name: f.type for f in dataclasses.fields(tr.TrainConfig)}
_ENCODER_KEYS = {f.name: f.type for f in dataclasses.fields(md.EncoderConfig)}
_EXTRA_KEYS = {"averaging": str, "model_name": str, "max_len": int}
_ALL_KEYS = {**_TRAIN_KEYS, **_ENCODER_KEYS, **_EXTRA_KEYS}

_EXTRA_DEFAULTS = {"averaging": "macro", "model_name": "scratch", "max_len": 0}


def _coerce(key: str, raw: str):
    """Parse a config value by the destination field's type."""
    if key == "seeds":
        try:
            return tuple(int(part) for part in raw.replace(",", " ").split())
        except ValueError as exc:
            raise ConfigError(f"cannot parse seeds from {raw!r}") from exc
    target = _ALL_KEYS[key]
    target_name = target if isinstance(target, str) else target.__name__
    try:
        if target_name == "bool":
            low = raw.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if target_name == "int":
            return int(raw)
        if target_name == "float":
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key}={raw!r} as {target_name}") from exc


def parse_config_file(path: str | Path) -> dict:
    """Read `key = value` lines; # starts a comment; unknown keys rejected."""
    values = {}
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    for line_num, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{line_num}: expected key = value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _ALL_KEYS:
            raise ConfigError(f"{path}:{line_num}: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    return values


def resolve_config(args) -> dict:
    """Config file values, overridden by --set pairs and dedicated flags."""
    values = parse_config_file(args.config) if getattr(args, "config", None) else {}
    for pair in getattr(args, "set", None) or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects KEY=VALUE, got {pair!r}")
        key, raw = (part.strip() for part in pair.split("=", 1))
        if key not in _ALL_KEYS:
            raise ConfigError(f"--set: unknown config key {key!r}")
        values[key] = _coerce(key, raw)
    flag_map = {
        "env": "environment",
        "lm": "lm_stage",
        "seeds": "seeds",
        "lr": "learning_rate",
        "epochs": "num_epochs",
        "batch_size": "batch_size",
        "split_seed": "split_seed",
        "max_len": "max_len",
        "averaging": "averaging",
        "model_name": "model_name",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            values[key] = _coerce(key, str(value)) if isinstance(value, str) else value
    return values


def build_configs(values: dict) -> tuple[tr.TrainConfig, md.EncoderConfig, dict]:
    train_kwargs = {k: v for k, v in values.items() if k in _TRAIN_KEYS}
    enc_kwargs = {k: v for k, v in values.items() if k in _ENCODER_KEYS}
    extras = dict(_EXTRA_DEFAULTS)
    extras.update({k: v for k, v in values.items() if k in _EXTRA_KEYS})
    if extras["averaging"] not in ("macro", "positive_class"):
        raise ConfigError(f"averaging must be macro or positive_class, got {extras['averaging']!r}")
    try:
        train_cfg = tr.TrainConfig(**train_kwargs)
        enc_cfg = md.EncoderConfig(**enc_kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return train_cfg, enc_cfg, extras


def resolved_dict(train_cfg: tr.TrainConfig, enc_cfg: md.EncoderConfig, extras: dict) -> dict:
    out = dataclasses.asdict(train_cfg)
    out.update(dataclasses.asdict(enc_cfg))
    out.update(extras)
    out["seeds"] = list(train_cfg.seeds)
    return out


def config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sidecar(path: Path, cfg_hash: str) -> None:
    _write_json(Path(str(path) + ".meta.json"), {"config_hash": cfg_hash})


# -- commands -------------------------------------------------------------------


def cmd_build_vocab(args) -> int:
    examples = dt.load_dataset(args.data)
    if not examples:
        raise DataError(f"{args.data}: no rows to build a vocabulary from")
    corpus = [ex.text for ex in examples]
    vocab = tok.build_vocab(corpus, max_size=args.max_size, min_freq=args.min_freq)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    vocab.save(out)
    pieces = 0
    unknown = 0
    for text in corpus:
        for piece in vocab.tokenize(text):
            pieces += 1
            unknown += piece == tok.UNK
    coverage = 1.0 - unknown / pieces if pieces else 0.0
    print(f"vocab written to {out}")
    print(f"vocab size: {len(vocab)}")
    print(f"corpus subword coverage: {coverage:.4f} ({pieces - unknown}/{pieces} pieces)")
    return EXIT_OK


def _load_vocab(path: str) -> tok.Vocab:
    if not Path(path).exists():
        raise DataError(f"vocab file not found: {path}")
    try:
        return tok.Vocab.load(path)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _prepare(args):
    values = resolve_config(args)
    train_cfg, enc_cfg, extras = build_configs(values)
    vocab = _load_vocab(args.vocab)
    # the embedding table must match the actual vocabulary file
    enc_cfg = dataclasses.replace(enc_cfg, vocab_size=len(vocab))
    max_len = extras["max_len"] or enc_cfg.max_seq_len
    if max_len > enc_cfg.max_seq_len:
        raise ConfigError(f"max_len {max_len} exceeds max_seq_len {enc_cfg.max_seq_len}")
    extras["max_len"] = max_len
    resolved = resolved_dict(train_cfg, enc_cfg, extras)
    return train_cfg, enc_cfg, extras, vocab, resolved, config_hash(resolved)


def cmd_pretrain_lm(args) -> int:
    train_cfg, enc_cfg, extras, vocab, resolved, cfg_hash = _prepare(args)
    examples = dt.load_dataset(args.data)
    corpus = [ex.text for ex in examples]
    if not corpus:
        raise DataError(f"{args.data}: no rows to pretrain on")
    seed = args.seed if args.seed is not None else train_cfg.seeds[0]
    params = md.init_model(enc_cfg, md.MTL, with_mlm_head=True, seed=seed)
    tr.lm_finetune(params, corpus, vocab, train_cfg, seed, extras["max_len"])
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    md.save_checkpoint(params, out, extra_meta={
        "stage": "lm",
        "seed": seed,
        "config_hash": cfg_hash,
        "vocab_hash": file_hash(args.vocab),
    })
    accuracy = tr.mlm_top1_accuracy(params, corpus, vocab, extras["max_len"], seed=seed)
    print(f"LM checkpoint written to {out}")
    print(f"masked-token top-1 accuracy on the corpus: {accuracy:.4f}")
    return EXIT_OK


def cmd_train(args) -> int:
    train_cfg, enc_cfg, extras, vocab, resolved, cfg_hash = _prepare(args)
    examples = dt.load_dataset(args.data)
    if len(examples) < 2:
        raise DataError(f"{args.data}: need at least 2 examples to split")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab_hash = file_hash(args.vocab)

    result = tr.run_experiment(train_cfg, examples, vocab, enc_cfg, max_len=extras["max_len"])

    checkpoints = {}
    for seed in result.seeds:
        for key, params in result.models[seed].items():
            name = f"ckpt-seed{seed}.npz" if key == "mtl" else f"ckpt-seed{seed}-{key}.npz"
            md.save_checkpoint(params, out_dir / name, extra_meta={
                "stage": "classifier",
                "seed": seed,
                "config_hash": cfg_hash,
                "vocab_hash": vocab_hash,
                "environment_label": result.environment,
            })
            checkpoints[f"{seed}/{key}"] = name

    for pos, seed in enumerate(result.seeds):
        path = out_dir / f"preds-seed{seed}.csv"
        dt.write_predictions(path, result.val_ids, {t: result.per_seed_preds[t][pos] for t in dt.TASKS})
        _sidecar(path, cfg_hash)
    ensemble_path = out_dir / "preds-ensemble.csv"
    dt.write_predictions(ensemble_path, result.val_ids, result.ensemble_preds)
    _sidecar(ensemble_path, cfg_hash)
    gold_path = out_dir / "val-gold.csv"
    dt.write_predictions(gold_path, result.val_ids, result.val_gold)
    _sidecar(gold_path, cfg_hash)

    manifest = {
        "format_version": 1,
        "model_name": extras["model_name"],
        "environment": result.environment,
        "config_hash": cfg_hash,
        "config": resolved,
        "vocab_hash": vocab_hash,
        "seeds": list(result.seeds),
        "checkpoints": checkpoints,
        "prediction_files": [f"preds-seed{s}.csv" for s in result.seeds] + ["preds-ensemble.csv"],
        "eval_history_f1_averaging": "macro",
        "eval_history": {
            f"{seed}/{key}": {
                "history": [[step, loss, f1s] for step, loss, f1s in record.eval_history],
                "stopped_early": record.stopped_early,
                "best_checkpoint_step": record.best_checkpoint_step,
            }
            for seed, by_key in result.records.items()
            for key, record in by_key.items()
        },
        "ensemble_val_metrics": {
            task: dataclasses.asdict(metric)
            for task, metric in result.metrics(extras["averaging"]).items()
        },
    }
    _write_json(out_dir / "manifest.json", manifest)
    print(f"experiment {result.environment} complete: {len(checkpoints)} checkpoints in {out_dir}")
    for task, metric in result.metrics(extras["averaging"]).items():
        print(f"  val {task}: P={metric.precision:.4f} R={metric.recall:.4f} F1={metric.f1:.4f}"
              f" ({metric.averaging})")
    return EXIT_OK


def cmd_predict(args) -> int:
    vocab = _load_vocab(args.vocab)
    vocab_hash = file_hash(args.vocab)
    models = []
    for ckpt in args.checkpoint:
        if not Path(ckpt).exists():
            raise DataError(f"checkpoint not found: {ckpt}")
        params, meta = md.load_checkpoint(ckpt)
        stored = meta.get("vocab_hash")
        if stored is not None and stored != vocab_hash:
            raise ConfigError(
                f"refusing to predict: checkpoint {ckpt} was trained with a different "
                f"vocabulary (stored hash {stored[:12]}..., provided {vocab_hash[:12]}...)"
            )
        if params.config.vocab_size != len(vocab):
            raise ConfigError(
                f"refusing to predict: checkpoint {ckpt} expects vocab size "
                f"{params.config.vocab_size}, file has {len(vocab)}"
            )
        models.append((params, meta))

    covered = [t for p, _ in models for t in p.head_tasks]
    if len(covered) != len(set(covered)):
        raise ConfigError("checkpoints cover overlapping tasks; pass one MTL or up to three distinct STL checkpoints")

    ids, texts = dt.load_texts(args.data)
    encoded = [tok.encode(vocab, text, args.max_len) for text in texts]
    preds: dict = {}
    for params, _ in models:
        ds = dt.EncodedDataset(
            ids=np.asarray([e.ids for e in encoded], dtype=np.int64),
            attention_mask=np.asarray([e.attention_mask for e in encoded], dtype=np.float64),
            labels={},
            example_ids=ids,
        )
        preds.update(tr.predict_dataset(params, ds, args.batch_size))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    dt.write_predictions(out, ids, preds)
    hashes = sorted({meta.get("config_hash", "unknown") for _, meta in models})
    _sidecar(out, ",".join(hashes))
    print(f"{len(ids)} predictions for tasks {sorted(preds)} written to {out}")
    return EXIT_OK


def _align_predictions(gold_ids, pred_ids, preds):
    known = set(pred_ids)
    missing = [i for i in gold_ids if i not in known]
    if missing:
        shown = ", ".join(missing[:10])
        raise DataError(f"predictions are missing {len(missing)} gold ids: {shown}")
    index = {ex_id: pos for pos, ex_id in enumerate(pred_ids)}
    order = [index[i] for i in gold_ids]
    return {t: np.asarray(v)[order] for t, v in preds.items()}


def cmd_evaluate(args) -> int:
    # gold may be labels-only (comment_id + label columns) or a full dataset file
    gold_ids, gold_labels = dt.load_predictions(args.gold)
    systems = {}
    for path in args.pred:
        pred_ids, preds = dt.load_predictions(path)
        name = Path(path).stem
        if name in systems:
            name = str(path)
        systems[name] = _align_predictions(gold_ids, pred_ids, preds)

    rows = []
    per_system_metrics = {}
    for name, preds in systems.items():
        per_system_metrics[name] = {
            t: mx.score(preds[t], gold_labels[t], args.averaging)
            for t in preds
            if t in gold_labels
        }
    if len(systems) > 1:
        shared = [
            t for t in dt.TASKS
            if t in gold_labels and all(t in preds for preds in systems.values())
        ]
        votes = {t: np.stack([systems[name][t] for name in systems]) for t in shared}
        ensemble = {t: tr.ensemble_predict(votes[t]) for t in shared}
        per_system_metrics["ensemble"] = {
            t: mx.score(ensemble[t], gold_labels[t], args.averaging) for t in shared
        }

    print(f"averaging mode: {args.averaging}")
    for name, by_task in per_system_metrics.items():
        for task, metric in by_task.items():
            rows.append(
                f"{name},{task},{metric.averaging},"
                f"{metric.precision:.6f},{metric.recall:.6f},{metric.f1:.6f}"
            )
            print(f"{name:24s} {task:14s} P={metric.precision:.4f} R={metric.recall:.4f} F1={metric.f1:.4f}")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(
            "system,task,averaging,precision,recall,f1\n" + "\n".join(rows) + "\n",
            encoding="utf-8",
        )
        print(f"metrics written to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    grid = {}
    for run_dir in args.runs:
        run = Path(run_dir)
        manifest_path = run / "manifest.json"
        if not manifest_path.exists():
            raise DataError(f"no manifest.json in {run}")
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
        gold_ids, gold = dt.load_predictions(run / "val-gold.csv")
        pred_ids, preds = dt.load_predictions(run / "preds-ensemble.csv")
        aligned = _align_predictions(gold_ids, pred_ids, preds)
        key = (manifest.get("model_name", "scratch"), manifest["environment"])
        grid[key] = {t: mx.score(aligned[t], gold[t], args.averaging) for t in dt.TASKS}
    table = mx.results_table(grid)
    print(f"averaging mode: {args.averaging}")
    print(table.text, end="")
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.with_suffix(".txt").write_text(table.text, encoding="utf-8")
        out.with_suffix(".csv").write_text(table.csv, encoding="utf-8")
        print(f"report written to {out.with_suffix('.txt')} and {out.with_suffix('.csv')}")
    return EXIT_OK


# -- argument parsing -------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors exit 1, not argparse's default 2
        raise ConfigError(message)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--env", choices=(md.STL, md.MTL), help="training environment")
    lm = p.add_mutually_exclusive_group()
    lm.add_argument("--lm", dest="lm", action="store_true", default=None,
                    help="run the masked-LM stage before classification")
    lm.add_argument("--no-lm", dest="lm", action="store_false", default=None)
    p.add_argument("--seeds", help="comma-separated seed list")
    p.add_argument("--lr", type=float, help="peak learning rate")
    p.add_argument("--epochs", type=int, help="training epochs")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--split-seed", dest="split_seed", type=int)
    p.add_argument("--max-len", dest="max_len", type=int, help="encoded sequence length")
    p.add_argument("--averaging", choices=("macro", "positive_class"))
    p.add_argument("--model-name", dest="model_name", help="row label in reports")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="germeval-mtl",
                     description="Desk-scale single-task and multitask comment classification")
    parser.add_argument("--verbose", action="store_true", help="info-level logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", help="train a WordPiece vocabulary from a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--max-size", dest="max_size", type=int, default=8000)
    p.add_argument("--min-freq", dest="min_freq", type=int, default=1)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("pretrain-lm", help="masked-LM fine-tuning, standalone")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.add_argument("--seed", type=int, help="defaults to the first configured seed")
    p.set_defaults(func=cmd_pretrain_lm)

    p = sub.add_parser("train", help="run the configured experiment over all seeds")
    _add_config_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="label a file with trained checkpoints")
    p.add_argument("--checkpoint", action="append", required=True,
                   help="model checkpoint (repeat for several STL models)")
    p.add_argument("--vocab", required=True)
    p.add_argument("--data", required=True, help="file with comment_id and comment_text")
    p.add_argument("--out", required=True)
    p.add_argument("--max-len", dest="max_len", type=int, default=120)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=32)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score prediction files against gold labels")
    p.add_argument("--gold", required=True)
    p.add_argument("--pred", action="append", required=True,
                   help="prediction file (repeat for a seed ensemble)")
    p.add_argument("--averaging", choices=("macro", "positive_class"), default="macro")
    p.add_argument("--out", help="write system,task,P,R,F1 rows here")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="combine train runs into the results grid")
    p.add_argument("--runs", nargs="+", required=True, help="train output directories")
    p.add_argument("--averaging", choices=("macro", "positive_class"), default="macro")
    p.add_argument("--out", help="basename for .txt and .csv report files")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "verbose", False):
            logging.basicConfig(level=logging.INFO)
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
