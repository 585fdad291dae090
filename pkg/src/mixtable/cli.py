"""Command-line pipeline: ingest, cache-embeddings, train, finetune, generate,
evaluate, overlap-report.

Settings resolve as defaults < ``--config`` JSON < flags. Every command that
writes files also writes the resolved settings next to them, and errors end
the process with a single JSON line on stderr and a family-specific exit code.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    MetaDataset,
    SplitSpec,
    apply_stats,
    fit_normalization,
    load_bundle,
    read_bundle_dir,
    read_schema,
    split,
    write_bundle,
    write_csv,
)
from .embedding import Embedder, EmbeddingCache, cache_warm, make_provider, read_cache_file
from .errors import ConfigError, DataError, MixTableError
from .metrics import downstream_auc, evaluate, feature_overlap
from .model import ModelConfig, read_checkpoint
from .training import TrainConfig, finetune, train, zero_shot_generate

log = logging.getLogger("mixtable")

PROVIDER_KEYS = {"provider": "hash", "endpoint": None, "cache": None}
MODEL_KEYS = {f.name for f in fields(ModelConfig)}
TRAIN_KEYS = {f.name for f in fields(TrainConfig)}
KNOWN_KEYS = MODEL_KEYS | TRAIN_KEYS | set(PROVIDER_KEYS)


# settings

def load_config_file(path):
    if path is None:
        return {}
    try:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = sorted(set(obj) - KNOWN_KEYS)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}")
    return obj


def resolve(args):
    """Merge config file and flags into one flat dict; the single seed drives everything."""
    cfg = {**asdict(ModelConfig()), **asdict(TrainConfig()), **PROVIDER_KEYS}
    cfg.update(load_config_file(args.config))
    for key in KNOWN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    cfg["seed"] = int(cfg["seed"])
    try:
        ModelConfig.from_dict(cfg)
        TrainConfig.from_dict(cfg)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def echo_config(cfg, path, command, extra=None):
    out = {"command": command, "version": __version__, **cfg, **(extra or {})}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(out, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")


def sidecar(path):
    """``out/gen.csv`` -> ``out/gen.config.json``."""
    path = Path(path)
    return path.with_name(path.stem + ".config.json")


def make_embedder(cfg, persist=False):
    """Embedder over the configured provider.

    Only ``cache-embeddings`` writes to the cache file; other commands read it
    into memory so their inputs stay untouched.
    """
    kwargs = {}
    if cfg["provider"] == "remote":
        kwargs["token"] = os.environ.get("MIXTABLE_EMBED_TOKEN")
    provider = make_provider(cfg["provider"], dim=int(cfg["d_f"]), endpoint=cfg["endpoint"], **kwargs)
    path = cfg["cache"]
    if persist:
        if path is None:
            raise ConfigError("cache-embeddings needs --cache")
        cache = EmbeddingCache(path)
    else:
        cache = EmbeddingCache()
        if path is not None and Path(path).exists():
            cache.put_many(read_cache_file(path).items())
    return Embedder(provider, cache)


def load_training_bundle(path):
    """A bundle directory, normalized by its stats.json or fitted on itself."""
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"not a bundle directory: {path}")
    bundle = read_bundle_dir(path)
    if not bundle.normalized:
        bundle = fit_normalization(bundle)
    return bundle


def schema_for(csv_or_dir, schema=None):
    p = Path(csv_or_dir)
    if schema:
        return Path(schema)
    return p / "schema.json" if p.is_dir() else p.parent / "schema.json"


def load_table(csv_or_dir, schema=None):
    """Raw-scale bundle from a bundle directory or a CSV plus schema.

    Without ``schema`` a ``schema.json`` beside the CSV is used; a
    ``stats.json`` beside the schema attaches numerical statistics.
    """
    p = Path(csv_or_dir)
    csv_path = p / "data.csv" if p.is_dir() else p
    schema = schema_for(p, schema)
    if not schema.exists():
        raise DataError(f"no schema for {p}: pass --schema or put schema.json beside it")
    bundle = load_bundle(schema, csv_path)
    stats = schema.parent / "stats.json"
    if stats.exists():
        with open(stats, encoding="utf-8") as fh:
            bundle = replace(bundle, features=apply_stats(bundle.features, json.load(fh)))
    return bundle


def adopt_checkpoint_config(cfg, args, path):
    """Model settings come from the checkpoint; a conflicting --d-f is an error."""
    stored = read_checkpoint(path)[0]["config"]
    if getattr(args, "d_f", None) is not None and args.d_f != stored["d_f"]:
        raise ConfigError(f"--d-f {args.d_f} does not match the checkpoint's d_f={stored['d_f']}")
    seed = cfg["seed"]
    cfg.update({k: v for k, v in stored.items() if k in MODEL_KEYS})
    cfg["seed"] = seed
    return cfg


# commands

def cmd_ingest(args, cfg):
    bundle = load_bundle(args.schema, args.csv)
    fractions = [float(x) for x in args.split.split(",")]
    if len(fractions) != 3:
        raise ConfigError(f"--split needs three comma-separated fractions, got {args.split!r}")
    parts = split(bundle, SplitSpec(*fractions, seed=cfg["seed"]))
    fitted = fit_normalization(bundle, parts[0])
    out = Path(args.out)
    for name, rows in zip(("train", "val", "test"), parts):
        write_bundle(fitted.take(rows), out / name)
    echo_config(cfg, out / "config.json", "ingest", {"schema": args.schema, "csv": args.csv, "split": fractions})
    return {"out": str(out), "rows": [int(len(r)) for r in parts]}


def cmd_cache_embeddings(args, cfg):
    embedder = make_embedder(cfg, persist=True)
    bundles = [read_bundle_dir(d, normalize=False) for d in args.data]
    added = cache_warm(MetaDataset(tuple(bundles)), embedder)
    echo_config(cfg, sidecar(cfg["cache"]), "cache-embeddings", {"data": args.data})
    return {"cache": cfg["cache"], "added": added, "entries": len(embedder.cache)}


def _write_run(result, out, cfg, command, extra):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    result.write_curve(out / "loss_curve.csv")
    echo_config(cfg, out / "config.json", command, extra)
    last = result.curve[-1]
    return {"checkpoint": str(out / "checkpoint.ltbl"), "best_epoch": result.best_epoch, "train_loss": last["train_loss"], "val_loss": last["val_loss"]}


def cmd_train(args, cfg):
    meta = MetaDataset(tuple(load_training_bundle(d) for d in args.data))
    val = MetaDataset(tuple(load_training_bundle(d) for d in args.val)) if args.val else None
    embedder = make_embedder(cfg)
    result = train(meta, ModelConfig.from_dict(cfg), TrainConfig.from_dict(cfg), embedder, val, checkpoint_path=Path(args.out) / "checkpoint.ltbl")
    return _write_run(result, args.out, cfg, "train", {"data": args.data, "val": args.val})


def cmd_finetune(args, cfg):
    adopt_checkpoint_config(cfg, args, args.checkpoint)
    target = load_training_bundle(args.data)
    val = load_training_bundle(args.val) if args.val else None
    embedder = make_embedder(cfg)
    result = finetune(args.checkpoint, target, args.n_samples, TrainConfig.from_dict(cfg), embedder, val, checkpoint_path=Path(args.out) / "checkpoint.ltbl")
    extra = {"checkpoint": args.checkpoint, "data": args.data, "val": args.val, "n_samples": args.n_samples}
    return _write_run(result, args.out, cfg, "finetune", extra)


def cmd_generate(args, cfg):
    adopt_checkpoint_config(cfg, args, args.checkpoint)
    ds_id, description, features = read_schema(args.schema)
    stats = Path(args.stats) if args.stats else Path(args.schema).parent / "stats.json"
    if stats.exists():
        with open(stats, encoding="utf-8") as fh:
            features = apply_stats(features, json.load(fh))
    if args.description is not None:
        description = args.description
    embedder = make_embedder(cfg)
    out = zero_shot_generate(args.checkpoint, features, description, embedder, args.n, seed=cfg["seed"], argmax=args.argmax)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_csv(out, args.out)
    extra = {"checkpoint": args.checkpoint, "schema": args.schema, "n": args.n, "argmax": args.argmax}
    echo_config(cfg, sidecar(args.out), "generate", extra)
    return {"out": args.out, "rows": out.n_rows, "dataset": ds_id}


def cmd_evaluate(args, cfg):
    real = load_table(args.real, args.schema)
    synth = load_table(args.synth, args.synth_schema or schema_for(args.real, args.schema))
    if [f.name for f in real.features] != [f.name for f in synth.features]:
        raise DataError("real and synthetic tables have different features")
    report = evaluate(real, synth, k=args.k)
    if args.label:
        report.downstream_auc = downstream_auc(synth, real, args.label)
    text = report.to_json(indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
        echo_config(cfg, sidecar(args.out), "evaluate", {"real": args.real, "synth": args.synth, "k": args.k, "label": args.label})
        return None
    print(text)
    return None


def cmd_overlap_report(args, cfg):
    embedder = make_embedder(cfg)
    sources = [read_bundle_dir(d, normalize=False) for d in args.source]
    targets = [read_bundle_dir(d, normalize=False) for d in args.target]
    report = feature_overlap(sources, targets, embedder, threshold=args.threshold)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(report.to_json(indent=2) + "\n", encoding="utf-8")
    if args.matrix_csv:
        report.write_matrix_csv(args.matrix_csv)
    echo_config(cfg, sidecar(args.out), "overlap-report", {"source": args.source, "target": args.target, "threshold": args.threshold})
    return {"out": args.out, "dissimilar_fraction": report.dissimilar_fraction}


# parser

def _common(p, model=False, training=False, provider=True):
    p.add_argument("--config", help="JSON file with settings; flags take precedence")
    p.add_argument("--seed", type=int)
    if provider:
        p.add_argument("--provider", choices=["hash", "remote"])
        p.add_argument("--endpoint", help="base URL of the remote embedding service")
        p.add_argument("--cache", help="embedding cache file")
        p.add_argument("--d-f", dest="d_f", type=int, help="embedding dimension")
    if model:
        p.add_argument("--d-h", dest="d_h", type=int)
        p.add_argument("--n-layers", dest="n_layers", type=int)
        p.add_argument("--n-heads", dest="n_heads", type=int)
        p.add_argument("--mlp-ratio", dest="mlp_ratio", type=float)
        p.add_argument("--t-train", dest="T_train", type=int)
        p.add_argument("--t-infer", dest="T_infer", type=int)
        p.add_argument("--schedule", choices=["linear", "cosine"])
    if training:
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr0", type=float)
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--eval-every", dest="eval_every", type=int)
        p.add_argument("--clip-norm", dest="clip_norm", type=float)
        p.add_argument("--dataset-weighting", dest="dataset_weighting", choices=["sqrt", "none"])


def build_parser():
    parser = argparse.ArgumentParser(prog="mixtable", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mixtable {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="validate a schema + CSV and write train/val/test bundles")
    _common(p, provider=False)
    p.add_argument("--schema", required=True)
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="0.8,0.1,0.1")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("cache-embeddings", help="embed all metadata texts of bundles into the cache file")
    _common(p)
    p.add_argument("--data", nargs="+", required=True)
    p.set_defaults(func=cmd_cache_embeddings)

    p = sub.add_parser("train", help="train on one or more bundles")
    _common(p, model=True, training=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--val", nargs="*")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("finetune", help="continue training a checkpoint on a subsample of one table")
    _common(p, training=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--val")
    p.add_argument("--n-samples", dest="n_samples", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("generate", help="sample rows for a schema")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--schema", required=True)
    p.add_argument("--stats", help="numerical mean/std; defaults to stats.json beside the schema")
    p.add_argument("--description")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--argmax", action="store_true", help="most likely category instead of sampling")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="precision/recall/density/coverage of synthetic vs real rows")
    _common(p, provider=False)
    p.add_argument("--real", required=True, help="CSV or bundle directory")
    p.add_argument("--synth", required=True, help="CSV or bundle directory")
    p.add_argument("--schema", help="schema for CSV inputs; defaults to schema.json beside the real CSV")
    p.add_argument("--synth-schema", dest="synth_schema")
    p.add_argument("--k", type=int, default=5)
    p.add_argument("--label", help="categorical feature for train-on-synthetic AUC")
    p.add_argument("--out", help="write the report here instead of stdout")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("overlap-report", help="feature-name similarity between two groups of bundles")
    _common(p)
    p.add_argument("--source", nargs="+", required=True)
    p.add_argument("--target", nargs="+", required=True)
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--out", required=True)
    p.add_argument("--matrix-csv", dest="matrix_csv")
    p.set_defaults(func=cmd_overlap_report)
    return parser


def _fail(exc, code):
    line = {"error": type(exc).__name__, "exit_code": code, "message": str(exc).replace("\n", " ")}
    print(json.dumps(line), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve(args)
        summary = args.func(args, cfg)
    except MixTableError as exc:
        return _fail(exc, exc.exit_code)
    except FileNotFoundError as exc:
        return _fail(DataError(f"file not found: {exc.filename}"), DataError.exit_code)
    except (KeyboardInterrupt, BrokenPipeError):
        return 130
    if summary is not None:
        print(json.dumps(summary, default=_jsonable))
    return 0


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    return str(v)


if __name__ == "__main__":
    sys.exit(main())
