"""Command-line pipeline: gen, train, eval, search, export.

Every subcommand resolves one effective configuration (built-in defaults,
then the ``--config`` JSON file, then flags), writes it to
``<out>/effective_config.json`` and only then starts work. The echo can be
passed back through ``--config`` to repeat the run.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import evaluation as E
from .data import (DomainExhaustedError, FeatureFormatError, SynthSpec, collate, dataset_summary,
                   ensure_dir, feature_header, generate_synthetic, load_features,
                   write_embeddings, write_features)
from .model import CheckpointError, ModelConfig, load_checkpoint
from .optim import NonFiniteGradientError
from .tensor import DimensionError, Rng
from .trainer import MODES, NumericalAbort, TrainConfig, train

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
SECTIONS = {"synth": SynthSpec, "model": ModelConfig, "train": TrainConfig}
# informational keys the echo carries; ignored on reload
ECHO_ONLY = ("command", "args")

log = logging.getLogger("advmm")


class ConfigError(ValueError):
    pass


class DataError(ValueError):
    pass


# config resolution ----------------------------------------------------------

def read_config_file(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(cfg, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = set(cfg) - set(SECTIONS) - {"seed"} - set(ECHO_ONLY)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    for name, cls in SECTIONS.items():
        known = {f.name for f in fields(cls)}
        bad = set(cfg.get(name, {})) - known
        if bad:
            raise ConfigError(f"unknown {name} fields: {sorted(bad)}")
    return cfg


def build(cls, *layers: dict):
    merged = {}
    for layer in layers:
        merged.update({k: v for k, v in layer.items() if v is not None})
    try:
        obj = cls(**merged)
        if hasattr(obj, "validate"):
            obj.validate()
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e
    return obj


def resolve_seed(args, file_cfg) -> int:
    if getattr(args, "seed", None) is not None:
        return int(args.seed)
    return int(file_cfg.get("seed", 0))


def echo(out: Path, command: str, args: dict, **sections) -> None:
    doc = {"command": command, "args": args}
    for k, v in sections.items():
        doc[k] = asdict(v) if hasattr(v, "__dataclass_fields__") else v
    ensure_dir(out)
    (out / "effective_config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _path_args(args, *names) -> dict:
    return {n: (str(getattr(args, n)) if getattr(args, n) is not None else None) for n in names}


# data helpers -----------------------------------------------------------------

def _split_path(data_dir, split) -> Path:
    p = Path(data_dir)
    if p.suffix == ".jsonl":
        return p
    return p / f"{split}.jsonl"


def _load(path: Path):
    if not path.exists():
        raise DataError(f"missing data file {path}")
    return load_features(path), feature_header(path)


def model_config_for_data(file_model: dict, header: dict) -> ModelConfig:
    """Dimensions come from the data; anything else from the config file."""
    dims = {"d_image_in": header["d_image_in"], "max_len": header["L"],
            "d_word": header["d_word"], "n_categories": header["C"]}
    for k, v in dims.items():
        if k in file_model and file_model[k] != v:
            raise DataError(f"config model.{k}={file_model[k]} but the data has {v}")
    return build(ModelConfig, file_model, dims)


def _check_compatible(cfg: ModelConfig, header: dict, path) -> None:
    want = {"d_image_in": cfg.d_image_in, "L": cfg.max_len, "d_word": cfg.d_word}
    got = {k: header[k] for k in want}
    if got != want:
        raise DataError(f"{path}: data dims {got} do not match checkpoint {want}")


# subcommands ------------------------------------------------------------------

def cmd_gen(args) -> int:
    file_cfg = read_config_file(args.config)
    seed = resolve_seed(args, file_cfg)
    spec = build(SynthSpec, file_cfg.get("synth", {}))
    out = Path(args.out)
    echo(out, "gen", {}, seed=seed, synth=spec)
    train_s, test_s = generate_synthetic(spec, Rng(seed))
    dims = dict(C=spec.n_categories, d_image_in=spec.d_image, L=spec.max_len, d_word=spec.d_word)
    write_features(out / "train.jsonl", train_s, **dims)
    write_features(out / "test.jsonl", test_s, **dims)
    summary = {"train": dataset_summary(train_s), "test": dataset_summary(test_s)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    for split, s in summary.items():
        for dom, info in s.items():
            print(f"{split:<6}{dom:<7}{info['count']:>7}  per class {info['per_class']}")
    return EXIT_OK


def cmd_train(args) -> int:
    file_cfg = read_config_file(args.config)
    seed = resolve_seed(args, file_cfg)
    flags = {"seed": seed, "max_steps": args.max_steps, "mode": args.mode,
             "stop_after": args.stop_after, "batch_size": args.batch_size, "lr": args.lr,
             "eval_every": args.eval_every, "lambda_constant": args.lambda_constant}
    tcfg = build(TrainConfig, file_cfg.get("train", {}), flags)
    train_path = _split_path(args.data, "train")
    train_s, header = _load(train_path)
    test_path = train_path.with_name("test.jsonl")
    test_s = load_features(test_path) if test_path.exists() and test_path != train_path else None
    mcfg = model_config_for_data(file_cfg.get("model", {}), header)
    out = Path(args.out)
    echo(out, "train", _path_args(args, "data", "resume"), seed=seed, model=mcfg, train=tcfg)
    res = train(tcfg, mcfg, train_s, test_s, out_dir=out, resume=args.resume)
    last = res.history[-1] if res.history else {}
    print(json.dumps({"step": res.step, "checkpoint": str(res.checkpoint), "last": last},
                     sort_keys=True))
    return EXIT_OK


def _eval_report(net, samples, seed, probe: str) -> dict:
    col = collate(samples, net.config.d_image_in, net.config.max_len, net.config.d_word,
                  net.config.n_categories)
    emb = net.embed(col)
    report = {"n_samples": len(samples)}
    dom = {"probe_kind": probe}
    if len(set(col.domains.tolist())) == 2:
        dom["probe_accuracy"] = E.probe_domain_accuracy(emb, col.domains, Rng(seed).fork("probe"),
                                                        kind=probe)
    else:
        dom["probe_accuracy"] = None
        dom["warning"] = "single-domain data"
    if net.config.category_head:
        cat, dlog = net.predict(col)
        report["classification"] = E.prf1(cat, col.labels)
        if dlog is not None:
            dom["head_accuracy"] = E.domain_confusion(dlog, col.domains)["accuracy"] \
                if dom["probe_accuracy"] is not None else None
    report["domain"] = dom
    pairs = [s.pair_id for s in samples]
    if any(p is not None for p in pairs):
        idx = E.EmbeddingIndex(col.ids, [s.domain for s in samples], emb, pair_ids=pairs)
        report["retrieval"] = {d: E.recall_at_k(idx, d) for d in E.DIRECTIONS}
    else:
        report["retrieval"] = "unavailable"
    return report


def cmd_eval(args) -> int:
    file_cfg = read_config_file(args.config)
    seed = resolve_seed(args, file_cfg)
    out = Path(args.out)
    echo(out, "eval", {**_path_args(args, "checkpoint", "data"), "split": args.split,
                       "probe": args.probe}, seed=seed)
    net, _, step, _ = _load_ckpt(args.checkpoint)
    path = _split_path(args.data, args.split)
    samples, header = _load(path)
    _check_compatible(net.config, header, path)
    report = _eval_report(net, samples, seed, args.probe)
    report["checkpoint_step"] = step
    (out / "report.json").write_text(E.report_json(report))
    table = E.report_table(report)
    (out / "report.txt").write_text(table)
    print(table, end="")
    return EXIT_OK


def _load_ckpt(path):
    try:
        return load_checkpoint(path)
    except CheckpointError as e:
        raise DataError(str(e)) from e


def cmd_search(args) -> int:
    file_cfg = read_config_file(args.config)
    seed = resolve_seed(args, file_cfg)
    out = Path(args.out)
    echo(out, "search", {**_path_args(args, "checkpoint", "corpus", "queries"), "k": args.k,
                         "to_domain": args.to_domain, "metric": args.metric}, seed=seed)
    net, _, _, _ = _load_ckpt(args.checkpoint)
    corpus_path = _split_path(args.corpus, "test")
    corpus, header = _load(corpus_path)
    _check_compatible(net.config, header, corpus_path)
    queries, qheader = _load(Path(args.queries))
    _check_compatible(net.config, qheader, args.queries)
    index = E.EmbeddingIndex([s.id for s in corpus], [s.domain for s in corpus], net.embed(corpus),
                             metric=args.metric)
    n_cand = index.rows(args.to_domain).size
    if args.k < 1 or args.k > n_cand:
        raise ConfigError(f"--k {args.k} outside [1, {n_cand}] candidate rows")
    qemb = net.embed(queries)
    results = []
    for q, e in zip(queries, qemb):
        hits = E.knn_search(index, e, args.k, restrict_domain=args.to_domain)
        results.append({"query": q.id, "results": [{"id": i, "distance": d} for i, d in hits]})
        print(q.id)
        for rank, (i, d) in enumerate(hits, 1):
            print(f"  {rank:>3}  {i:<24}{d:.6f}")
    (out / "search.json").write_text(json.dumps(results, indent=2) + "\n")
    return EXIT_OK


def cmd_export(args) -> int:
    file_cfg = read_config_file(args.config)
    seed = resolve_seed(args, file_cfg)
    if args.format not in ("bin", "csv"):
        raise ConfigError(f"unknown export format {args.format!r}")
    out = Path(args.out)
    echo(out, "export", {**_path_args(args, "checkpoint", "data"), "split": args.split,
                         "format": args.format, "pca": args.pca}, seed=seed)
    net, _, _, _ = _load_ckpt(args.checkpoint)
    path = _split_path(args.data, args.split)
    samples, header = _load(path)
    _check_compatible(net.config, header, path)
    emb = net.embed(samples)
    ids = [s.id for s in samples]
    doms = [s.domain for s in samples]
    if args.format == "bin":
        labels = np.array([s.labels for s in samples]).reshape(len(samples), -1)
        write_embeddings(out / "embeddings.jsonl", ids, doms, labels, emb,
                         pair_ids=[s.pair_id for s in samples])
    else:
        _write_csv(out / "embeddings.csv", ids, doms, emb, "e")
    if args.pca:
        proj, ratios = E.pca_project(emb)
        _write_csv(out / "pca.csv", ids, doms, proj, "pc")
        (out / "pca_explained_variance.json").write_text(
            json.dumps({"explained_variance_ratio": ratios.tolist()}) + "\n")
    print(f"exported {len(samples)} embeddings of dimension {emb.shape[1]} to {out}")
    return EXIT_OK


def _write_csv(path, ids, doms, x, prefix):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["id", "domain"] + [f"{prefix}{j}" for j in range(x.shape[1])])
        for i, d, row in zip(ids, doms, x):
            w.writerow([i, d] + [repr(float(v)) for v in row])


# argument parsing -------------------------------------------------------------

def _globals() -> argparse.ArgumentParser:
    g = argparse.ArgumentParser(add_help=False)
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="single source of randomness")
    g.add_argument("--config", default=argparse.SUPPRESS, help="JSON config file")
    g.add_argument("--out", default=argparse.SUPPRESS, help="output directory")
    return g


def make_parser() -> argparse.ArgumentParser:
    glob = _globals()
    p = argparse.ArgumentParser(prog="advmm", parents=[glob],
                                description="Adversarial image-text embedding pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen", parents=[glob], help="write a synthetic dataset")

    t = sub.add_parser("train", parents=[glob], help="train a model")
    t.add_argument("--data", required=True, help="directory holding train.jsonl (and test.jsonl)")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-steps", type=int)
    t.add_argument("--stop-after", type=int, help="stop (and checkpoint) after this many steps")
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--lambda-constant", type=float)

    e = sub.add_parser("eval", parents=[glob], help="write a metrics report")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--probe", choices=("mlp", "linear"), default="mlp")

    s = sub.add_parser("search", parents=[glob], help="k nearest neighbours of query items")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus", required=True, help="data directory or .jsonl file")
    s.add_argument("--queries", required=True, help=".jsonl feature file")
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--to-domain", choices=("image", "text"))
    s.add_argument("--metric", choices=("cosine", "euclidean"), default="cosine")

    x = sub.add_parser("export", parents=[glob], help="export embeddings")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--data", required=True)
    x.add_argument("--split", default="test")
    x.add_argument("--format", default="bin")
    x.add_argument("--pca", action="store_true")
    return p


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "search": cmd_search,
            "export": cmd_export}


def main(argv=None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    for name in ("seed", "config", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    if args.out is None:
        args.out = "."
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FeatureFormatError, DomainExhaustedError, DimensionError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericalAbort, NonFiniteGradientError, FloatingPointError) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as e:
        # remaining validation failures inside the library are config problems
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
