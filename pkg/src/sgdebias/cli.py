"""Command-line surface.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
Subcommands cover the whole pipeline from data generation to the one-shot
experiment runner; every command is deterministic given its seed inputs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from .core import (
    ConfigError,
    DataError,
    NumericError,
    decode_ranked,
    decode_scene_graph,
    encode_ranked,
    encode_scene_graph,
)
from .effects import EffectKind
from .experiment import (
    ExperimentConfig,
    canonical_json,
    emit_predicate_barchart_data,
    predict_split,
    read_jsonl,
    run_experiment,
    summary_tables,
    write_jsonl,
)
from .metrics import EvalReport, evaluate
from .model import init_model, load_checkpoint, save_checkpoint
from .retrieval import (
    HeteroVocab,
    SGEmbedConfig,
    init_retrieval_model,
    load_retrieval_checkpoint,
    retrieval_eval,
    retrieve_train,
    save_retrieval_checkpoint,
)
from .synth import WorldConfig, generate_dataset, read_dataset_dir, select_zero_shot_holdout, write_dataset_dir
from .train import DEBIAS_MODES, TrainConfig, train


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise ConfigError(f"config file {path} does not exist")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except ValueError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    return doc


def _world_config(doc: dict, seed: int | None) -> WorldConfig:
    doc = dict(doc)
    for key in ("objects_per_image", "fg_relations_per_image"):
        if key in doc:
            doc[key] = tuple(doc[key])
    if "zero_shot_holdout" in doc:
        doc["zero_shot_holdout"] = tuple(tuple(t) for t in doc["zero_shot_holdout"])
    if seed is not None:
        doc["seed"] = seed
    try:
        return WorldConfig(**doc)
    except TypeError as exc:
        raise ConfigError(f"bad world config: {exc}") from exc


def cmd_gen_data(args) -> None:
    cfg = _world_config(_load_config_file(args.config), args.seed)
    if args.auto_holdout > 0 and not cfg.zero_shot_holdout:
        holdout = select_zero_shot_holdout(cfg, args.n_train, args.n_val, args.n_test,
                                           args.auto_holdout)
        cfg = replace(cfg, zero_shot_holdout=holdout)
    splits = generate_dataset(cfg, args.n_train, args.n_val, args.n_test)
    write_dataset_dir(args.out, splits)
    counts = {name: len(ds.images) for name, ds in splits.items()}
    print(f"wrote {counts} to {args.out} (seed {cfg.seed}, holdout {len(cfg.zero_shot_holdout)})")


def cmd_train(args) -> None:
    doc = _load_config_file(args.config)
    for key, val in (
        ("epochs", args.epochs), ("batch_size", args.batch_size), ("lr", args.lr),
        ("aux_loss_weight", args.aux_weight), ("debias", args.debias), ("seed", args.seed),
    ):
        if val is not None:
            doc[key] = val
    try:
        tcfg = TrainConfig(**doc)
    except TypeError as exc:
        raise ConfigError(f"bad train config: {exc}") from exc
    train_ds = read_dataset_dir(args.data, "train")
    val_ds = read_dataset_dir(args.data, "val")
    wc = train_ds.world.cfg
    model = init_model(wc.n_object_classes, wc.n_predicates, wc.d_r, wc.d_x, wc.d_v,
                       fusion=args.fusion, task=args.task, seed=tcfg.seed)
    log = train(model, train_ds, val_ds, tcfg, args.xbar)
    save_checkpoint(model, args.out)
    log_path = args.log or args.out + ".log.json"
    with open(log_path, "w") as fh:
        fh.write(canonical_json(log) + "\n")
    print(f"trained {args.task}/{args.fusion}/{tcfg.debias}: "
          f"val mean recall {log['final_val_mean_recall']:.4f} -> {args.out}")


def cmd_eval(args) -> None:
    model = load_checkpoint(args.checkpoint)
    ds = read_dataset_dir(args.data, args.split)
    task = args.task or model.task
    try:
        kind = EffectKind(args.method)
    except ValueError as exc:
        raise ConfigError(f"unknown method {args.method!r}") from exc
    preds = predict_split(model, ds, task, kind)
    write_jsonl(args.out, (encode_ranked(p) for p in preds))
    print(f"wrote {len(preds)} prediction records to {args.out}")


def cmd_score(args) -> None:
    ds = read_dataset_dir(args.data, args.split)
    preds = [decode_ranked(d) for d in read_jsonl(args.pred)]
    by_id = {img.image_id: img.gt for img in ds.images}
    pairs = []
    for p in preds:
        if p.image_id not in by_id:
            raise DataError(f"prediction for unknown image {p.image_id!r}")
        pairs.append((p, by_id[p.image_id]))
    ks = tuple(int(k) for k in args.ks.split(","))
    rep = evaluate(pairs, ks, ds.world.cfg.n_predicates, registry=ds.train_triplet_registry,
                   graph_constraint=not args.no_graph_constraint,
                   task=args.task, method=args.method)
    with open(args.out, "w") as fh:
        fh.write(canonical_json(rep.to_json()) + "\n")
    if args.csv:
        _md, csv = summary_tables({(rep.task, rep.method): rep}, [rep.task], [rep.method], ks)
        with open(args.csv, "w") as fh:
            fh.write(csv)
    shown = {k: rep.mean_recall[k] for k in ks}
    print(f"scored {len(pairs)} images; mean recall {shown}")


def _read_graphs(path: str) -> list:
    return [decode_scene_graph(d) for d in read_jsonl(path)]


def cmd_retrieve_train(args) -> None:
    doc = _load_config_file(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    if "lr_decay_epochs" in doc:
        doc["lr_decay_epochs"] = tuple(doc["lr_decay_epochs"])
    try:
        cfg = SGEmbedConfig(**doc)
    except TypeError as exc:
        raise ConfigError(f"bad embed config: {exc}") from exc
    vocab = HeteroVocab.from_json(_load_config_file(args.vocab))
    queries = _read_graphs(args.queries)
    gallery = _read_graphs(args.gallery)
    if len(queries) != len(gallery):
        raise DataError("retrieve-train needs pairwise aligned query/gallery files")
    model = init_retrieval_model(cfg, vocab)
    log = retrieve_train(list(zip(queries, gallery)), model)
    save_retrieval_checkpoint(model, args.out)
    tail = log["epochs"][-1]
    print(f"trained retrieval on {log['n_pairs']} pairs; "
          f"final mean loss {tail['mean_loss']:.4f} -> {args.out}")


def cmd_retrieve_eval(args) -> None:
    model = load_retrieval_checkpoint(args.checkpoint)
    queries = _read_graphs(args.queries)
    gallery = _read_graphs(args.gallery)
    if args.gallery_size is not None:
        gallery = gallery[: args.gallery_size]
        queries = queries[: min(len(queries), len(gallery))]
    ks = tuple(int(k) for k in args.ks.split(","))
    rep = retrieval_eval(model, queries, gallery, ks)
    with open(args.out, "w") as fh:
        fh.write(canonical_json(rep) + "\n")
    print(f"retrieval over gallery of {rep['gallery_size']}: "
          f"recall {rep['recall']} median rank {rep['median_rank']}")


def cmd_run_experiment(args) -> None:
    doc = _load_config_file(args.config)
    cfg = ExperimentConfig.from_json(doc)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    manifest = run_experiment(cfg, args.out)
    print(f"experiment {manifest['fingerprint'][:12]} finished; "
          f"rows: {', '.join(manifest['rows'])}; reports under {args.out}/reports")


def cmd_report(args) -> None:
    os.makedirs(args.out, exist_ok=True)
    reports = {}
    rows = []
    tasks = []
    ks: set[int] = set()
    for path in args.reports:
        with open(path) as fh:
            rep = EvalReport.from_json(json.load(fh))
        reports[(rep.task, rep.method)] = rep
        if rep.method not in rows:
            rows.append(rep.method)
        if rep.task not in tasks:
            tasks.append(rep.task)
        ks.update(rep.ks)
    if reports:
        md, csv = summary_tables(reports, tasks, rows, tuple(sorted(ks)))
        with open(os.path.join(args.out, "summary.md"), "w") as fh:
            fh.write(md)
        with open(os.path.join(args.out, "summary.csv"), "w") as fh:
            fh.write(csv)
    if args.barchart:
        if not args.world:
            raise ConfigError("--barchart needs --world for training fractions")
        with open(args.barchart[0]) as fh:
            base = EvalReport.from_json(json.load(fh))
        with open(args.barchart[1]) as fh:
            method = EvalReport.from_json(json.load(fh))
        with open(args.world) as fh:
            world_doc = json.load(fh)
        csv_text = emit_predicate_barchart_data(
            base, method, world_doc["train_predicate_counts"], world_doc["predicate_vocab"]
        )
        with open(os.path.join(args.out, "barchart.csv"), "w") as fh:
            fh.write(csv_text)
    print(f"wrote report files to {args.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgdebias", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True, out_help="output path"):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="seed override")
        sp.add_argument("--out", required=out_required, help=out_help)

    sp = sub.add_parser("gen-data", help="generate a seeded synthetic dataset directory")
    common(sp, out_help="dataset directory")
    sp.add_argument("--n-train", type=int, default=500)
    sp.add_argument("--n-val", type=int, default=100)
    sp.add_argument("--n-test", type=int, default=200)
    sp.add_argument("--auto-holdout", type=int, default=0,
                    help="pick this many zero-shot holdout triplets automatically")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a predictor checkpoint")
    common(sp, out_help="checkpoint path")
    sp.add_argument("--data", required=True, help="dataset directory")
    sp.add_argument("--task", choices=("predcls", "sgcls"), default="predcls")
    sp.add_argument("--fusion", choices=("sum", "gate"), default="sum")
    sp.add_argument("--debias", choices=DEBIAS_MODES, default=None)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--aux-weight", type=float)
    sp.add_argument("--xbar", choices=("mean", "zero"), default="mean")
    sp.add_argument("--log", help="training log path (default: <out>.log.json)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="write ranked predictions for a split")
    common(sp, out_help="predictions JSONL path")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--task", choices=("predcls", "sgcls"))
    sp.add_argument("--method", default="baseline", help="effect kind, e.g. baseline or tde")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("score", help="score predictions against a split's ground truth")
    common(sp, out_help="report JSON path")
    sp.add_argument("--pred", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test")
    sp.add_argument("--ks", default="20,50,100")
    sp.add_argument("--task", default="unknown")
    sp.add_argument("--method", default="unknown")
    sp.add_argument("--csv", help="also write a one-row CSV table here")
    sp.add_argument("--no-graph-constraint", action="store_true")
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("retrieve-train", help="train the graph retrieval engine")
    common(sp, out_help="retrieval checkpoint path")
    sp.add_argument("--queries", required=True, help="text-side scene graph JSONL")
    sp.add_argument("--gallery", required=True, help="image-side scene graph JSONL")
    sp.add_argument("--vocab", required=True, help="vocabulary manifest JSON")
    sp.set_defaults(func=cmd_retrieve_train)

    sp = sub.add_parser("retrieve-eval", help="evaluate retrieval on aligned files")
    common(sp, out_help="report JSON path")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--queries", required=True)
    sp.add_argument("--gallery", required=True)
    sp.add_argument("--gallery-size", type=int)
    sp.add_argument("--ks", default="20,100")
    sp.set_defaults(func=cmd_retrieve_eval)

    sp = sub.add_parser("run-experiment", help="run the full pipeline into one directory")
    common(sp, out_help="experiment output directory")
    sp.set_defaults(func=cmd_run_experiment)

    sp = sub.add_parser("report", help="render summary tables from report JSONs")
    common(sp, out_help="report output directory")
    sp.add_argument("--reports", nargs="*", default=[], help="evaluation report JSON files")
    sp.add_argument("--barchart", nargs=2, metavar=("BASELINE", "METHOD"),
                    help="two report JSONs for per-predicate comparison")
    sp.add_argument("--world", help="world manifest (training fractions for --barchart)")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
