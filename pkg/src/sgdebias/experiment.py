"""End-to-end experiment pipeline: data, training grid, scoring, retrieval, reports.

Every artifact lands under one output directory stamped with a fingerprint of
the canonical config JSON. Re-running with the same config reuses finished
artifacts; a differing fingerprint is refused rather than silently mixed.
Outputs contain no timestamps or environment state, so a rerun into a fresh
directory is byte-identical.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .core import (
    ConfigError,
    DataError,
    RankedPredictions,
    SceneGraph,
    decode_ranked,
    decode_scene_graph,
    encode_ranked,
    encode_scene_graph,
    make_ranked,
)
from .effects import EffectKind, effect, unbiased_predict
from .losses import softmax
from .metrics import EvalReport, evaluate
from .model import CausalModel, ImageArrays, forward, init_model, load_checkpoint, pack_image, save_checkpoint
from .retrieval import (
    HeteroVocab,
    RetrievalModel,
    SGEmbedConfig,
    TextDeriveConfig,
    build_text_mapping,
    derive_text_sg,
    init_retrieval_model,
    retrieval_eval,
    retrieve_train,
)
from .synth import (
    Dataset,
    WorldConfig,
    generate_dataset,
    predicate_counts,
    read_dataset_dir,
    select_zero_shot_holdout,
    write_dataset_dir,
)
from .train import TrainConfig, train

EFFECT_ROW_ORDER = ("baseline", "focal", "reweight", "resample", "x2y", "x2y_tr",
                    "te", "nie", "tie", "nde", "tde")
_T_TEXT = 45  # rng tag for text-side derivation, sub-keyed by global query index


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldConfig = WorldConfig()
    n_train: int = 500
    n_val: int = 100
    n_test: int = 200
    auto_holdout: int = 5
    tasks: tuple[str, ...] = ("predcls", "sgcls")
    debias_modes: tuple[str, ...] = ("none", "focal", "reweight", "resample", "x2y_tr")
    effects: tuple[str, ...] = ("baseline", "x2y", "te", "nie", "tde")
    train: TrainConfig = TrainConfig()
    embed: SGEmbedConfig = SGEmbedConfig()
    text_derive: TextDeriveConfig = TextDeriveConfig()
    retrieval_for: tuple[str, ...] = ("baseline", "tde")
    retrieval_gallery: int = 100
    retrieval_min_prob: float = 0.1
    ks: tuple[int, ...] = (20, 50, 100)
    graph_constraint: bool = True
    xbar_source: str = "mean"
    seed: int = 42

    def __post_init__(self):
        for t in self.tasks:
            if t not in ("predcls", "sgcls"):
                raise ConfigError(f"unknown task {t!r}")
        for kind in self.effects + self.retrieval_for:
            if kind not in [e.value for e in EffectKind]:
                raise ConfigError(f"unknown effect kind {kind!r}")
        if self.retrieval_for and "sgcls" not in self.tasks:
            raise ConfigError("retrieval needs the sgcls task for gallery graphs")
        if self.retrieval_for and "none" not in self.debias_modes:
            raise ConfigError("retrieval needs the plain-trained checkpoint")
        if min(self.n_train, self.n_val) < 1 or self.n_test < 1:
            raise ConfigError("all three splits must be non-empty")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        d["world"]["objects_per_image"] = list(self.world.objects_per_image)
        d["world"]["fg_relations_per_image"] = list(self.world.fg_relations_per_image)
        d["world"]["zero_shot_holdout"] = [list(t) for t in self.world.zero_shot_holdout]
        d["embed"]["lr_decay_epochs"] = list(self.embed.lr_decay_epochs)
        for key in ("tasks", "debias_modes", "effects", "retrieval_for", "ks"):
            d[key] = list(d[key])
        return d

    @staticmethod
    def from_json(d: dict) -> "ExperimentConfig":
        d = dict(d)
        kw = {}
        # TypeError covers unknown keys in any section and non-iterable list fields
        try:
            if "world" in d:
                w = dict(d.pop("world"))
                for key in ("objects_per_image", "fg_relations_per_image"):
                    if key in w:
                        w[key] = tuple(w[key])
                if "zero_shot_holdout" in w:
                    w["zero_shot_holdout"] = tuple(tuple(t) for t in w["zero_shot_holdout"])
                kw["world"] = WorldConfig(**w)
            if "train" in d:
                kw["train"] = TrainConfig(**d.pop("train"))
            if "embed" in d:
                e = dict(d.pop("embed"))
                if "lr_decay_epochs" in e:
                    e["lr_decay_epochs"] = tuple(e["lr_decay_epochs"])
                kw["embed"] = SGEmbedConfig(**e)
            if "text_derive" in d:
                kw["text_derive"] = TextDeriveConfig(**d.pop("text_derive"))
            for key in ("tasks", "debias_modes", "effects", "retrieval_for", "ks"):
                if key in d:
                    kw[key] = tuple(d.pop(key))
            return ExperimentConfig(**kw, **d)
        except TypeError as exc:
            raise ConfigError(f"bad experiment config: {exc}") from exc


def fingerprint(cfg: ExperimentConfig) -> str:
    return hashlib.sha256(canonical_json(cfg.to_json()).encode()).hexdigest()


# --- jsonl helpers -----------------------------------------------------------

def write_jsonl(path: str, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(canonical_json(rec) + "\n")


def read_jsonl(path: str) -> list:
    if not os.path.exists(path):
        raise DataError(f"missing file {path}")
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(json.loads(line))
    return out


# --- prediction artifacts ----------------------------------------------------

def predict_split(model: CausalModel, ds: Dataset, task: str, kind: EffectKind) -> list[RankedPredictions]:
    out = []
    for img in ds.images:
        arr = pack_image(img, model.n_object_classes, model.d_v)
        out.append(unbiased_predict(model, arr, task, kind))
    return out


def predicted_scene_graph(model: CausalModel, arr: ImageArrays, task: str, kind: EffectKind,
                          min_prob: float, boxes) -> SceneGraph:
    """Image-side graph from predictions: top-1 predicate per pair above a
    probability floor, entities labeled by the model."""
    res = effect(kind, model, arr, task)
    labels = res.observed.labels
    entities = tuple((int(labels[i]), boxes[i]) for i in range(len(labels)))
    relations = []
    if len(arr.pair_s):
        probs = softmax(res.logits[:, 1:])
        best = np.argmax(probs, axis=1)
        for e in range(len(arr.pair_s)):
            pr = float(probs[e, best[e]])
            if pr >= min_prob:
                relations.append((int(arr.pair_s[e]), int(best[e]) + 1, int(arr.pair_o[e])))
    return SceneGraph(entities, tuple(relations))


# --- report presentation -------------------------------------------------------

def emit_predicate_barchart_data(baseline: EvalReport, method: EvalReport,
                                 train_counts, predicate_names, k: int = 100) -> str:
    """CSV of per-predicate recall for two methods, sorted by training share.

    Columns: predicate, train_fraction, baseline_r{k}, method_r{k}. Rows for
    predicates absent from the split ground truth are omitted. Reports must
    agree on vocabulary size and contain the requested cutoff.
    """
    if k not in baseline.per_predicate or k not in method.per_predicate:
        raise ConfigError(f"both reports must carry per-predicate recall at k={k}")
    pb, pm = baseline.per_predicate[k], method.per_predicate[k]
    if len(pb) != len(pm) or len(pb) != len(predicate_names):
        raise ConfigError("vocabulary mismatch between reports")
    counts = np.asarray(train_counts, dtype=np.float64)
    if len(counts) != len(pb):
        raise ConfigError("train counts do not match the predicate vocabulary")
    total = counts[1:].sum()
    rows = []
    for p in range(1, len(pb)):
        if pb[p] is None or pm[p] is None:
            continue
        rows.append((predicate_names[p], counts[p] / total if total else 0.0, pb[p], pm[p]))
    rows.sort(key=lambda r: (-r[1], r[0]))
    lines = [f"predicate,train_fraction,baseline_r{k},method_r{k}"]
    for name, frac, rb, rm in rows:
        lines.append(f"{name},{frac:.6f},{rb:.6f},{rm:.6f}")
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    return "" if v is None else f"{v:.4f}"


def summary_tables(reports: dict[tuple[str, str], EvalReport], tasks, rows, ks) -> tuple[str, str]:
    """(markdown, csv) summaries of mean recall plus recall/zero-shot columns."""
    md = ["# Experiment summary", ""]
    csv_lines = []
    header = ["method"]
    for task in tasks:
        for k in ks:
            header.append(f"{task}_mR@{k}")
    csv_lines.append(",".join(header))
    for task in tasks:
        md.append(f"## {task}")
        md.append("")
        cols = [f"mR@{k}" for k in ks] + [f"R@{k}" for k in ks] + [f"ZS-R@{k}" for k in ks]
        md.append("| method | " + " | ".join(cols) + " |")
        md.append("|" + "---|" * (len(cols) + 1))
        for row in rows:
            rep = reports.get((task, row))
            if rep is None:
                continue
            cells = [_fmt(rep.mean_recall.get(k)) for k in ks]
            cells += [_fmt(rep.recall.get(k)) for k in ks]
            cells += [_fmt(rep.zero_shot_recall.get(k)) for k in ks]
            md.append(f"| {row} | " + " | ".join(cells) + " |")
        md.append("")
    for row in rows:
        cells = [row]
        seen = False
        for task in tasks:
            rep = reports.get((task, row))
            for k in ks:
                cells.append(_fmt(rep.mean_recall.get(k)) if rep else "")
            seen = seen or rep is not None
        if seen:
            csv_lines.append(",".join(cells))
    return "\n".join(md) + "\n", "\n".join(csv_lines) + "\n"


# --- pipeline ------------------------------------------------------------------

def _row_plan(cfg: ExperimentConfig) -> list[tuple[str, str, EffectKind]]:
    """Ordered (row name, checkpoint mode, effect kind) cells of the grid."""
    plan = []
    for row in EFFECT_ROW_ORDER:
        if row in ("focal", "reweight", "resample"):
            if row in cfg.debias_modes:
                plan.append((row, row, EffectKind.BASELINE))
        elif row == "x2y_tr":
            if row in cfg.debias_modes:
                plan.append((row, row, EffectKind.X2Y))
        elif row in cfg.effects:
            if "none" not in cfg.debias_modes:
                raise ConfigError(f"effect row {row!r} needs the plain-trained checkpoint")
            plan.append((row, "none", EffectKind(row)))
    return plan


def run_experiment(cfg: ExperimentConfig, out_dir: str) -> dict:
    fp = fingerprint(cfg)
    os.makedirs(out_dir, exist_ok=True)
    fp_path = os.path.join(out_dir, "fingerprint.json")
    if os.path.exists(fp_path):
        with open(fp_path) as fh:
            existing = json.load(fh)
        if existing.get("fingerprint") != fp:
            raise ConfigError(
                f"output dir {out_dir} holds artifacts for fingerprint "
                f"{existing.get('fingerprint')!r}, refusing to mix with {fp!r}"
            )
    else:
        with open(fp_path, "w") as fh:
            fh.write(canonical_json({"fingerprint": fp, "config": cfg.to_json()}) + "\n")

    # data stage
    data_dir = os.path.join(out_dir, "data")
    if not os.path.exists(os.path.join(data_dir, "world.json")):
        world_cfg = cfg.world
        if cfg.auto_holdout > 0 and not world_cfg.zero_shot_holdout:
            holdout = select_zero_shot_holdout(world_cfg, cfg.n_train, cfg.n_val, cfg.n_test,
                                               cfg.auto_holdout)
            world_cfg = replace(world_cfg, zero_shot_holdout=holdout)
        splits = generate_dataset(world_cfg, cfg.n_train, cfg.n_val, cfg.n_test)
        write_dataset_dir(data_dir, splits)
    datasets = {s: read_dataset_dir(data_dir, s) for s in ("train", "val", "test")}
    world = datasets["train"].world
    wc = world.cfg

    # training grid
    ckpt_dir = os.path.join(out_dir, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    for task in cfg.tasks:
        for mode in cfg.debias_modes:
            path = os.path.join(ckpt_dir, f"{task}_{mode}.json")
            if os.path.exists(path):
                continue
            model = init_model(wc.n_object_classes, wc.n_predicates, wc.d_r, wc.d_x, wc.d_v,
                               fusion="sum", task=task, seed=cfg.seed)
            tcfg = replace(cfg.train, debias=mode, seed=cfg.seed)
            log = train(model, datasets["train"], datasets["val"], tcfg, cfg.xbar_source)
            save_checkpoint(model, path)
            with open(path + ".log.json", "w") as fh:
                fh.write(canonical_json(log) + "\n")

    # prediction + scoring grid
    preds_dir = os.path.join(out_dir, "preds")
    reports_dir = os.path.join(out_dir, "reports")
    os.makedirs(preds_dir, exist_ok=True)
    os.makedirs(reports_dir, exist_ok=True)
    plan = _row_plan(cfg)
    reports: dict[tuple[str, str], EvalReport] = {}
    test_by_id = {img.image_id: img for img in datasets["test"].images}
    for task in cfg.tasks:
        models = {}
        for row, mode, kind in plan:
            ppath = os.path.join(preds_dir, f"{task}_{row}.jsonl")
            rpath = os.path.join(reports_dir, f"{task}_{row}.json")
            if not os.path.exists(ppath):
                if mode not in models:
                    models[mode] = load_checkpoint(os.path.join(ckpt_dir, f"{task}_{mode}.json"))
                preds = predict_split(models[mode], datasets["test"], task, kind)
                write_jsonl(ppath, (encode_ranked(p) for p in preds))
            if not os.path.exists(rpath):
                preds = [decode_ranked(d) for d in read_jsonl(ppath)]
                pairs = [(p, test_by_id[p.image_id].gt) for p in preds]
                rep = evaluate(pairs, cfg.ks, wc.n_predicates,
                               registry=datasets["test"].train_triplet_registry,
                               graph_constraint=cfg.graph_constraint, task=task, method=row)
                with open(rpath, "w") as fh:
                    fh.write(canonical_json(rep.to_json()) + "\n")
            with open(rpath) as fh:
                reports[(task, row)] = EvalReport.from_json(json.load(fh))

    # retrieval stage
    retrieval_reports = {}
    if cfg.retrieval_for:
        mapping = build_text_mapping(world.object_vocab, world.predicate_vocab, cfg.seed,
                                     cfg.text_derive)
        vocab = HeteroVocab(world.object_vocab, world.predicate_vocab,
                            mapping.text_entities, mapping.text_predicates)
        sg_model = load_checkpoint(os.path.join(ckpt_dir, "sgcls_none.json"))
        g = min(cfg.retrieval_gallery, len(datasets["test"].images))

        def text_graphs(ds: Dataset, offset: int, limit: int | None = None) -> list[SceneGraph]:
            imgs = ds.images if limit is None else ds.images[:limit]
            out = []
            for i, img in enumerate(imgs):
                rng = np.random.default_rng([cfg.seed, _T_TEXT, offset + i])
                out.append(derive_text_sg(img.gt, mapping, cfg.text_derive, rng))
            return out

        def image_graphs(ds: Dataset, kind: EffectKind, limit: int | None = None) -> list[SceneGraph]:
            imgs = ds.images if limit is None else ds.images[:limit]
            out = []
            for img in imgs:
                arr = pack_image(img, sg_model.n_object_classes, sg_model.d_v)
                boxes = [b for _c, b in img.gt.entities]
                out.append(predicted_scene_graph(sg_model, arr, "sgcls", kind,
                                                 cfg.retrieval_min_prob, boxes))
            return out

        train_text = text_graphs(datasets["train"], 0)
        test_text = text_graphs(datasets["test"], len(datasets["train"].images), g)
        for kind_name in cfg.retrieval_for:
            kind = EffectKind(kind_name)
            rpath = os.path.join(reports_dir, f"retrieval_{kind_name}.json")
            if not os.path.exists(rpath):
                train_imgs = image_graphs(datasets["train"], kind)
                gallery = image_graphs(datasets["test"], kind, g)
                rmodel = init_retrieval_model(replace(cfg.embed, seed=cfg.seed), vocab)
                rlog = retrieve_train(list(zip(train_text, train_imgs)), rmodel)
                ks = tuple(k for k in (20, 100) if k <= g)
                rep = retrieval_eval(rmodel, test_text, gallery, ks)
                rep["method"] = kind_name
                rep["train_log_tail"] = rlog["epochs"][-1]
                with open(rpath, "w") as fh:
                    fh.write(canonical_json(rep) + "\n")
            with open(rpath) as fh:
                retrieval_reports[kind_name] = json.load(fh)

    # presentation stage
    rows = [row for row, _m, _k in plan]
    md, csv = summary_tables(reports, cfg.tasks, rows, cfg.ks)
    if retrieval_reports:
        md += "\n## retrieval\n\n| method | R@20 | R@100 | Med |\n|---|---|---|---|\n"
        for name in cfg.retrieval_for:
            rep = retrieval_reports[name]
            r20 = rep["recall"].get("20")
            r100 = rep["recall"].get("100")
            md += (f"| {name} | {_fmt(r20)} | {_fmt(r100)} | {rep['median_rank']} |\n")
    with open(os.path.join(reports_dir, "summary.md"), "w") as fh:
        fh.write(md)
    with open(os.path.join(reports_dir, "summary.csv"), "w") as fh:
        fh.write(csv)
    train_counts = predicate_counts(datasets["train"])
    names = world.predicate_vocab.names
    for task in cfg.tasks:
        base = reports.get((task, "baseline"))
        if base is None or 100 not in cfg.ks:
            continue
        for row, _m, _k in plan:
            if row == "baseline":
                continue
            rep = reports.get((task, row))
            if rep is None:
                continue
            csv_text = emit_predicate_barchart_data(base, rep, train_counts, names, 100)
            with open(os.path.join(reports_dir, f"barchart_{task}_{row}.csv"), "w") as fh:
                fh.write(csv_text)
    return {
        "fingerprint": fp,
        "out_dir": out_dir,
        "rows": rows,
        "reports": {f"{t}_{r}": rep.to_json() for (t, r), rep in reports.items()},
        "retrieval": retrieval_reports,
    }
