"""Probe builders shared by test modules."""

from __future__ import annotations

import numpy as np

from sgdebias.core import BoundingBox, SceneGraph, make_ranked
from sgdebias.effects import EffectKind, unbiased_predict
from sgdebias.model import CausalModel, ImageArrays, init_model, pack_image


def make_probe_model(fusion="sum", task="predcls", seed=0, n_cls=5, n_pred=4,
                     d_r=6, d_x=6, d_v=6, scale=1.0, xbar_seed=100) -> CausalModel:
    """Seeded model with a frozen synthetic reference feature and marginal."""
    model = init_model(n_cls, n_pred, d_r, d_x, d_v, fusion=fusion, task=task, seed=seed)
    if scale != 1.0:
        for _name, arr in model.param_items():
            arr *= scale
    rng = np.random.default_rng([xbar_seed, seed])
    model.xbar = rng.normal(0.0, 1.0, d_x)
    marg = rng.random(n_cls) + 0.1
    model.label_marginal = marg / marg.sum()
    return model


def random_image_arrays(rng, model: CausalModel, n_obj=4, n_pairs=5) -> ImageArrays:
    """Random packed image compatible with a probe model's dimensions."""
    n_cls = model.n_object_classes
    enc_in = rng.normal(0.0, 1.0, (n_obj, model.enc_in_dim))
    gt_classes = rng.integers(0, n_cls, n_obj)
    all_pairs = [(i, j) for i in range(n_obj) for j in range(n_obj) if i != j]
    take = rng.choice(len(all_pairs), size=min(n_pairs, len(all_pairs)), replace=False)
    pair_s = np.array([all_pairs[int(k)][0] for k in take], dtype=np.int64)
    pair_o = np.array([all_pairs[int(k)][1] for k in take], dtype=np.int64)
    unions = rng.normal(0.0, 1.0, (len(take), model.d_v))
    gt_predicates = rng.integers(0, model.n_predicates, len(take))
    return ImageArrays("probe", enc_in, gt_classes, pair_s, pair_o, unions, gt_predicates)


def predict_pairs(model, ds, task, kind: EffectKind):
    """[(ranked predictions, gt graph)] over a dataset split."""
    out = []
    for img in ds.images:
        arr = pack_image(img, model.n_object_classes, model.d_v)
        out.append((unbiased_predict(model, arr, task, kind), img.gt))
    return out


def to_plain(preds, gt: SceneGraph):
    """(triplets, entity classes, relations) plain form for the oracles."""
    classes = [c for c, _b in gt.entities]
    return list(preds.triplets), classes, list(gt.relations)


def unit_box(i: int = 0) -> BoundingBox:
    return BoundingBox(10.0 * i, 5.0, 10.0 * i + 20.0, 40.0)


def graph_of(n_entities, relations, classes=None) -> SceneGraph:
    classes = list(range(n_entities)) if classes is None else classes
    ents = tuple((classes[i], unit_box(i)) for i in range(n_entities))
    return SceneGraph(ents, tuple(relations))


def random_instance(rng, n_classes=4, n_predicates=5):
    """Random small ranked-prediction instance for metric oracle checks.

    Up to 5 entities and 5 gt relations; prediction triplets cover every
    ordered pair with every foreground predicate at random scores, with some
    deliberately duplicated scores to exercise tie handling and a coin flip
    on whether predicted classes match the ground truth.
    """
    n_ent = int(rng.integers(2, 6))
    classes = [int(rng.integers(0, n_classes)) for _ in range(n_ent)]
    graph = graph_of(n_ent, [], classes)
    pairs = [(i, j) for i in range(n_ent) for j in range(n_ent) if i != j]
    n_rel = int(rng.integers(1, 6))
    rel_pick = rng.choice(len(pairs), size=min(n_rel, len(pairs)), replace=False)
    relations = []
    for k in rel_pick:
        s, o = pairs[int(k)]
        relations.append((s, int(rng.integers(1, n_predicates)), o))
    graph = graph_of(n_ent, relations, classes)

    score_pool = np.round(rng.random(7), 2)  # few distinct values force ties
    triplets = []
    for s, o in pairs:
        for p in range(1, n_predicates):
            s_cls = classes[s] if rng.random() < 0.8 else int(rng.integers(0, n_classes))
            o_cls = classes[o] if rng.random() < 0.8 else int(rng.integers(0, n_classes))
            score = float(score_pool[int(rng.integers(0, len(score_pool)))])
            triplets.append((s, s_cls, p, o, o_cls, score))
    preds = make_ranked(f"inst-{rng.integers(1 << 30)}", triplets)
    return preds, graph
