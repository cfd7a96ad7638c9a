"""Seeded synthetic benchmark with a configurable long-tailed predicate prior.

A world draws class prototypes and mixing matrices once from the seed; every
image is then generated from an RNG keyed by (seed, global image index), so any
image is reproducible in isolation and datasets are shareable as JSON lines
plus a world manifest.

Bias enters through two channels: the sampling prior (global Zipf mixed with a
pair-conditional Zipf permutation) and the pair-class signature injected into
union contexts, which lets context branches of a predictor cheat from class
identity alone. Genuine predicate evidence is injected into the participating
objects' raw features and, more weakly, into the union context.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace, asdict
from typing import Iterable

import numpy as np

from .core import (
    BACKGROUND,
    BoundingBox,
    ConfigError,
    DataError,
    DetectedObject,
    PairSample,
    SceneGraph,
    Vocabulary,
    canonical_triplet_set,
    decode_scene_graph,
    encode_scene_graph,
    object_vocabulary,
    predicate_vocabulary,
)

CANVAS = 1024.0  # image coordinate range, also the box normalizer downstream
BACKGROUND_RATIO = 3  # negative pairs materialized per foreground relation

# rng stream tags, frozen: changing any value changes every generated world
_T_PROTO, _T_MU, _T_AS, _T_AO, _T_B, _T_C, _T_XI, _T_PAIR, _T_IMAGE = range(1, 10)

# mixing matrix scales, frozen with the rng tags: they set how strongly the
# true predicate signal (endpoint and union channels) competes with the
# class-pair signature that context branches can cheat from
ENDPOINT_SIGNAL_SCALE = 0.1
UNION_SIGNAL_SCALE = 0.05
PAIR_SIGNATURE_SCALE = 1.0


@dataclass(frozen=True)
class WorldConfig:
    n_object_classes: int = 15
    n_predicates: int = 11  # including background at index 0
    d_r: int = 32
    d_x: int = 32
    d_v: int = 32
    zipf_s: float = 1.5
    context_mix: float = 0.7
    signal_strength: float = 1.0
    noise_sigma: float = 0.3
    objects_per_image: tuple[int, int] = (4, 8)
    fg_relations_per_image: tuple[int, int] = (2, 5)
    tentative_accuracy: float = 0.9
    zero_shot_holdout: tuple[tuple[int, int, int], ...] = ()
    seed: int = 42

    def __post_init__(self):
        object.__setattr__(self, "objects_per_image", tuple(int(v) for v in self.objects_per_image))
        object.__setattr__(self, "fg_relations_per_image", tuple(int(v) for v in self.fg_relations_per_image))
        object.__setattr__(
            self, "zero_shot_holdout", tuple(tuple(int(v) for v in t) for t in self.zero_shot_holdout)
        )
        if self.n_object_classes < 1:
            raise ConfigError("need at least 1 object class")
        if self.n_predicates < 2:
            raise ConfigError("need background + at least 1 foreground predicate")
        if min(self.d_r, self.d_x, self.d_v) < 1:
            raise ConfigError("feature dims must be positive")
        if self.zipf_s <= 0:
            raise ConfigError("zipf_s must be positive")
        if not (0.0 <= self.context_mix <= 1.0):
            raise ConfigError("context_mix must lie in [0, 1]")
        if self.noise_sigma < 0 or self.signal_strength < 0:
            raise ConfigError("noise/signal must be non-negative")
        lo, hi = self.objects_per_image
        if not (2 <= lo <= hi):
            raise ConfigError("objects_per_image range must satisfy 2 <= lo <= hi")
        flo, fhi = self.fg_relations_per_image
        if not (1 <= flo <= fhi):
            raise ConfigError("fg_relations_per_image range must satisfy 1 <= lo <= hi")
        if fhi > lo * (lo - 1):
            raise ConfigError(
                f"fg_relations_per_image max {fhi} exceeds ordered pairs {lo * (lo - 1)} of the smallest image"
            )
        if not (0.0 < self.tentative_accuracy <= 1.0):
            raise ConfigError("tentative_accuracy must lie in (0, 1]")
        for s, p, o in self.zero_shot_holdout:
            if not (0 <= s < self.n_object_classes and 0 <= o < self.n_object_classes):
                raise ConfigError(f"holdout triplet ({s},{p},{o}) has a bad class index")
            if not (0 < p < self.n_predicates):
                raise ConfigError(f"holdout triplet ({s},{p},{o}) must use a foreground predicate")
        # renormalized holdout sampling requires every class pair to keep >= 1 predicate
        by_pair: dict[tuple[int, int], set[int]] = {}
        for s, p, o in self.zero_shot_holdout:
            by_pair.setdefault((s, o), set()).add(p)
        for pair, preds in by_pair.items():
            if len(preds) >= self.n_predicates - 1:
                raise ConfigError(f"holdout blocks every foreground predicate of class pair {pair}")


@dataclass(frozen=True)
class World:
    """Frozen generative parameters derived from a WorldConfig."""

    cfg: WorldConfig
    object_vocab: Vocabulary
    predicate_vocab: Vocabulary
    prototypes: np.ndarray  # (N, d_r) per-class means
    mu: np.ndarray  # (P, d_r) per-predicate signal directions, row 0 unused
    a_subject: np.ndarray  # (d_r, d_r) mixes mu into subject raw features
    a_object: np.ndarray  # (d_r, d_r)
    b_union: np.ndarray  # (d_v, d_r) mixes mu into union contexts
    c_union: np.ndarray  # (d_v, d_v) mixes pair signatures into union contexts
    xi: np.ndarray  # (N*N, d_v) pair-class signatures


def build_world(cfg: WorldConfig) -> World:
    n, p = cfg.n_object_classes, cfg.n_predicates
    protos = np.random.default_rng([cfg.seed, _T_PROTO]).standard_normal((n, cfg.d_r))
    mu = np.random.default_rng([cfg.seed, _T_MU]).standard_normal((p, cfg.d_r))
    mu[BACKGROUND] = 0.0
    scale_a = ENDPOINT_SIGNAL_SCALE / np.sqrt(cfg.d_r)
    a_s = np.random.default_rng([cfg.seed, _T_AS]).standard_normal((cfg.d_r, cfg.d_r)) * scale_a
    a_o = np.random.default_rng([cfg.seed, _T_AO]).standard_normal((cfg.d_r, cfg.d_r)) * scale_a
    b = np.random.default_rng([cfg.seed, _T_B]).standard_normal((cfg.d_v, cfg.d_r)) * (
        UNION_SIGNAL_SCALE / np.sqrt(cfg.d_r))
    c = np.random.default_rng([cfg.seed, _T_C]).standard_normal((cfg.d_v, cfg.d_v)) * (
        PAIR_SIGNATURE_SCALE / np.sqrt(cfg.d_v))
    xi = np.random.default_rng([cfg.seed, _T_XI]).standard_normal((n * n, cfg.d_v))
    return World(cfg, object_vocabulary(n), predicate_vocabulary(p), protos, mu, a_s, a_o, b, c, xi)


def predicate_prior(cfg: WorldConfig, subject_class: int, object_class: int) -> np.ndarray:
    """Foreground predicate distribution for one ordered class pair.

    Mixes a global Zipf over predicate index with a Zipf over a pair-specific
    rank permutation keyed by (seed, subject class, object class). Returned
    vector has length n_predicates - 1; slot k is predicate index k + 1.
    """
    m = cfg.n_predicates - 1
    global_rank = np.arange(1, m + 1, dtype=np.float64)
    perm = np.random.default_rng([cfg.seed, _T_PAIR, subject_class, object_class]).permutation(m)
    pair_rank = (perm + 1).astype(np.float64)
    w = cfg.context_mix * global_rank**-cfg.zipf_s + (1.0 - cfg.context_mix) * pair_rank**-cfg.zipf_s
    return w / w.sum()


def prior_marginal(cfg: WorldConfig) -> np.ndarray:
    """Exact predicate marginal under uniform ordered class pairs."""
    n = cfg.n_object_classes
    acc = np.zeros(cfg.n_predicates - 1)
    for s in range(n):
        for o in range(n):
            acc += predicate_prior(cfg, s, o)
    return acc / (n * n)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    objects: tuple[DetectedObject, ...]
    pairs: tuple[PairSample, ...]
    gt: SceneGraph


@dataclass(frozen=True)
class Dataset:
    split: str
    images: tuple[ImageRecord, ...]
    world: World
    train_triplet_registry: frozenset[tuple[int, int, int]]


def _random_box(rng: np.random.Generator) -> BoundingBox:
    x1 = rng.uniform(0.0, CANVAS - 32.0)
    y1 = rng.uniform(0.0, CANVAS - 32.0)
    x2 = x1 + rng.uniform(16.0, CANVAS - x1)
    y2 = y1 + rng.uniform(16.0, CANVAS - y1)
    return BoundingBox(x1, y1, min(x2, CANVAS), min(y2, CANVAS))


def _generate_image(world: World, split: str, global_idx: int, image_id: str,
                    holdout_active: bool, priors: dict) -> ImageRecord:
    cfg = world.cfg
    n_cls = cfg.n_object_classes
    rng = np.random.default_rng([cfg.seed, _T_IMAGE, global_idx])

    lo, hi = cfg.objects_per_image
    n_obj = int(rng.integers(lo, hi + 1))
    classes = rng.integers(0, n_cls, n_obj)
    boxes = [_random_box(rng) for _ in range(n_obj)]
    raw = world.prototypes[classes] + rng.normal(0.0, cfg.noise_sigma, (n_obj, cfg.d_r))

    all_pairs = [(i, j) for i in range(n_obj) for j in range(n_obj) if i != j]
    flo, fhi = cfg.fg_relations_per_image
    n_fg = min(int(rng.integers(flo, fhi + 1)), len(all_pairs))
    fg_pick = rng.choice(len(all_pairs), size=n_fg, replace=False)

    held: dict[tuple[int, int], set[int]] = {}
    if holdout_active:
        for s, p, o in cfg.zero_shot_holdout:
            held.setdefault((s, o), set()).add(p)

    relations = []
    for k in fg_pick:
        i, j = all_pairs[k]
        key = (int(classes[i]), int(classes[j]))
        if key not in priors:
            priors[key] = predicate_prior(cfg, key[0], key[1])
        prior = priors[key]
        blocked = held.get(key)
        if blocked:
            prior = prior.copy()
            for p in blocked:
                prior[p - 1] = 0.0
            prior = prior / prior.sum()
        pred = int(rng.choice(cfg.n_predicates - 1, p=prior)) + 1
        relations.append((i, pred, j))
        # inject predicate evidence into both endpoint features
        raw[i] += cfg.signal_strength * (world.a_subject @ world.mu[pred])
        raw[j] += cfg.signal_strength * (world.a_object @ world.mu[pred])

    fg_keys = {(i, j) for i, _p, j in relations}
    remaining = [pr for pr in all_pairs if pr not in fg_keys]
    n_bg = min(BACKGROUND_RATIO * len(relations), len(remaining))
    bg_pick = rng.choice(len(remaining), size=n_bg, replace=False) if n_bg else np.array([], dtype=int)

    def union_ctx(ci: int, cj: int, pred: int) -> np.ndarray:
        v = world.c_union @ world.xi[ci * n_cls + cj] + rng.normal(0.0, cfg.noise_sigma, cfg.d_v)
        if pred != BACKGROUND:
            v = v + world.b_union @ world.mu[pred]
        return v

    pairs = []
    for i, pred, j in relations:
        pairs.append(PairSample(i, j, union_ctx(int(classes[i]), int(classes[j]), pred), pred))
    for k in bg_pick:
        i, j = remaining[int(k)]
        pairs.append(PairSample(i, j, union_ctx(int(classes[i]), int(classes[j]), BACKGROUND), BACKGROUND))

    keep = rng.random(n_obj) < cfg.tentative_accuracy
    # uniform over wrong classes; with a single class there is no wrong label
    offsets = rng.integers(1, n_cls, n_obj) if n_cls > 1 else np.zeros(n_obj, dtype=np.int64)
    tentative = np.where(keep, classes, (classes + offsets) % n_cls)

    objects = tuple(
        DetectedObject(boxes[i], raw[i].copy(), int(tentative[i])) for i in range(n_obj)
    )
    gt = SceneGraph(tuple((int(classes[i]), boxes[i]) for i in range(n_obj)), tuple(relations))
    return ImageRecord(image_id, objects, tuple(pairs), gt)


def generate_dataset(cfg: WorldConfig, n_train: int, n_val: int, n_test: int) -> dict[str, Dataset]:
    """Generate train/val/test splits sharing one world; holdout excluded from train only."""
    if min(n_train, n_val, n_test) < 0:
        raise ConfigError("split sizes must be non-negative")
    world = build_world(cfg)
    priors: dict = {}
    splits: dict[str, Dataset] = {}
    counts = {"train": n_train, "val": n_val, "test": n_test}
    gidx = 0
    images_by_split: dict[str, list[ImageRecord]] = {}
    for split in ("train", "val", "test"):
        imgs = []
        for k in range(counts[split]):
            imgs.append(
                _generate_image(world, split, gidx, f"{split}-{k:05d}", split == "train", priors)
            )
            gidx += 1
        images_by_split[split] = imgs
    registry = frozenset(
        t for img in images_by_split["train"] for t in canonical_triplet_set(img.gt)
    )
    for split in ("train", "val", "test"):
        splits[split] = Dataset(split, tuple(images_by_split[split]), world, registry)
    return splits


def predicate_counts(ds: Dataset) -> np.ndarray:
    """Ground-truth relation counts per predicate index (background stays 0)."""
    counts = np.zeros(ds.world.cfg.n_predicates, dtype=np.int64)
    for img in ds.images:
        for _s, p, _o in img.gt.relations:
            counts[p] += 1
    return counts


def select_zero_shot_holdout(cfg: WorldConfig, n_train: int, n_val: int, n_test: int,
                             count: int = 5) -> tuple[tuple[int, int, int], ...]:
    """Pick holdout triplets guaranteed to occur in the test split.

    Probes a generation with an empty holdout (test/val draws are unaffected by
    the holdout, so the probe's test split equals the final one), then picks
    `count` triplets seen in test, preferring ones also seen in train and
    spreading across distinct predicates. Deterministic given cfg and sizes.
    """
    probe_cfg = replace(cfg, zero_shot_holdout=())
    probe = generate_dataset(probe_cfg, n_train, n_val, n_test)
    test_counts: dict[tuple[int, int, int], int] = {}
    for img in probe["test"].images:
        for t in canonical_triplet_set(img.gt):
            test_counts[t] = test_counts.get(t, 0) + 1
    train_set = probe["train"].train_triplet_registry
    candidates = sorted(
        test_counts,
        key=lambda t: (t not in train_set, -test_counts[t], t),
    )
    chosen: list[tuple[int, int, int]] = []
    used_preds: set[int] = set()
    for t in candidates:  # first pass: distinct predicates
        if len(chosen) == count:
            break
        if t[1] not in used_preds:
            chosen.append(t)
            used_preds.add(t[1])
    for t in candidates:
        if len(chosen) == count:
            break
        if t not in chosen:
            chosen.append(t)
    if len(chosen) < count:
        raise DataError(f"test split exposes only {len(chosen)} distinct triplets, needed {count}")
    return tuple(sorted(chosen))


# --- persistence ---------------------------------------------------------

def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _encode_image(img: ImageRecord) -> dict:
    return {
        "image_id": img.image_id,
        "objects": [
            {
                "box": [o.box.x1, o.box.y1, o.box.x2, o.box.y2],
                "raw": o.raw_feature.tolist(),
                "tentative": o.tentative_label,
            }
            for o in img.objects
        ],
        "pairs": [
            {"s": p.subject_idx, "o": p.object_idx, "gt": p.gt_predicate, "union": p.union_context.tolist()}
            for p in img.pairs
        ],
        "gt": encode_scene_graph(img.gt),
    }


def _decode_image(d: dict) -> ImageRecord:
    try:
        objects = tuple(
            DetectedObject(
                BoundingBox(*map(float, o["box"])),
                np.asarray(o["raw"], dtype=np.float64),
                int(o["tentative"]),
            )
            for o in d["objects"]
        )
        pairs = tuple(
            PairSample(int(p["s"]), int(p["o"]), np.asarray(p["union"], dtype=np.float64), int(p["gt"]))
            for p in d["pairs"]
        )
        return ImageRecord(str(d["image_id"]), objects, pairs, decode_scene_graph(d["gt"]))
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed image record: {exc}") from exc


def world_manifest(world: World, registry: frozenset, split_sizes: dict[str, int],
                   train_counts: np.ndarray) -> dict:
    cfg = asdict(world.cfg)
    cfg["objects_per_image"] = list(world.cfg.objects_per_image)
    cfg["fg_relations_per_image"] = list(world.cfg.fg_relations_per_image)
    cfg["zero_shot_holdout"] = [list(t) for t in world.cfg.zero_shot_holdout]
    return {
        "config": cfg,
        "object_vocab": list(world.object_vocab.names),
        "predicate_vocab": list(world.predicate_vocab.names),
        "prototypes": world.prototypes.tolist(),
        "mu": world.mu.tolist(),
        "a_subject": world.a_subject.tolist(),
        "a_object": world.a_object.tolist(),
        "b_union": world.b_union.tolist(),
        "c_union": world.c_union.tolist(),
        "xi": world.xi.tolist(),
        "train_triplet_registry": sorted(list(t) for t in registry),
        "train_predicate_counts": train_counts.tolist(),
        "splits": split_sizes,
    }


def write_dataset_dir(out_dir: str, splits: dict[str, Dataset]) -> None:
    os.makedirs(out_dir, exist_ok=True)
    world = splits["train"].world
    sizes = {name: len(ds.images) for name, ds in splits.items()}
    manifest = world_manifest(world, splits["train"].train_triplet_registry, sizes,
                              predicate_counts(splits["train"]))
    with open(os.path.join(out_dir, "world.json"), "w") as fh:
        fh.write(_dump(manifest) + "\n")
    for name, ds in splits.items():
        with open(os.path.join(out_dir, f"{name}.jsonl"), "w") as fh:
            for img in ds.images:
                fh.write(_dump(_encode_image(img)) + "\n")


def read_manifest(data_dir: str) -> dict:
    path = os.path.join(data_dir, "world.json")
    if not os.path.exists(path):
        raise DataError(f"missing world manifest at {path}")
    with open(path) as fh:
        return json.load(fh)


def world_from_manifest(manifest: dict) -> World:
    c = dict(manifest["config"])
    c["objects_per_image"] = tuple(c["objects_per_image"])
    c["fg_relations_per_image"] = tuple(c["fg_relations_per_image"])
    c["zero_shot_holdout"] = tuple(tuple(t) for t in c["zero_shot_holdout"])
    cfg = WorldConfig(**c)
    return World(
        cfg,
        Vocabulary(tuple(manifest["object_vocab"]), "object"),
        Vocabulary(tuple(manifest["predicate_vocab"]), "predicate"),
        np.asarray(manifest["prototypes"], dtype=np.float64),
        np.asarray(manifest["mu"], dtype=np.float64),
        np.asarray(manifest["a_subject"], dtype=np.float64),
        np.asarray(manifest["a_object"], dtype=np.float64),
        np.asarray(manifest["b_union"], dtype=np.float64),
        np.asarray(manifest["c_union"], dtype=np.float64),
        np.asarray(manifest["xi"], dtype=np.float64),
    )


def read_dataset_dir(data_dir: str, split: str) -> Dataset:
    manifest = read_manifest(data_dir)
    world = world_from_manifest(manifest)
    registry = frozenset(tuple(t) for t in manifest["train_triplet_registry"])
    path = os.path.join(data_dir, f"{split}.jsonl")
    if not os.path.exists(path):
        raise DataError(f"missing split file {path}")
    images = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                images.append(_decode_image(json.loads(line)))
    return Dataset(split, tuple(images), world, registry)
