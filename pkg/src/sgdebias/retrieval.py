"""Sentence-graph to image-graph retrieval via bilinear glimpse attention.

Both sides embed a scene graph into one vector: entity rows attend to
relation rows through the graph's row-normalized connection matrix inside a
stack of residual layers, entity rows are pooled, and a two-stage rectified
projection produces the final embedding. The two sides own their vocabulary
tables; every later stage shares parameters. Training minimizes an L1 triplet
hinge with in-batch negatives, and retrieval ranks galleries by ascending L1
distance. All gradients are hand-written and finite-difference checkable.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np

from .core import ConfigError, DataError, SceneGraph, Vocabulary
from .synth import Dataset

SIDES = ("text", "image")


@dataclass(frozen=True)
class SGEmbedConfig:
    n_d: int = 512
    n_glimpses: int = 8
    residual_layers: int = 2
    out_dim: int | None = None  # default 2 * n_d for both projection stages
    pool: str = "sum"  # or "mean"
    margin: float = 1.0
    epochs: int = 30
    batch_size: int = 12
    lr: float = 0.12
    lr_decay_epochs: tuple[int, ...] = (10, 25)
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.pool not in ("sum", "mean"):
            raise ConfigError(f"pool must be sum or mean, got {self.pool!r}")
        if min(self.n_d, self.n_glimpses, self.residual_layers) < 1:
            raise ConfigError("n_d, n_glimpses, residual_layers must be positive")
        if self.margin < 0:
            raise ConfigError("margin must be non-negative")
        object.__setattr__(self, "lr_decay_epochs", tuple(int(e) for e in self.lr_decay_epochs))

    @property
    def proj_dim(self) -> int:
        return 2 * self.n_d if self.out_dim is None else self.out_dim


@dataclass(frozen=True)
class HeteroVocab:
    image_entities: Vocabulary
    image_predicates: Vocabulary
    text_entities: Vocabulary  # index 0 reserved for the unknown token
    text_predicates: Vocabulary  # index 0 background (unused), index 1 unknown

    def sizes(self, side: str) -> tuple[int, int]:
        if side == "image":
            return self.image_entities.size, self.image_predicates.size
        if side == "text":
            return self.text_entities.size, self.text_predicates.size
        raise ConfigError(f"bad side {side!r}")

    def to_json(self) -> dict:
        return {
            "image_entities": list(self.image_entities.names),
            "image_predicates": list(self.image_predicates.names),
            "text_entities": list(self.text_entities.names),
            "text_predicates": list(self.text_predicates.names),
        }

    @staticmethod
    def from_json(d: dict) -> "HeteroVocab":
        try:
            return HeteroVocab(
                Vocabulary(tuple(d["image_entities"]), "object"),
                Vocabulary(tuple(d["image_predicates"]), "predicate"),
                Vocabulary(tuple(d["text_entities"]), "object"),
                Vocabulary(tuple(d["text_predicates"]), "predicate"),
            )
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed vocab manifest: {exc}") from exc


UNK_ENTITY = 0
UNK_PREDICATE = 1


@dataclass
class RetrievalModel:
    cfg: SGEmbedConfig
    vocab: HeteroVocab
    params: dict[str, np.ndarray]

    def param_items(self):
        return sorted(self.params.items())


def init_retrieval_model(cfg: SGEmbedConfig, vocab: HeteroVocab, seed: int | None = None) -> RetrievalModel:
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng([seed, 41])
    d, g = cfg.n_d, cfg.n_glimpses
    out = cfg.proj_dim

    def w(*shape):
        return rng.normal(0.0, cfg.init_std, shape)

    params: dict[str, np.ndarray] = {}
    for side in SIDES:
        ne, np_ = vocab.sizes(side)
        params[f"{side}_ent"] = w(ne, d)
        params[f"{side}_sub"] = w(ne, d)
        params[f"{side}_obj"] = w(ne, d)
        params[f"{side}_prd"] = w(np_, d)
    for i in range(cfg.residual_layers):
        params[f"ban{i}_we"] = w(d, g)
        params[f"ban{i}_wr"] = w(3 * d, g)
        params[f"ban{i}_wc"] = w(g, d)
        params[f"ban{i}_bc"] = np.zeros(d)
    params["w1"] = w(d, out)
    params["b1"] = np.zeros(out)
    params["w2"] = w(out, out)
    params["b2"] = np.zeros(out)
    return RetrievalModel(cfg, vocab, params)


# --- forward ----------------------------------------------------------------

def build_connection(g: SceneGraph) -> np.ndarray:
    """Row-normalized entity-to-relation incidence; all-zero rows stay zero."""
    n_e, n_r = len(g.entities), len(g.relations)
    m = np.zeros((n_e, n_r))
    for j, (s, _p, o) in enumerate(g.relations):
        m[s, j] = 1.0
        m[o, j] = 1.0
    sums = m.sum(axis=1, keepdims=True)
    return np.divide(m, sums, out=np.zeros_like(m), where=sums > 0)


def ban_layer(layer_params: dict[str, np.ndarray], f_in: np.ndarray, r: np.ndarray,
              a: np.ndarray) -> tuple[np.ndarray, dict]:
    """One glimpse-attention residual step: F + broadcast(FC(c)).

    c_p bilinearly pools entity rows against relation rows through a. With no
    relations the bilinear sum is empty and the layer is the identity.
    """
    if r.shape[0] == 0:
        return f_in, {"empty": True, "f_in": f_in}
    u = f_in @ layer_params["we"]  # (N_e, N_p)
    v = r @ layer_params["wr"]  # (N_r, N_p)
    av = a @ v  # (N_e, N_p)
    c = np.einsum("ip,ip->p", u, av)
    fvec = c @ layer_params["wc"] + layer_params["bc"]
    f_out = f_in + fvec[None, :]
    return f_out, {"empty": False, "f_in": f_in, "u": u, "v": v, "av": av, "c": c}


def _graph_ids(g: SceneGraph) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    ents = np.array([c for c, _b in g.entities], dtype=np.int64)
    if g.relations:
        subs = np.array([ents[s] for s, _p, _o in g.relations], dtype=np.int64)
        prds = np.array([p for _s, p, _o in g.relations], dtype=np.int64)
        objs = np.array([ents[o] for _s, _p, o in g.relations], dtype=np.int64)
    else:
        subs = prds = objs = np.zeros(0, dtype=np.int64)
    return ents, subs, prds, objs


def embed_graph(model: RetrievalModel, g: SceneGraph, side: str) -> tuple[np.ndarray, dict]:
    """Embed one graph; returns (vector, cache for backward)."""
    if side not in SIDES:
        raise ConfigError(f"bad side {side!r}")
    if len(g.entities) == 0:
        raise DataError("cannot embed a graph with no entities")
    p = model.params
    cfg = model.cfg
    ents, subs, prds, objs = _graph_ids(g)
    f = p[f"{side}_ent"][ents]
    r = np.concatenate(
        [p[f"{side}_sub"][subs], p[f"{side}_prd"][prds], p[f"{side}_obj"][objs]], axis=1
    ) if len(prds) else np.zeros((0, 3 * cfg.n_d))
    a = build_connection(g)
    layer_caches = []
    for i in range(cfg.residual_layers):
        lp = {k: p[f"ban{i}_{k}"] for k in ("we", "wr", "wc", "bc")}
        f, cache = ban_layer(lp, f, r, a)
        layer_caches.append(cache)
    pooled = f.sum(axis=0) if cfg.pool == "sum" else f.mean(axis=0)
    pre1 = pooled @ p["w1"] + p["b1"]
    h1 = np.maximum(pre1, 0.0)
    pre2 = h1 @ p["w2"] + p["b2"]
    out = np.maximum(pre2, 0.0)
    cache = {
        "side": side, "ents": ents, "subs": subs, "prds": prds, "objs": objs,
        "r": r, "a": a, "layers": layer_caches, "f_final": f, "pooled": pooled,
        "pre1": pre1, "h1": h1, "pre2": pre2, "n_e": len(ents),
    }
    return out, cache


def embed_backward(model: RetrievalModel, cache: dict, d_out: np.ndarray,
                   grads: dict[str, np.ndarray]) -> None:
    """Accumulate parameter gradients of one tower given d(loss)/d(embedding)."""
    p = model.params
    cfg = model.cfg
    side = cache["side"]
    dpre2 = d_out * (cache["pre2"] > 0.0)
    grads["w2"] += np.outer(cache["h1"], dpre2)
    grads["b2"] += dpre2
    dh1 = dpre2 @ p["w2"].T
    dpre1 = dh1 * (cache["pre1"] > 0.0)
    grads["w1"] += np.outer(cache["pooled"], dpre1)
    grads["b1"] += dpre1
    dpooled = dpre1 @ p["w1"].T
    n_e = cache["n_e"]
    if cfg.pool == "sum":
        df = np.tile(dpooled, (n_e, 1))
    else:
        df = np.tile(dpooled / n_e, (n_e, 1))
    dr = np.zeros_like(cache["r"])
    a = cache["a"]
    for i in reversed(range(cfg.residual_layers)):
        lc = cache["layers"][i]
        if lc["empty"]:
            continue
        dfvec = df.sum(axis=0)
        grads[f"ban{i}_wc"] += np.outer(lc["c"], dfvec)
        grads[f"ban{i}_bc"] += dfvec
        dc = p[f"ban{i}_wc"] @ dfvec
        du = lc["av"] * dc[None, :]
        dv = (a.T @ lc["u"]) * dc[None, :]
        grads[f"ban{i}_we"] += lc["f_in"].T @ du
        grads[f"ban{i}_wr"] += cache["r"].T @ dv
        dr += dv @ p[f"ban{i}_wr"].T
        df = df + du @ p[f"ban{i}_we"].T
    np.add.at(grads[f"{side}_ent"], cache["ents"], df)
    if len(cache["prds"]):
        d = cfg.n_d
        np.add.at(grads[f"{side}_sub"], cache["subs"], dr[:, :d])
        np.add.at(grads[f"{side}_prd"], cache["prds"], dr[:, d:2 * d])
        np.add.at(grads[f"{side}_obj"], cache["objs"], dr[:, 2 * d:])


# --- triplet loss -------------------------------------------------------------

def triplet_loss_and_grads(model: RetrievalModel, anchor: SceneGraph, positive: SceneGraph,
                           negative: SceneGraph) -> tuple[float, dict[str, np.ndarray]]:
    """L1 hinge: max(0, |a-p|_1 - |a-n|_1 + margin); anchor is a text graph.

    Subgradient convention: sign(0) = 0. Gradients cover all three towers.
    """
    a_out, a_cache = embed_graph(model, anchor, "text")
    p_out, p_cache = embed_graph(model, positive, "image")
    n_out, n_cache = embed_graph(model, negative, "image")
    d_pos = float(np.abs(a_out - p_out).sum())
    d_neg = float(np.abs(a_out - n_out).sum())
    loss = d_pos - d_neg + model.cfg.margin
    grads = {name: np.zeros_like(arr) for name, arr in model.params.items()}
    if loss <= 0.0:
        return 0.0, grads
    s_pos = np.sign(a_out - p_out)
    s_neg = np.sign(a_out - n_out)
    embed_backward(model, a_cache, s_pos - s_neg, grads)
    embed_backward(model, p_cache, -s_pos, grads)
    embed_backward(model, n_cache, s_neg, grads)
    return loss, grads


def retrieval_gradient_check(model: RetrievalModel, anchor: SceneGraph, positive: SceneGraph,
                             negative: SceneGraph, n_coords: int = 50, h: float = 1e-4,
                             seed: int = 0) -> dict[str, float]:
    """Central-difference check per parameter block, skipping kink crossings.

    A coordinate is skipped when the perturbed forwards disagree with the
    center on any rectifier activation or L1 sign, since the finite
    difference straddles a non-differentiable point there.
    """

    def state() -> tuple[float, tuple]:
        a, ac = embed_graph(model, anchor, "text")
        p, pc = embed_graph(model, positive, "image")
        n, nc = embed_graph(model, negative, "image")
        loss = max(0.0, float(np.abs(a - p).sum() - np.abs(a - n).sum()) + model.cfg.margin)
        kinks = (
            tuple(np.sign(a - p).astype(int).tolist()),
            tuple(np.sign(a - n).astype(int).tolist()),
            tuple((ac["pre1"] > 0).astype(int).tolist()),
            tuple((ac["pre2"] > 0).astype(int).tolist()),
            tuple((pc["pre1"] > 0).astype(int).tolist()),
            tuple((pc["pre2"] > 0).astype(int).tolist()),
            tuple((nc["pre1"] > 0).astype(int).tolist()),
            tuple((nc["pre2"] > 0).astype(int).tolist()),
            loss > 0.0,
        )
        return loss, kinks

    _loss0, kinks0 = state()
    _l, grads = triplet_loss_and_grads(model, anchor, positive, negative)
    rng = np.random.default_rng([seed, 43])
    out: dict[str, float] = {}
    for name, arr in model.param_items():
        flat = arr.reshape(-1)
        order = rng.permutation(flat.size)
        worst = 0.0
        used = 0
        for c in order:
            if used >= n_coords:
                break
            keep = flat[c]
            flat[c] = keep + h
            up, k_up = state()
            flat[c] = keep - h
            down, k_down = state()
            flat[c] = keep
            if k_up != kinks0 or k_down != kinks0:
                continue
            fd = (up - down) / (2.0 * h)
            an = grads[name].reshape(-1)[c]
            worst = max(worst, abs(an - fd) / max(1e-8, abs(an) + abs(fd)))
            used += 1
        out[name] = worst
    return out


# --- training and retrieval ----------------------------------------------------

def retrieve_train(pairs: list[tuple[SceneGraph, SceneGraph]], model: RetrievalModel) -> dict:
    """Triplet training over (text graph, image graph) pairs with in-batch negatives."""
    cfg = model.cfg
    n = len(pairs)
    if n < 2:
        raise DataError("need at least two pairs to form negatives")
    rng = np.random.default_rng([cfg.seed, 42])
    log = []
    for epoch in range(cfg.epochs):
        lr = cfg.lr * (0.1 ** sum(1 for e in cfg.lr_decay_epochs if epoch >= e))
        order = rng.permutation(n)
        total = 0.0
        active = 0
        for lo in range(0, n, cfg.batch_size):
            batch = order[lo:lo + cfg.batch_size]
            agg = {name: np.zeros_like(arr) for name, arr in model.params.items()}
            for i in batch:
                if len(batch) > 1:
                    j = int(batch[int(rng.integers(0, len(batch) - 1))])
                    if j == i:
                        j = int(batch[-1])
                else:
                    j = int(rng.integers(0, n - 1))
                    if j >= i:
                        j += 1
                loss, grads = triplet_loss_and_grads(model, pairs[i][0], pairs[i][1], pairs[j][1])
                total += loss
                active += int(loss > 0)
                for name in agg:
                    agg[name] += grads[name]
            scale = lr / len(batch)
            for name, arr in model.params.items():
                arr -= scale * agg[name]
        log.append({"epoch": epoch, "lr": lr, "mean_loss": total / n, "active": active / n})
    return {"epochs": log, "n_pairs": n}


def retrieve(model: RetrievalModel, query: SceneGraph, gallery_embeds: np.ndarray) -> np.ndarray:
    """Gallery indices sorted by ascending L1 distance, ties by index."""
    q, _ = embed_graph(model, query, "text")
    dists = np.abs(gallery_embeds - q[None, :]).sum(axis=1)
    return np.argsort(dists, kind="stable")


def embed_gallery(model: RetrievalModel, gallery: list[SceneGraph]) -> np.ndarray:
    return np.stack([embed_graph(model, g, "image")[0] for g in gallery])


def median_rank(ranks: list[int]) -> int:
    """Lower median: element at index (n - 1) // 2 of the sorted ranks."""
    if not ranks:
        raise DataError("no ranks to take a median of")
    return int(sorted(ranks)[(len(ranks) - 1) // 2])


def retrieval_eval(model: RetrievalModel, queries: list[SceneGraph], gallery: list[SceneGraph],
                   ks: tuple[int, ...] = (20, 100)) -> dict:
    """Rank the true gallery item (same index as the query) for every query.

    The gallery may carry extra distractors past the paired prefix.
    """
    if len(queries) > len(gallery):
        raise DataError("gallery must contain at least one item per query")
    emb = embed_gallery(model, gallery)
    ranks = []
    for i, q in enumerate(queries):
        order = retrieve(model, q, emb)
        ranks.append(int(np.nonzero(order == i)[0][0]) + 1)
    report = {
        "n_queries": len(queries),
        "gallery_size": len(gallery),
        "median_rank": median_rank(ranks),
        "recall": {str(k): sum(1 for r in ranks if r <= k) / len(ranks) for k in ks},
    }
    return report


# --- persistence ------------------------------------------------------------------

_CKPT_FORMAT = "sgdebias-retrieval-v1"


def save_retrieval_checkpoint(model: RetrievalModel, path: str) -> None:
    cfg = dataclasses.asdict(model.cfg)
    cfg["lr_decay_epochs"] = list(model.cfg.lr_decay_epochs)
    doc = {
        "format": _CKPT_FORMAT,
        "cfg": cfg,
        "vocab": model.vocab.to_json(),
        "params": {
            name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            for name, arr in model.param_items()
        },
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


def load_retrieval_checkpoint(path: str) -> RetrievalModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != _CKPT_FORMAT:
        raise DataError(f"unrecognized retrieval checkpoint format in {path}")
    cfg_d = dict(doc["cfg"])
    cfg_d["lr_decay_epochs"] = tuple(cfg_d["lr_decay_epochs"])
    cfg = SGEmbedConfig(**cfg_d)
    vocab = HeteroVocab.from_json(doc["vocab"])
    params = {
        name: np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
        for name, spec in doc["params"].items()
    }
    return RetrievalModel(cfg, vocab, params)


# --- text-side derivation -------------------------------------------------------

@dataclass(frozen=True)
class TextDeriveConfig:
    relation_drop: float = 0.3
    unk_prob: float = 0.05
    max_synonyms: int = 3
    max_retries: int = 20

    def __post_init__(self):
        if not (0.0 <= self.relation_drop <= 1.0 and 0.0 <= self.unk_prob <= 1.0):
            raise ConfigError("probabilities must lie in [0, 1]")
        if self.max_synonyms < 1:
            raise ConfigError("need at least one synonym per class")


@dataclass(frozen=True)
class TextMapping:
    text_entities: Vocabulary
    text_predicates: Vocabulary
    ent_synonyms: tuple[tuple[int, ...], ...]  # image class -> text entity ids
    prd_synonyms: tuple[tuple[int, ...], ...]  # image predicate -> text predicate ids


def build_text_mapping(object_vocab: Vocabulary, predicate_vocab: Vocabulary, seed: int,
                       cfg: TextDeriveConfig = TextDeriveConfig()) -> TextMapping:
    """Seeded injective synonym map: every image class gets 1..max_synonyms tokens."""
    rng = np.random.default_rng([seed, 44])
    ent_names = ["<unk>"]
    ent_syn = []
    for name in object_vocab.names:
        k = int(rng.integers(1, cfg.max_synonyms + 1))
        ids = []
        for j in range(k):
            ids.append(len(ent_names))
            ent_names.append(f"{name}~{j}")
        ent_syn.append(tuple(ids))
    prd_names = ["__background__", "<unk>"]
    prd_syn = [()]  # background has no synonyms
    for name in predicate_vocab.names[1:]:
        k = int(rng.integers(1, cfg.max_synonyms + 1))
        ids = []
        for j in range(k):
            ids.append(len(prd_names))
            prd_names.append(f"{name}~{j}")
        prd_syn.append(tuple(ids))
    return TextMapping(
        Vocabulary(tuple(ent_names), "object"),
        Vocabulary(tuple(prd_names), "predicate"),
        tuple(ent_syn), tuple(prd_syn),
    )


def derive_text_sg(g: SceneGraph, mapping: TextMapping, cfg: TextDeriveConfig,
                   rng: np.random.Generator) -> SceneGraph:
    """Noisy text-side description of an image graph.

    Entities and predicates are relabeled to seeded synonyms; each relation is
    dropped with cfg.relation_drop; entities isolated by those drops are
    removed (entities isolated in the source survive); tokens decay to the
    unknown id with cfg.unk_prob. Degenerate draws that empty the graph are
    retried, then fall back to a single-entity graph.
    """
    ent_cls = [rng.choice(mapping.ent_synonyms[c]) for c, _b in g.entities]
    rel_cls = [rng.choice(mapping.prd_synonyms[p]) for _s, p, _o in g.relations]
    originally_connected = {e for s, _p, o in g.relations for e in (s, o)}

    for _attempt in range(cfg.max_retries):
        keep_rel = [bool(rng.random() >= cfg.relation_drop) for _ in g.relations]
        still_connected = {e for krel, (s, _p, o) in zip(keep_rel, g.relations) if krel for e in (s, o)}
        keep_ent = [
            (i not in originally_connected) or (i in still_connected)
            for i in range(len(g.entities))
        ]
        if not any(keep_ent):
            continue
        remap = {}
        ents = []
        for i, keep in enumerate(keep_ent):
            if keep:
                cls = UNK_ENTITY if rng.random() < cfg.unk_prob else int(ent_cls[i])
                remap[i] = len(ents)
                ents.append((cls, g.entities[i][1]))
        rels = []
        for j, ((s, _p, o), krel) in enumerate(zip(g.relations, keep_rel)):
            if krel:
                prd = UNK_PREDICATE if rng.random() < cfg.unk_prob else int(rel_cls[j])
                rels.append((remap[s], prd, remap[o]))
        return SceneGraph(tuple(ents), tuple(rels))

    pick = int(rng.integers(0, len(g.entities)))
    cls = UNK_ENTITY if rng.random() < cfg.unk_prob else int(ent_cls[pick])
    return SceneGraph(((cls, g.entities[pick][1]),), ())
