"""Branch-structured predicate predictor over a four-node causal layout.

Image evidence I feeds pair features X (through a per-object encoder and a
subject/object difference map), object labels Z (argmax of a classifier on X,
or ground truth when the task supplies labels), and a union-context branch.
Predicate logits Y fuse three branch terms: a linear map of the pair feature,
a linear map of the union context, and a joint-label table row. Fusion is a
plain sum or a gated product (gate logits times the sigmoid of the sum).

forward() evaluates the whole pipeline under a Scenario that can replace pair
inputs by a frozen reference feature and pin labels, which is what the effect
computations downstream difference against each other. All arrays are float64
and every path is deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .core import ConfigError, DataError, NumericError
from .synth import CANVAS, Dataset, ImageRecord

FUSIONS = ("sum", "gate")
TASKS = ("predcls", "sgcls")

# scenario modes
X_OBSERVED, X_INTERVENED = "observed", "intervened"
Z_NATURAL, Z_FIXED_OBSERVED, Z_FIXED_BASELINE = "natural", "fixed_observed", "fixed_baseline"

INIT_STD = 0.02


@dataclass(frozen=True)
class Scenario:
    x_mode: str = X_OBSERVED
    z_mode: str = Z_NATURAL

    def __post_init__(self):
        if self.x_mode not in (X_OBSERVED, X_INTERVENED):
            raise ConfigError(f"bad x_mode {self.x_mode!r}")
        if self.z_mode not in (Z_NATURAL, Z_FIXED_OBSERVED, Z_FIXED_BASELINE):
            raise ConfigError(f"bad z_mode {self.z_mode!r}")


OBSERVED = Scenario(X_OBSERVED, Z_NATURAL)


@dataclass
class CausalModel:
    fusion: str
    task: str
    n_object_classes: int
    n_predicates: int
    d_r: int
    d_x: int
    d_v: int
    d_p: int
    enc_w: np.ndarray  # (d_r + 4 + N, d_x)
    enc_b: np.ndarray
    cls_w: np.ndarray  # (d_x, N)
    cls_b: np.ndarray
    fs_w: np.ndarray  # (d_x, d_p) applied to the object's feature
    fs_b: np.ndarray
    fo_w: np.ndarray  # (d_x, d_p) applied to the subject's feature
    fo_b: np.ndarray
    wx_w: np.ndarray  # (d_p, P) pair-feature branch
    wx_b: np.ndarray
    wv_w: np.ndarray  # (d_v, P) union-context branch
    wv_b: np.ndarray
    wr_w: np.ndarray  # (d_p, P) gate logits (gate fusion only)
    wr_b: np.ndarray
    z_table: np.ndarray  # (N * N, P) joint-label rows
    rectify_objects: bool = False
    rectify_pair_branch: bool = False
    xbar: np.ndarray | None = None  # frozen reference pair-input feature
    xbar_source: str = "mean"
    label_marginal: np.ndarray | None = None  # train object-class marginal
    debias: str = "none"

    def param_items(self) -> list[tuple[str, np.ndarray]]:
        return [
            ("enc_w", self.enc_w), ("enc_b", self.enc_b),
            ("cls_w", self.cls_w), ("cls_b", self.cls_b),
            ("fs_w", self.fs_w), ("fs_b", self.fs_b),
            ("fo_w", self.fo_w), ("fo_b", self.fo_b),
            ("wx_w", self.wx_w), ("wx_b", self.wx_b),
            ("wv_w", self.wv_w), ("wv_b", self.wv_b),
            ("wr_w", self.wr_w), ("wr_b", self.wr_b),
            ("z_table", self.z_table),
        ]

    @property
    def enc_in_dim(self) -> int:
        return self.d_r + 4 + self.n_object_classes


def init_model(n_object_classes: int, n_predicates: int, d_r: int, d_x: int, d_v: int,
               fusion: str = "sum", task: str = "predcls", d_p: int | None = None,
               seed: int = 0, init_std: float = INIT_STD,
               rectify_objects: bool = False, rectify_pair_branch: bool = False) -> CausalModel:
    """Gaussian weight init (given std), zero biases, seeded."""
    if fusion not in FUSIONS:
        raise ConfigError(f"fusion must be one of {FUSIONS}, got {fusion!r}")
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    d_p = d_x if d_p is None else d_p
    rng = np.random.default_rng([seed, 11])
    n, p = n_object_classes, n_predicates
    d_in = d_r + 4 + n

    def w(*shape):
        return rng.normal(0.0, init_std, shape)

    return CausalModel(
        fusion=fusion, task=task,
        n_object_classes=n, n_predicates=p, d_r=d_r, d_x=d_x, d_v=d_v, d_p=d_p,
        enc_w=w(d_in, d_x), enc_b=np.zeros(d_x),
        cls_w=w(d_x, n), cls_b=np.zeros(n),
        fs_w=w(d_x, d_p), fs_b=np.zeros(d_p),
        fo_w=w(d_x, d_p), fo_b=np.zeros(d_p),
        wx_w=w(d_p, p), wx_b=np.zeros(p),
        wv_w=w(d_v, p), wv_b=np.zeros(p),
        wr_w=w(d_p, p), wr_b=np.zeros(p),
        z_table=w(n * n, p),
        rectify_objects=rectify_objects, rectify_pair_branch=rectify_pair_branch,
    )


# --- packed per-image arrays ---------------------------------------------

@dataclass(frozen=True, eq=False)
class ImageArrays:
    image_id: str
    enc_in: np.ndarray  # (n_obj, d_r + 4 + N) raw | box / canvas | one-hot tentative
    gt_classes: np.ndarray  # (n_obj,) ground-truth object classes
    pair_s: np.ndarray  # (n_pairs,) subject indices
    pair_o: np.ndarray  # (n_pairs,)
    unions: np.ndarray  # (n_pairs, d_v)
    gt_predicates: np.ndarray  # (n_pairs,)


def encoder_input(raw: np.ndarray, boxes: np.ndarray, tentative: np.ndarray, n_classes: int) -> np.ndarray:
    """Concatenate raw feature, canvas-normalized box, one-hot tentative label."""
    onehot = np.zeros((len(tentative), n_classes))
    onehot[np.arange(len(tentative)), tentative] = 1.0
    return np.concatenate([raw, boxes / CANVAS, onehot], axis=1)


def pack_image(img: ImageRecord, n_classes: int, d_v: int | None = None) -> ImageArrays:
    raw = np.stack([o.raw_feature for o in img.objects])
    boxes = np.stack([o.box.as_array() for o in img.objects])
    tent = np.array([o.tentative_label for o in img.objects], dtype=np.int64)
    gt_cls = np.array([c for c, _b in img.gt.entities], dtype=np.int64)
    if img.pairs:
        ps = np.array([p.subject_idx for p in img.pairs], dtype=np.int64)
        po = np.array([p.object_idx for p in img.pairs], dtype=np.int64)
        un = np.stack([p.union_context for p in img.pairs])
        gp = np.array([p.gt_predicate for p in img.pairs], dtype=np.int64)
    else:
        if d_v is None:
            raise DataError(f"image {img.image_id} has no pairs and no d_v was supplied")
        ps = po = gp = np.zeros(0, dtype=np.int64)
        un = np.zeros((0, d_v))
    return ImageArrays(img.image_id, encoder_input(raw, boxes, tent, n_classes), gt_cls, ps, po, un, gp)


# --- forward ops ----------------------------------------------------------

def encode_objects(model: CausalModel, enc_in: np.ndarray) -> np.ndarray:
    x = enc_in @ model.enc_w + model.enc_b
    if model.rectify_objects:
        x = np.maximum(x, 0.0)
    return x


def classify_objects(model: CausalModel, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Object logits and argmax labels (lowest index wins ties)."""
    logits = x @ model.cls_w + model.cls_b
    return logits, np.argmax(logits, axis=1)


def pair_feature(model: CausalModel, x_subject: np.ndarray, x_object: np.ndarray) -> np.ndarray:
    """Difference map: subject feature through fo, object feature through fs."""
    out = (x_subject @ model.fo_w + model.fo_b) - (x_object @ model.fs_w + model.fs_b)
    if model.rectify_pair_branch:
        out = np.maximum(out, 0.0)
    return out


def pair_class_embed(model: CausalModel, z_soft_s: np.ndarray, z_soft_o: np.ndarray) -> np.ndarray:
    """Joint-label branch: expectation of table rows under a soft label pair.

    One-hot inputs reduce to the row at subject_label * N + object_label.
    """
    n = model.n_object_classes
    table3 = model.z_table.reshape(n, n, model.n_predicates)
    return np.einsum("ba,bc,acp->bp", z_soft_s, z_soft_o, table3)


def fuse(model: CausalModel, t_x: np.ndarray, t_v: np.ndarray, t_z: np.ndarray,
         gate: np.ndarray | None = None) -> np.ndarray:
    if model.fusion == "sum":
        return t_x + t_v + t_z
    if gate is None:
        raise ConfigError("gate fusion requires gate logits")
    return gate * _sigmoid(t_x + t_v + t_z)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _onehot(idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(idx), n))
    out[np.arange(len(idx)), idx] = 1.0
    return out


@dataclass(frozen=True, eq=False)
class Forward:
    """Forward intermediates for one image's pair batch under one scenario."""

    y: np.ndarray  # (n_pairs, P) fused logits
    t_x: np.ndarray
    t_v: np.ndarray
    t_z: np.ndarray
    gate: np.ndarray | None
    x_all: np.ndarray  # (n_obj, d_x) encoded observed features
    obj_logits: np.ndarray  # (n_obj, N) classifier on observed features
    labels: np.ndarray  # (n_obj,) labels used for reporting/match (task semantics)
    pair_x: np.ndarray  # (n_pairs, d_p) pair features actually fused
    z_soft_s: np.ndarray
    z_soft_o: np.ndarray


def baseline_labels(model: CausalModel, task: str) -> tuple[np.ndarray, np.ndarray]:
    """Soft label pair the model naturally attains under the reference feature.

    With labels given (predcls) the label link is blocked, so the frozen
    training marginal stands in; otherwise classify the reference feature.
    """
    if model.xbar is None:
        raise ConfigError("model has no frozen reference feature")
    n = model.n_object_classes
    if task == "predcls":
        if model.label_marginal is None:
            raise ConfigError("model has no frozen label marginal")
        m = model.label_marginal.reshape(1, n)
        return m, m
    _lg, lab = classify_objects(model, model.xbar.reshape(1, -1))
    one = _onehot(lab, n)
    return one, one


def forward(model: CausalModel, img: ImageArrays, scenario: Scenario = OBSERVED,
            task: str | None = None) -> Forward:
    """Evaluate fused logits for every pair of an image under a scenario.

    x_mode intervened replaces both pair inputs by the frozen reference
    feature; z_mode pins the label pair independently of the pair inputs.
    Union contexts are always the observed ones.
    """
    task = model.task if task is None else task
    if task not in TASKS:
        raise ConfigError(f"bad task {task!r}")
    n = model.n_object_classes
    x_all = encode_objects(model, img.enc_in)
    obj_logits, pred_labels = classify_objects(model, x_all)
    m = len(img.pair_s)

    if scenario.x_mode == X_OBSERVED:
        x_s, x_o = x_all[img.pair_s], x_all[img.pair_o]
    else:
        if model.xbar is None:
            raise ConfigError("intervened scenario requires a frozen reference feature")
        x_s = np.broadcast_to(model.xbar, (m, model.d_x))
        x_o = x_s

    if task == "predcls":
        natural = img.gt_classes
        match_labels = img.gt_classes
    else:
        natural = pred_labels
        match_labels = pred_labels

    if scenario.z_mode == Z_FIXED_BASELINE:
        zs, zo = baseline_labels(model, task)
        z_soft_s = np.broadcast_to(zs, (m, n))
        z_soft_o = np.broadcast_to(zo, (m, n))
    elif scenario.z_mode == Z_FIXED_OBSERVED:
        z_soft_s = _onehot(natural[img.pair_s], n)
        z_soft_o = _onehot(natural[img.pair_o], n)
    else:  # natural: follows the current pair inputs
        if scenario.x_mode == X_INTERVENED and task == "sgcls":
            zs, zo = baseline_labels(model, task)
            z_soft_s = np.broadcast_to(zs, (m, n))
            z_soft_o = np.broadcast_to(zo, (m, n))
        else:
            z_soft_s = _onehot(natural[img.pair_s], n)
            z_soft_o = _onehot(natural[img.pair_o], n)

    px = pair_feature(model, x_s, x_o)
    t_x = px @ model.wx_w + model.wx_b
    t_v = img.unions @ model.wv_w + model.wv_b
    t_z = pair_class_embed(model, z_soft_s, z_soft_o)
    gate = px @ model.wr_w + model.wr_b if model.fusion == "gate" else None
    y = fuse(model, t_x, t_v, t_z, gate)
    if not np.all(np.isfinite(y)):
        raise NumericError(f"non-finite logits in image {img.image_id}")
    return Forward(y, t_x, t_v, t_z, gate, x_all, obj_logits, match_labels, px, z_soft_s, z_soft_o)


def freeze_reference(model: CausalModel, train_images: Iterable[ImageArrays],
                     source: str = "mean") -> None:
    """Freeze the reference pair input: mean encoded train feature, or zeros."""
    if source not in ("mean", "zero"):
        raise ConfigError(f"reference source must be mean or zero, got {source!r}")
    total = np.zeros(model.d_x)
    count = 0
    cls_counts = np.zeros(model.n_object_classes)
    for img in train_images:
        x = encode_objects(model, img.enc_in)
        total += x.sum(axis=0)
        count += len(x)
        np.add.at(cls_counts, img.gt_classes, 1.0)
    if count == 0:
        raise DataError("cannot freeze a reference feature on an empty split")
    model.xbar = (total / count) if source == "mean" else np.zeros(model.d_x)
    model.xbar_source = source
    model.label_marginal = cls_counts / cls_counts.sum()


# --- checkpoint persistence ------------------------------------------------

_CKPT_FORMAT = "sgdebias-checkpoint-v1"


def save_checkpoint(model: CausalModel, path: str) -> None:
    doc = {
        "format": _CKPT_FORMAT,
        "fusion": model.fusion,
        "task": model.task,
        "debias": model.debias,
        "dims": {
            "n_object_classes": model.n_object_classes,
            "n_predicates": model.n_predicates,
            "d_r": model.d_r, "d_x": model.d_x, "d_v": model.d_v, "d_p": model.d_p,
        },
        "rectify_objects": model.rectify_objects,
        "rectify_pair_branch": model.rectify_pair_branch,
        "xbar_source": model.xbar_source,
        "xbar": None if model.xbar is None else model.xbar.tolist(),
        "label_marginal": None if model.label_marginal is None else model.label_marginal.tolist(),
        "params": {
            name: {"shape": list(arr.shape), "data": arr.reshape(-1).tolist()}
            for name, arr in model.param_items()
        },
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n")


def load_checkpoint(path: str) -> CausalModel:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != _CKPT_FORMAT:
        raise DataError(f"unrecognized checkpoint format in {path}")
    dims = doc["dims"]
    params = {}
    for name, spec in doc["params"].items():
        params[name] = np.asarray(spec["data"], dtype=np.float64).reshape(spec["shape"])
    model = CausalModel(
        fusion=doc["fusion"], task=doc["task"],
        n_object_classes=int(dims["n_object_classes"]), n_predicates=int(dims["n_predicates"]),
        d_r=int(dims["d_r"]), d_x=int(dims["d_x"]), d_v=int(dims["d_v"]), d_p=int(dims["d_p"]),
        rectify_objects=bool(doc["rectify_objects"]),
        rectify_pair_branch=bool(doc["rectify_pair_branch"]),
        xbar=None if doc["xbar"] is None else np.asarray(doc["xbar"], dtype=np.float64),
        xbar_source=doc["xbar_source"],
        label_marginal=(None if doc["label_marginal"] is None
                        else np.asarray(doc["label_marginal"], dtype=np.float64)),
        debias=doc.get("debias", "none"),
        **params,
    )
    return model
