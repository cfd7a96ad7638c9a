"""Mini-batch SGD training of the branch predictor, with debiasing ablations.

The backward pass is written out by hand; gradient_check verifies every
parameter block against central finite differences, which is also an
acceptance requirement. Training batches are flat arrays of pair samples
(subject/object encoder inputs, union context, targets), so an epoch is a
seeded permutation over one packed array set.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict
from typing import Callable

import numpy as np

from .core import ConfigError, DataError, NumericError
from .losses import ce_and_grad, predicate_loss_and_grad
from .model import CausalModel, ImageArrays, TASKS, _sigmoid, freeze_reference, pack_image
from .synth import Dataset, predicate_counts

DEBIAS_MODES = ("none", "focal", "reweight", "resample", "x2y_tr")
RESAMPLE_CAP = 20
PLATEAU_EPOCHS = 3
MAX_LR_DECAYS = 2
LR_DECAY = 0.1


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 12
    lr: float = 0.12
    aux_loss_weight: float = 1.0
    debias: str = "none"
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    seed: int = 0
    val_k: int = 50  # ranking cutoff for the plateau metric

    def __post_init__(self):
        if self.debias not in DEBIAS_MODES:
            raise ConfigError(f"debias must be one of {DEBIAS_MODES}, got {self.debias!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr < 0:
            raise ConfigError("lr must be non-negative")
        if self.aux_loss_weight < 0:
            raise ConfigError("aux_loss_weight must be non-negative")


@dataclass
class LossReport:
    fused: float = 0.0
    objects: float = 0.0
    aux_x: float = 0.0
    aux_v: float = 0.0
    aux_z: float = 0.0

    @property
    def total(self) -> float:
        return self.fused + self.objects + self.aux_x + self.aux_v + self.aux_z


@dataclass(frozen=True, eq=False)
class PackedPairs:
    """Flattened (subject input, object input, union, targets) over a split."""

    in_s: np.ndarray
    in_o: np.ndarray
    unions: np.ndarray
    targets: np.ndarray  # gt predicate per pair
    cls_s: np.ndarray  # true subject class
    cls_o: np.ndarray  # true object class

    def __len__(self) -> int:
        return len(self.targets)

    def take(self, idx: np.ndarray) -> "PackedPairs":
        return PackedPairs(self.in_s[idx], self.in_o[idx], self.unions[idx],
                           self.targets[idx], self.cls_s[idx], self.cls_o[idx])


def flatten_pairs(ds: Dataset) -> PackedPairs:
    n_cls = ds.world.cfg.n_object_classes
    ins, ino, uni, tgt, cs, co = [], [], [], [], [], []
    for img in ds.images:
        arr = pack_image(img, n_cls, ds.world.cfg.d_v)
        ins.append(arr.enc_in[arr.pair_s])
        ino.append(arr.enc_in[arr.pair_o])
        uni.append(arr.unions)
        tgt.append(arr.gt_predicates)
        cs.append(arr.gt_classes[arr.pair_s])
        co.append(arr.gt_classes[arr.pair_o])
    if not ins:
        raise DataError("split has no images")
    return PackedPairs(
        np.concatenate(ins), np.concatenate(ino), np.concatenate(uni),
        np.concatenate(tgt), np.concatenate(cs), np.concatenate(co),
    )


def class_weights_inverse_fraction(counts: np.ndarray) -> np.ndarray:
    """Inverse-fraction weights over foreground predicates, mean-normalized to 1.

    counts is indexed by predicate (slot 0 = background). Background keeps
    weight 1 and is excluded from the normalization. Zero counts clamp to 1.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or len(counts) < 2:
        raise ConfigError("counts must be a 1-d per-predicate vector with a background slot")
    fg = np.maximum(counts[1:], 1.0)
    inv = fg.sum() / fg
    inv = inv / inv.mean()
    out = np.ones(len(counts))
    out[1:] = inv
    return out


def resample_repeats(counts: np.ndarray) -> np.ndarray:
    """Per-predicate repeat counts: round(max(1, f_max / f_k)), capped.

    Background repeats once; foreground fractions are taken over foreground
    samples only, so the ratio reduces to c_max / c_k.
    """
    counts = np.asarray(counts, dtype=np.float64)
    fg = np.maximum(counts[1:], 1.0)
    ratio = np.maximum(1.0, fg.max() / fg)
    reps = np.minimum(np.rint(ratio), RESAMPLE_CAP).astype(np.int64)
    out = np.ones(len(counts), dtype=np.int64)
    out[1:] = reps
    return out


def resample_schedule(targets: np.ndarray, counts: np.ndarray) -> np.ndarray:
    """Sample index sequence with tail pairs repeated; shuffled by the caller."""
    reps = resample_repeats(counts)
    return np.repeat(np.arange(len(targets)), reps[targets])


# --- loss + gradients -------------------------------------------------------

def _relu_mask(pre: np.ndarray) -> np.ndarray:
    return (pre > 0.0).astype(np.float64)


def loss_and_grads(model: CausalModel, batch: PackedPairs, cfg: TrainConfig,
                   weights: np.ndarray | None = None) -> tuple[LossReport, dict[str, np.ndarray]]:
    """Batch-mean loss components and gradients for every parameter block.

    The label branch follows the task: given labels under predcls, classifier
    argmax under sgcls (no gradient flows through the argmax itself).
    """
    b = len(batch)
    if b == 0:
        raise DataError("empty batch")
    n = model.n_object_classes
    idx = np.arange(b)
    scale = 1.0 / b
    x2y = cfg.debias == "x2y_tr"

    # forward
    pre_s = batch.in_s @ model.enc_w + model.enc_b
    pre_o = batch.in_o @ model.enc_w + model.enc_b
    if model.rectify_objects:
        m_s, m_o = _relu_mask(pre_s), _relu_mask(pre_o)
        x_s, x_o = pre_s * m_s, pre_o * m_o
    else:
        x_s, x_o = pre_s, pre_o
    ol_s = x_s @ model.cls_w + model.cls_b
    ol_o = x_o @ model.cls_w + model.cls_b
    if model.task == "predcls":
        z_s, z_o = batch.cls_s, batch.cls_o
    else:
        z_s, z_o = np.argmax(ol_s, axis=1), np.argmax(ol_o, axis=1)
    rows = z_s * n + z_o
    px_pre = (x_s @ model.fo_w + model.fo_b) - (x_o @ model.fs_w + model.fs_b)
    if model.rectify_pair_branch:
        m_p = _relu_mask(px_pre)
        px = px_pre * m_p
    else:
        px = px_pre
    t_x = px @ model.wx_w + model.wx_b
    t_v = batch.unions @ model.wv_w + model.wv_b
    t_z = model.z_table[rows]
    sum3 = t_x + t_v + t_z
    if model.fusion == "gate":
        g = px @ model.wr_w + model.wr_b
        sig = _sigmoid(sum3)
        y = g * sig
    else:
        g = sig = None
        y = sum3

    def pred_loss(logits):
        return predicate_loss_and_grad(logits, batch.targets, cfg.debias, weights,
                                       cfg.focal_gamma, cfg.focal_alpha)

    report = LossReport()
    dt_x = np.zeros_like(t_x)
    dt_v = np.zeros_like(t_v)
    dt_z = np.zeros_like(t_z)
    dg = np.zeros_like(t_x) if g is not None else None

    if x2y:
        vals, grad = pred_loss(t_x)
        report.fused = float(vals.mean())
        dt_x += grad * scale
    else:
        vals, grad = pred_loss(y)
        report.fused = float(vals.mean())
        dy = grad * scale
        if model.fusion == "gate":
            dg = dy * sig
            dsum3 = dy * g * sig * (1.0 - sig)
        else:
            dsum3 = dy
        dt_x += dsum3
        dt_v += dsum3
        dt_z += dsum3
        if cfg.aux_loss_weight > 0.0:
            for term, dt, name in ((t_x, dt_x, "aux_x"), (t_v, dt_v, "aux_v"), (t_z, dt_z, "aux_z")):
                avals, agrad = pred_loss(term)
                setattr(report, name, cfg.aux_loss_weight * float(avals.mean()))
                dt += cfg.aux_loss_weight * agrad * scale

    # object recognition loss, half per endpoint
    ovals_s, ograd_s = ce_and_grad(ol_s, batch.cls_s)
    ovals_o, ograd_o = ce_and_grad(ol_o, batch.cls_o)
    report.objects = 0.5 * float(ovals_s.mean() + ovals_o.mean())
    dol_s = 0.5 * scale * ograd_s
    dol_o = 0.5 * scale * ograd_o

    if not np.isfinite(report.total):
        raise NumericError(f"non-finite training loss {report.total}")

    # backward
    grads = {name: np.zeros_like(arr) for name, arr in model.param_items()}
    np.add.at(grads["z_table"], rows, dt_z)
    grads["wx_w"] += px.T @ dt_x
    grads["wx_b"] += dt_x.sum(axis=0)
    dpx = dt_x @ model.wx_w.T
    if dg is not None:
        grads["wr_w"] += px.T @ dg
        grads["wr_b"] += dg.sum(axis=0)
        dpx += dg @ model.wr_w.T
    grads["wv_w"] += batch.unions.T @ dt_v
    grads["wv_b"] += dt_v.sum(axis=0)
    if model.rectify_pair_branch:
        dpx = dpx * m_p
    grads["fo_w"] += x_s.T @ dpx
    grads["fo_b"] += dpx.sum(axis=0)
    grads["fs_w"] += x_o.T @ (-dpx)
    grads["fs_b"] += (-dpx).sum(axis=0)
    dx_s = dpx @ model.fo_w.T
    dx_o = -(dpx @ model.fs_w.T)
    grads["cls_w"] += x_s.T @ dol_s + x_o.T @ dol_o
    grads["cls_b"] += dol_s.sum(axis=0) + dol_o.sum(axis=0)
    dx_s += dol_s @ model.cls_w.T
    dx_o += dol_o @ model.cls_w.T
    if model.rectify_objects:
        dx_s = dx_s * m_s
        dx_o = dx_o * m_o
    grads["enc_w"] += batch.in_s.T @ dx_s + batch.in_o.T @ dx_o
    grads["enc_b"] += dx_s.sum(axis=0) + dx_o.sum(axis=0)
    return report, grads


def sgd_step(model: CausalModel, grads: dict[str, np.ndarray], lr: float) -> None:
    for name, arr in model.param_items():
        arr -= lr * grads[name]


def gradient_check(model: CausalModel, batch: PackedPairs, cfg: TrainConfig,
                   weights: np.ndarray | None = None, n_coords: int = 50,
                   h: float = 1e-4, seed: int = 0) -> dict[str, float]:
    """Central-difference check of every parameter block.

    Returns max relative error per block; the relative error uses a 1e-8
    floor in the denominator. Samples at least n_coords coordinates per block
    (all of them for small blocks).
    """
    _report, grads = loss_and_grads(model, batch, cfg, weights)

    def total_loss() -> float:
        rep, _ = loss_and_grads(model, batch, cfg, weights)
        return rep.total

    rng = np.random.default_rng([seed, 31])
    out: dict[str, float] = {}
    for name, arr in model.param_items():
        flat = arr.reshape(-1)
        k = min(n_coords, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        worst = 0.0
        for c in coords:
            keep = flat[c]
            flat[c] = keep + h
            up = total_loss()
            flat[c] = keep - h
            down = total_loss()
            flat[c] = keep
            fd = (up - down) / (2.0 * h)
            an = grads[name].reshape(-1)[c]
            rel = abs(an - fd) / max(1e-8, abs(an) + abs(fd))
            worst = max(worst, rel)
        out[name] = worst
    return out


# --- training loop ----------------------------------------------------------

def train(model: CausalModel, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig,
          xbar_source: str = "mean") -> dict:
    """SGD with plateau-triggered lr decay on the validation tail-aware recall.

    Returns a JSON-able log. Freezes the reference feature and the label
    marginal into the model afterwards.
    """
    from .effects import EffectKind, unbiased_predict  # local import, no cycle at module load
    from .metrics import mean_recall_at_k

    packed = flatten_pairs(train_ds)
    counts = predicate_counts(train_ds)
    weights = class_weights_inverse_fraction(counts) if cfg.debias == "reweight" else None
    if cfg.debias == "resample":
        base_schedule = resample_schedule(packed.targets, counts)
    else:
        base_schedule = np.arange(len(packed))
    model.debias = cfg.debias

    val_arrays = [pack_image(img, model.n_object_classes, model.d_v) for img in val_ds.images]
    val_kind = EffectKind.X2Y if cfg.debias == "x2y_tr" else EffectKind.BASELINE

    def val_metric() -> float:
        preds = {a.image_id: unbiased_predict(model, a, model.task, val_kind) for a in val_arrays}
        mr = mean_recall_at_k(
            [(preds[img.image_id], img.gt) for img in val_ds.images],
            cfg.val_k, model.n_predicates,
        )
        return 0.0 if mr is None else mr

    rng = np.random.default_rng([cfg.seed, 21])
    lr = cfg.lr
    best = -np.inf
    stall = 0
    decays = 0
    log_epochs = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(base_schedule)
        run = LossReport()
        n_batches = 0
        for lo in range(0, len(order), cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            report, grads = loss_and_grads(model, packed.take(sel), cfg, weights)
            sgd_step(model, grads, lr)
            for f in ("fused", "objects", "aux_x", "aux_v", "aux_z"):
                setattr(run, f, getattr(run, f) + getattr(report, f))
            n_batches += 1
        for f in ("fused", "objects", "aux_x", "aux_v", "aux_z"):
            setattr(run, f, getattr(run, f) / max(n_batches, 1))
        mr = val_metric()
        log_epochs.append({
            "epoch": epoch, "lr": lr, "val_mean_recall": mr,
            "loss": {"fused": run.fused, "objects": run.objects, "aux_x": run.aux_x,
                     "aux_v": run.aux_v, "aux_z": run.aux_z, "total": run.total},
        })
        if mr > best:
            best = mr
            stall = 0
        else:
            stall += 1
            if stall >= PLATEAU_EPOCHS and decays < MAX_LR_DECAYS:
                lr *= LR_DECAY
                decays += 1
                stall = 0
    arrays = (pack_image(img, model.n_object_classes, model.d_v) for img in train_ds.images)
    freeze_reference(model, arrays, xbar_source)
    return {
        "epochs": log_epochs,
        "final_val_mean_recall": best if log_epochs else 0.0,
        "lr_final": lr,
        "n_pairs": len(packed),
        "debias": cfg.debias,
    }
