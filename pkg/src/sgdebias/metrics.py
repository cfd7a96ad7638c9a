"""Ranking diagnosis metrics: recall, per-predicate mean recall, zero-shot recall.

A prediction matches a ground-truth relation only on the full key: subject
entity index, object entity index, predicate, and both predicted class labels.
Recalls are per-image fractions averaged over images that have eligible
ground truth; the graph constraint keeps one predicate per ordered pair.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .core import BACKGROUND, DataError, RankedPredictions, SceneGraph

MatchKey = tuple[int, int, int, int, int]  # (s_idx, s_cls, pred, o_idx, o_cls)


def gt_match_keys(gt: SceneGraph) -> set[MatchKey]:
    keys = set()
    for s, p, o in gt.relations:
        keys.add((s, gt.entities[s][0], p, o, gt.entities[o][0]))
    return keys


def constrained_top_k(preds: RankedPredictions, k: int, graph_constraint: bool = True):
    """First k triplets of the canonical list, optionally one per ordered pair."""
    if not graph_constraint:
        return list(preds.triplets[:k])
    out = []
    seen: set[tuple[int, int]] = set()
    for t in preds.triplets:
        pair = (t[0], t[3])
        if pair in seen:
            continue
        seen.add(pair)
        out.append(t)
        if len(out) == k:
            break
    return out


def recall_at_k(preds: RankedPredictions, gt_keys: set[MatchKey], k: int,
                graph_constraint: bool = True) -> tuple[int, int]:
    """(matched distinct GT relations, GT count) for one image."""
    top = constrained_top_k(preds, k, graph_constraint)
    hits = sum(1 for t in top if (t[0], t[1], t[2], t[3], t[4]) in gt_keys)
    return hits, len(gt_keys)


def _mean(fracs: list[float]) -> float | None:
    return sum(fracs) / len(fracs) if fracs else None


def split_recall(pairs, k: int, graph_constraint: bool = True,
                 key_filter=None) -> tuple[float | None, int]:
    """Mean per-image recall over images with >= 1 eligible GT relation.

    pairs iterates (RankedPredictions, SceneGraph); key_filter optionally
    restricts the GT keys an image contributes (predicate or registry
    restriction). Returns (recall or None, eligible image count).
    """
    fracs = []
    for preds, gt in pairs:
        keys = gt_match_keys(gt)
        if key_filter is not None:
            keys = {key for key in keys if key_filter(key, gt)}
        if not keys:
            continue
        hits, total = recall_at_k(preds, keys, k, graph_constraint)
        fracs.append(hits / total)
    return _mean(fracs), len(fracs)


def per_predicate_recall(pairs, k: int, n_predicates: int,
                         graph_constraint: bool = True) -> list[float | None]:
    """Recall restricted to each foreground predicate; None when absent from GT."""
    out: list[float | None] = [None]  # background slot, never scored
    for p in range(1, n_predicates):
        r, _n = split_recall(pairs, k, graph_constraint,
                             key_filter=lambda key, _gt, p=p: key[2] == p)
        out.append(r)
    return out


def mean_recall_at_k(pairs, k: int, n_predicates: int,
                     graph_constraint: bool = True) -> float | None:
    per = per_predicate_recall(list(pairs), k, n_predicates, graph_constraint)
    present = [r for r in per[1:] if r is not None]
    return _mean(present)


def zero_shot_recall_at_k(pairs, k: int, registry: frozenset | set,
                          graph_constraint: bool = True) -> tuple[float | None, int]:
    """Recall over GT relations whose class-level triplet never appears in training."""

    def unseen(key: MatchKey, _gt: SceneGraph) -> bool:
        return (key[1], key[2], key[4]) not in registry

    return split_recall(pairs, k, graph_constraint, key_filter=unseen)


@dataclass
class EvalReport:
    task: str
    method: str
    ks: tuple[int, ...]
    graph_constraint: bool
    n_images: int
    n_gt: int
    recall: dict[int, float | None]
    mean_recall: dict[int, float | None]
    zero_shot_recall: dict[int, float | None]
    n_images_zero_shot: dict[int, int]
    per_predicate: dict[int, list[float | None]]

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "method": self.method,
            "ks": list(self.ks),
            "graph_constraint": self.graph_constraint,
            "n_images": self.n_images,
            "n_gt": self.n_gt,
            "recall": {str(k): v for k, v in self.recall.items()},
            "mean_recall": {str(k): v for k, v in self.mean_recall.items()},
            "zero_shot_recall": {str(k): v for k, v in self.zero_shot_recall.items()},
            "n_images_zero_shot": {str(k): v for k, v in self.n_images_zero_shot.items()},
            "per_predicate": {str(k): v for k, v in self.per_predicate.items()},
        }

    @staticmethod
    def from_json(d: dict) -> "EvalReport":
        try:
            return EvalReport(
                task=d["task"], method=d["method"], ks=tuple(d["ks"]),
                graph_constraint=bool(d["graph_constraint"]),
                n_images=int(d["n_images"]), n_gt=int(d["n_gt"]),
                recall={int(k): v for k, v in d["recall"].items()},
                mean_recall={int(k): v for k, v in d["mean_recall"].items()},
                zero_shot_recall={int(k): v for k, v in d["zero_shot_recall"].items()},
                n_images_zero_shot={int(k): v for k, v in d["n_images_zero_shot"].items()},
                per_predicate={int(k): v for k, v in d["per_predicate"].items()},
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed evaluation report: {exc}") from exc


def evaluate(pairs, ks, n_predicates: int, registry: frozenset | set | None = None,
             graph_constraint: bool = True, task: str = "", method: str = "") -> EvalReport:
    """Full report over (RankedPredictions, SceneGraph) pairs at several cutoffs."""
    pairs = list(pairs)
    ks = tuple(sorted(int(k) for k in ks))
    n_gt = sum(len(gt_match_keys(gt)) for _p, gt in pairs)
    recall, mean_r, zsr, zs_n, per_p = {}, {}, {}, {}, {}
    for k in ks:
        recall[k], _ = split_recall(pairs, k, graph_constraint)
        per = per_predicate_recall(pairs, k, n_predicates, graph_constraint)
        per_p[k] = per
        present = [r for r in per[1:] if r is not None]
        mean_r[k] = _mean(present)
        if registry is not None:
            zsr[k], zs_n[k] = zero_shot_recall_at_k(pairs, k, registry, graph_constraint)
        else:
            zsr[k], zs_n[k] = None, 0
    return EvalReport(task, method, ks, graph_constraint, len(pairs), n_gt,
                      recall, mean_r, zsr, zs_n, per_p)
