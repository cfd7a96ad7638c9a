"""Shared domain types: vocabularies, boxes, detections, scene graphs, ranked triplets.

All types are plain immutable values. Model-facing arrays ride along as numpy
float64; serialization is exact (json float repr round-trips doubles).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

BACKGROUND = 0  # reserved slot 0 of every predicate vocabulary

__all__ = [
    "BACKGROUND",
    "ConfigError",
    "DataError",
    "NumericError",
    "Vocabulary",
    "object_vocabulary",
    "predicate_vocabulary",
    "BoundingBox",
    "DetectedObject",
    "PairSample",
    "SceneGraph",
    "RankedPredictions",
    "validate_scene_graph",
    "canonical_triplet_set",
    "canonical_order",
    "make_ranked",
    "encode_scene_graph",
    "decode_scene_graph",
    "encode_ranked",
    "decode_ranked",
]


class ConfigError(ValueError):
    """Bad configuration; maps to CLI exit code 2."""


class DataError(ValueError):
    """Malformed or inconsistent data; maps to CLI exit code 3."""


class NumericError(ArithmeticError):
    """Non-finite or diverging numerics; maps to CLI exit code 4."""


@dataclass(frozen=True)
class Vocabulary:
    names: tuple[str, ...]
    kind: str  # "object" or "predicate"

    def __post_init__(self):
        if self.kind not in ("object", "predicate"):
            raise ConfigError(f"unknown vocabulary kind {self.kind!r}")
        if len(set(self.names)) != len(self.names):
            raise ConfigError("vocabulary names must be unique")
        if len(self.names) == 0:
            raise ConfigError("empty vocabulary")
        if self.kind == "predicate" and len(self.names) < 2:
            # slot 0 is the background class, so a usable vocabulary needs >= 2
            raise ConfigError("predicate vocabulary needs background + at least one class")

    @property
    def size(self) -> int:
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)


def object_vocabulary(n: int) -> Vocabulary:
    return Vocabulary(tuple(f"obj{i:02d}" for i in range(n)), "object")


def predicate_vocabulary(n: int) -> Vocabulary:
    if n < 2:
        raise ConfigError("need at least background + 1 foreground predicate")
    return Vocabulary(("__background__",) + tuple(f"rel{i:02d}" for i in range(1, n)), "predicate")


@dataclass(frozen=True)
class BoundingBox:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(v) for v in vals):
            raise DataError(f"non-finite box {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DataError(f"degenerate box {vals}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


@dataclass(frozen=True, eq=False)
class DetectedObject:
    """One detector output: raw feature, box, and a (possibly wrong) tentative label."""

    box: BoundingBox
    raw_feature: np.ndarray
    tentative_label: int
    context_feature: np.ndarray | None = None  # filled by the object encoder
    refined_label: int | None = None  # filled by the object classifier


@dataclass(frozen=True, eq=False)
class PairSample:
    """Ordered (subject, object) candidate with its union-region context feature."""

    subject_idx: int
    object_idx: int
    union_context: np.ndarray
    gt_predicate: int  # BACKGROUND for negative pairs


@dataclass(frozen=True)
class SceneGraph:
    """Entities (class, box) plus (subject, predicate, object) relations over them."""

    entities: tuple[tuple[int, BoundingBox], ...]
    relations: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        object.__setattr__(self, "entities", tuple((int(c), b) for c, b in self.entities))
        object.__setattr__(self, "relations", tuple(tuple(int(v) for v in r) for r in self.relations))


def validate_scene_graph(g: SceneGraph, object_vocab: Vocabulary, predicate_vocab: Vocabulary) -> list[str]:
    """Return every invariant violation with its location; empty list means valid."""
    problems: list[str] = []
    n = len(g.entities)
    for i, (cls, _box) in enumerate(g.entities):
        if not (0 <= cls < object_vocab.size):
            problems.append(f"entity {i}: class {cls} outside vocabulary of size {object_vocab.size}")
    for k, (s, p, o) in enumerate(g.relations):
        if not (0 <= s < n):
            problems.append(f"relation {k}: subject index {s} outside [0, {n})")
        if not (0 <= o < n):
            problems.append(f"relation {k}: object index {o} outside [0, {n})")
        if s == o:
            problems.append(f"relation {k}: self-relation on entity {s}")
        if p == BACKGROUND:
            problems.append(f"relation {k}: background predicate stored")
        elif not (0 < p < predicate_vocab.size):
            problems.append(f"relation {k}: predicate {p} outside (0, {predicate_vocab.size})")
    return problems


def canonical_triplet_set(g: SceneGraph) -> set[tuple[int, int, int]]:
    """Class-level (subject class, predicate, object class) triplets of a graph."""
    return {(g.entities[s][0], p, g.entities[o][0]) for s, p, o in g.relations}


# --- ranked predictions -------------------------------------------------

Triplet = tuple[int, int, int, int, int, float]  # (s_idx, s_cls, pred, o_idx, o_cls, score)


@dataclass(frozen=True)
class RankedPredictions:
    """Per-image triplet ranking in canonical order (see canonical_order)."""

    image_id: str
    triplets: tuple[Triplet, ...]


def canonical_order(triplets: Iterable[Triplet]) -> tuple[Triplet, ...]:
    """Scores non-increasing; ties broken by (subject idx, object idx, predicate) ascending."""
    return tuple(sorted(triplets, key=lambda t: (-t[5], t[0], t[3], t[2])))


def make_ranked(image_id: str, triplets: Iterable[Triplet]) -> RankedPredictions:
    ordered = canonical_order(triplets)
    keys = [(t[0], t[2], t[3]) for t in ordered]
    if len(set(keys)) != len(keys):
        raise DataError(f"duplicate (subject, predicate, object) triplet in {image_id}")
    return RankedPredictions(image_id, ordered)


# --- exact JSON schemas -------------------------------------------------

def encode_scene_graph(g: SceneGraph) -> dict:
    return {
        "entities": [{"class": c, "box": [b.x1, b.y1, b.x2, b.y2]} for c, b in g.entities],
        "relations": [[s, p, o] for s, p, o in g.relations],
    }


def decode_scene_graph(d: dict) -> SceneGraph:
    try:
        ents = tuple((int(e["class"]), BoundingBox(*map(float, e["box"]))) for e in d["entities"])
        rels = tuple((int(s), int(p), int(o)) for s, p, o in d["relations"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"malformed scene graph record: {exc}") from exc
    return SceneGraph(ents, rels)


def encode_ranked(r: RankedPredictions) -> dict:
    return {
        "image_id": r.image_id,
        "triplets": [[si, sc, p, oi, oc, float(sc_)] for si, sc, p, oi, oc, sc_ in r.triplets],
    }


def decode_ranked(d: dict) -> RankedPredictions:
    try:
        trips = tuple(
            (int(si), int(sc), int(p), int(oi), int(oc), float(score))
            for si, sc, p, oi, oc, score in d["triplets"]
        )
        return RankedPredictions(str(d["image_id"]), trips)
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed ranked-predictions record: {exc}") from exc
