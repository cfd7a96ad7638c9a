"""Effect scores built from differences of scenario forwards, in logit space.

Each effect kind is a signed combination of full forward passes under pinned
scenarios; nothing is re-derived from another effect, so the textbook
decomposition identities hold only because the shared terms agree, which is
exactly what the tests assert. The debiased prediction ranks triplets by the
chosen effect's logits after dropping the background slot.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .core import ConfigError, RankedPredictions, make_ranked
from .losses import softmax
from .model import (
    CausalModel,
    Forward,
    ImageArrays,
    Scenario,
    TASKS,
    X_INTERVENED,
    X_OBSERVED,
    Z_FIXED_BASELINE,
    Z_FIXED_OBSERVED,
    Z_NATURAL,
    forward,
)


class EffectKind(enum.Enum):
    BASELINE = "baseline"
    TDE = "tde"
    TE = "te"
    NIE = "nie"
    TIE = "tie"
    NDE = "nde"
    X2Y = "x2y"


_OBS_NAT = Scenario(X_OBSERVED, Z_NATURAL)
_INT_Z = Scenario(X_INTERVENED, Z_FIXED_OBSERVED)
_INT_ZBAR = Scenario(X_INTERVENED, Z_FIXED_BASELINE)
_OBS_ZBAR = Scenario(X_OBSERVED, Z_FIXED_BASELINE)

# term name -> scenario; names follow the subscript convention Y_<x>_<z>
_TERMS: dict[str, Scenario] = {
    "Y_x": _OBS_NAT,
    "Y_xbar_z": _INT_Z,
    "Y_xbar": _INT_ZBAR,
    "Y_x_zbar": _OBS_ZBAR,
}

# effect -> list of (term, sign); single-term kinds are plain forwards
EFFECT_DEFINITIONS: dict[EffectKind, tuple[tuple[str, float], ...]] = {
    EffectKind.BASELINE: (("Y_x", 1.0),),
    EffectKind.TDE: (("Y_x", 1.0), ("Y_xbar_z", -1.0)),
    EffectKind.TE: (("Y_x", 1.0), ("Y_xbar", -1.0)),
    EffectKind.NIE: (("Y_xbar_z", 1.0), ("Y_xbar", -1.0)),
    EffectKind.TIE: (("Y_x", 1.0), ("Y_x_zbar", -1.0)),
    EffectKind.NDE: (("Y_x_zbar", 1.0), ("Y_xbar", -1.0)),
}


@dataclass(frozen=True, eq=False)
class EffectResult:
    kind: EffectKind
    logits: np.ndarray  # (n_pairs, P)
    trace: tuple[str, ...]  # forward terms actually evaluated, in order
    observed: Forward  # the plain observed forward (labels, probabilities)


def effect(kind: EffectKind, model: CausalModel, img: ImageArrays,
           task: str | None = None) -> EffectResult:
    """Evaluate one effect's logits for every candidate pair of an image."""
    task = model.task if task is None else task
    if task not in TASKS:
        raise ConfigError(f"bad task {task!r}")
    obs = forward(model, img, _OBS_NAT, task)
    if kind == EffectKind.X2Y:
        return EffectResult(kind, obs.t_x, ("x_branch",), obs)
    total = np.zeros_like(obs.y)
    trace = []
    for term, sign in EFFECT_DEFINITIONS[kind]:
        fw = obs if _TERMS[term] == _OBS_NAT else forward(model, img, _TERMS[term], task)
        total = total + sign * fw.y
        trace.append(term)
    return EffectResult(kind, total, tuple(trace), obs)


def unbiased_predict(model: CausalModel, img: ImageArrays, task: str | None = None,
                     kind: EffectKind = EffectKind.TDE) -> RankedPredictions:
    """Rank candidate triplets of one image by effect-derived scores.

    Per pair: drop the background slot, softmax the foreground logits; the
    triplet score is that probability, multiplied under sgcls by both
    endpoint label probabilities. Canonical ordering applies.
    """
    task = model.task if task is None else task
    res = effect(kind, model, img, task)
    m = len(img.pair_s)
    if m == 0:
        return make_ranked(img.image_id, ())
    fg_probs = softmax(res.logits[:, 1:])
    labels = res.observed.labels
    if task == "sgcls":
        obj_probs = softmax(res.observed.obj_logits)
        label_p = obj_probs[np.arange(len(labels)), labels]
    else:
        label_p = np.ones(len(labels))
    triplets = []
    for e in range(m):
        s, o = int(img.pair_s[e]), int(img.pair_o[e])
        pair_scale = float(label_p[s] * label_p[o])
        for k in range(1, model.n_predicates):
            triplets.append(
                (s, int(labels[s]), k, o, int(labels[o]), pair_scale * float(fg_probs[e, k - 1]))
            )
    return make_ranked(img.image_id, triplets)
