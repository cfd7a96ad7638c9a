"""Shared fixtures: a tiny fast world and the full seeded benchmark bundle."""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import pytest

from sgdebias.effects import EffectKind
from sgdebias.model import init_model
from sgdebias.synth import (
    WorldConfig,
    generate_dataset,
    predicate_counts,
    select_zero_shot_holdout,
)
from sgdebias.train import TrainConfig, train

from helpers import predict_pairs


TINY = WorldConfig(
    n_object_classes=6, n_predicates=5, d_r=6, d_x=6, d_v=6,
    objects_per_image=(3, 4), fg_relations_per_image=(1, 3), seed=7,
)


@pytest.fixture(scope="session")
def tiny_cfg():
    return TINY


@pytest.fixture(scope="session")
def tiny_splits():
    return generate_dataset(TINY, 12, 4, 6)


def _init_for(cfg: WorldConfig, fusion="sum", task="predcls", seed=0):
    return init_model(cfg.n_object_classes, cfg.n_predicates, cfg.d_r, cfg.d_x,
                      cfg.d_v, fusion=fusion, task=task, seed=seed)


@pytest.fixture(scope="session")
def tiny_trained(tiny_splits):
    model = _init_for(TINY, seed=3)
    log = train(model, tiny_splits["train"], tiny_splits["val"],
                TrainConfig(epochs=3, seed=3))
    return model, log


@pytest.fixture(scope="session")
def bench42():
    """Default seeded benchmark: 500/100/200, 5-triplet holdout, two trainings.

    Shared by the acceptance tests (debiasing direction, zero-shot contrast)
    and the regression tests that freeze values from this exact run.
    """
    base = WorldConfig()
    holdout = select_zero_shot_holdout(base, 500, 100, 200, 5)
    cfg = replace(base, zero_shot_holdout=holdout)
    splits = generate_dataset(cfg, 500, 100, 200)

    def train_one(debias):
        model = _init_for(cfg, fusion="sum", task="predcls", seed=42)
        log = train(model, splits["train"], splits["val"],
                    TrainConfig(debias=debias, seed=42))
        return model, log

    none_model, none_log = train_one("none")
    rw_model, rw_log = train_one("reweight")
    test = splits["test"]
    return {
        "cfg": cfg,
        "holdout": holdout,
        "splits": splits,
        "counts": predicate_counts(splits["train"]),
        "registry": test.train_triplet_registry,
        "none_model": none_model,
        "none_log": none_log,
        "reweight_model": rw_model,
        "reweight_log": rw_log,
        "pairs_baseline": predict_pairs(none_model, test, "predcls", EffectKind.BASELINE),
        "pairs_tde": predict_pairs(none_model, test, "predcls", EffectKind.TDE),
        "pairs_reweight": predict_pairs(rw_model, test, "predcls", EffectKind.BASELINE),
    }
