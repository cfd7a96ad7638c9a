#!/usr/bin/env python
"""Tiny end-to-end smoke run: generate, train, score, one effect comparison.

Finishes in well under a minute; useful as a quick environment check.
"""

import sys
import tempfile

import numpy as np

from sgdebias.effects import EffectKind
from sgdebias.experiment import predict_split
from sgdebias.metrics import evaluate
from sgdebias.model import init_model
from sgdebias.synth import WorldConfig, generate_dataset
from sgdebias.train import TrainConfig, train


def main() -> int:
    cfg = WorldConfig(seed=7)
    splits = generate_dataset(cfg, 60, 20, 30)
    model = init_model(cfg.n_object_classes, cfg.n_predicates, cfg.d_r, cfg.d_x, cfg.d_v,
                       fusion="sum", task="predcls", seed=7)
    log = train(model, splits["train"], splits["val"], TrainConfig(epochs=4, seed=7))
    print(f"trained 4 epochs, val mR@50 {log['final_val_mean_recall']:.4f}")
    for kind in (EffectKind.BASELINE, EffectKind.TDE):
        preds = predict_split(model, splits["test"], "predcls", kind)
        pairs = [(p, img.gt) for p, img in zip(preds, splits["test"].images)]
        rep = evaluate(pairs, (50,), cfg.n_predicates, task="predcls", method=kind.value)
        print(f"  {kind.value}: R@50 {rep.recall[50]:.4f} mR@50 {rep.mean_recall[50]:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
