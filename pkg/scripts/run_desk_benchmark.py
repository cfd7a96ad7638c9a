#!/usr/bin/env python
"""Run the full desk-scale benchmark into one directory.

Defaults mirror the standard configuration (seed 42, 500/100/200 splits,
five training modes, effect rows, retrieval for baseline and tde). Rerunning
with the same arguments reuses finished stage artifacts.
"""

import argparse
import json
import sys

from sgdebias.experiment import ExperimentConfig, run_experiment


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="runs/desk", help="output directory")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--config", help="optional experiment config JSON")
    args = ap.parse_args()
    if args.config:
        with open(args.config) as fh:
            cfg = ExperimentConfig.from_json(json.load(fh))
        if args.seed != cfg.seed:
            cfg = ExperimentConfig.from_json({**cfg.to_json(), "seed": args.seed})
    else:
        cfg = ExperimentConfig(seed=args.seed)
    manifest = run_experiment(cfg, args.out)
    print(f"fingerprint {manifest['fingerprint']}")
    for name, rep in sorted(manifest["reports"].items()):
        mr = rep["mean_recall"].get("50")
        print(f"  {name}: mR@50 {mr if mr is None else round(mr, 4)}")
    for name, rep in sorted(manifest["retrieval"].items()):
        print(f"  retrieval/{name}: recall {rep['recall']} med {rep['median_rank']}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
