"""Run the default attack with the defense block and print the defense numbers.

    python3 scripts/defense_eval.py --out results/defense [--config scripts/configs/desk_patch_conv.json]
"""
import argparse
import json
from dataclasses import replace

from ubl import pipeline
from ubl.config import DefenseBlock, ExperimentConfig, preset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--config")
    ap.add_argument("--out", default="results/defense")
    args = ap.parse_args()
    cfg = ExperimentConfig.load(args.config) if args.config else preset("desk")
    if cfg.defense is None:
        cfg = replace(cfg, defense=DefenseBlock())
    rep = pipeline.run_experiment(cfg, args.out)
    print(json.dumps({"summary": rep.metrics["summary"], "defense": rep.metrics["defense"]}, indent=2))


if __name__ == "__main__":
    main()
