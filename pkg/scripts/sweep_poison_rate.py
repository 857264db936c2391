"""BSR as a function of the poison proportion p, with and without BadDist first.

    python3 scripts/sweep_poison_rate.py --trigger fourier --rates 0.02,0.05,0.1,0.2
"""
import argparse
from dataclasses import replace

import numpy as np

from ubl import pipeline
from ubl.config import TRIGGERS, preset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--trigger", default="fourier", choices=sorted(TRIGGERS))
    ap.add_argument("--backbone", default="conv-small")
    ap.add_argument("--rates", default="0.02,0.05,0.1,0.2")
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()

    cfg = preset("desk", args.backbone)
    seeds = [int(s) for s in args.seeds.split(",")]
    data = pipeline.make_data(cfg)
    clean = pipeline.train_clean(cfg, data)
    print(f"{'p':>6} {'badmatch':>10} {'baddist+badmatch':>18}")
    for p in (float(r) for r in args.rates.split(",")):
        cells = []
        for strategy in ("badmatch", "baddist+badmatch"):
            c = replace(cfg, attack=replace(cfg.attack, strategy=strategy, p=p, trigger=dict(TRIGGERS[args.trigger])))
            bsr = [pipeline.evaluate_model(c, pipeline.attack_once(c, clean, data, s), data).BSR for s in seeds]
            cells.append(np.mean(bsr))
        print(f"{p:6.3f} {cells[0]:10.4f} {cells[1]:18.4f}", flush=True)


if __name__ == "__main__":
    main()
