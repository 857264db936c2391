"""BSR and BA against the BadMatch batch size N, optionally plotted.

    python3 scripts/batch_size_sweep.py --out results/ablation [--trigger fourier] [--plot]
"""
import argparse
from dataclasses import replace
from pathlib import Path

from ubl import pipeline
from ubl.config import TRIGGERS, preset


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default="results/ablation")
    ap.add_argument("--sizes", default="1,2,4,8,16,32")
    ap.add_argument("--backbone", default="conv-small")
    ap.add_argument("--trigger", default="white-patch", choices=sorted(TRIGGERS))
    ap.add_argument("--plot", action="store_true", help="also write bsr_vs_batch.png (needs matplotlib)")
    args = ap.parse_args()

    cfg = preset("desk", args.backbone)
    cfg = replace(cfg, attack=replace(cfg.attack, trigger=dict(TRIGGERS[args.trigger]))).validate()
    rows = pipeline.ablate_batch_size(cfg, [int(s) for s in args.sizes.split(",")], args.out)
    for r in rows:
        print(f"N={r['batch_size']:>3}  BA {r['BA']:.4f}  BSR {r['BSR']:.4f}±{r['BSR_std']:.4f}")
    if args.plot:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        n = [r["batch_size"] for r in rows]
        plt.errorbar(n, [r["BSR"] for r in rows], yerr=[r["BSR_std"] for r in rows], marker="o", label="BSR")
        plt.plot(n, [r["BA"] for r in rows], marker="s", label="BA")
        plt.xscale("log", base=2)
        plt.xlabel("batch size N")
        plt.ylim(-0.05, 1.05)
        plt.legend()
        plt.savefig(Path(args.out) / "bsr_vs_batch.png", dpi=120, bbox_inches="tight")


if __name__ == "__main__":
    main()
