"""Command-line entry point: ``ubl <subcommand> --config c.json --seed 0 --out dir``."""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from threadpoolctl import threadpool_limits

from ubl import pipeline
from ubl.config import ExperimentConfig, preset
from ubl.data import ConfigError, IntegrityError
from ubl.numcore import FormatError


def _load_config(args) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.load(args.config)
    else:
        cfg = preset(args.preset, args.backbone or "conv-small")
    if args.config and args.backbone:
        cfg = replace(cfg, model=replace(cfg.model, backbone=args.backbone)).validate()
    if getattr(args, "data", None):
        cfg = replace(cfg, dataset=replace(cfg.dataset, path=str(args.data)))
    return cfg.with_overrides(seed=args.seed, out=args.out)


def _cmd_gen_data(args, cfg):
    data = pipeline.gen_data(cfg, args.out)
    print(f"wrote {len(data.train)}/{len(data.finetune)}/{len(data.test)} train/finetune/test samples to {args.out}")
    return 0


def _cmd_train_clean(args, cfg):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    data = pipeline.make_data(cfg)
    trace: list = []
    params = pipeline.train_clean(cfg, data, trace)
    pipeline._write_trace(out / "trace_clean.csv", trace)
    ck = pipeline.Checkpoint(params, cfg.digest(), cfg.seed, cfg.train.iterations, {"role": "clean"})
    ok = pipeline._checkpoint_roundtrip(out / "clean.ckpt", ck)
    pipeline._echo_config(cfg, out)
    acc = pipeline.evaluate_model(cfg, params, data).BA
    print(f"clean zero-shot accuracy {acc:.4f}; checkpoint {out / 'clean.ckpt'}")
    return 0 if ok else 1


def _cmd_attack(args, cfg):
    report = pipeline.run_experiment(cfg, args.out, clean_ckpt=args.clean)
    s = report.metrics.get("summary", {})
    if s:
        print(f"{cfg.attack.strategy} / {pipeline.trigger_label(cfg)} / {cfg.model.backbone}: "
              f"BA {s['BA']:.4f}±{s['BA_std']:.4f}  BSR {s['BSR']:.4f}±{s['BSR_std']:.4f}")
    if not report.ok:
        print(f"run incomplete: {report.metrics.get('failure') or report.metrics['self_checks']}", file=sys.stderr)
    return 0 if report.ok else 1


def _cmd_eval(args, cfg):
    m = pipeline.eval_checkpoints(cfg, args.checkpoint, args.out)
    print(json.dumps(m["summary"], indent=2, sort_keys=True))
    return 0


def _cmd_ablate(args, cfg):
    sizes = [int(x) for x in args.sizes.split(",")]
    rows = pipeline.ablate_batch_size(cfg, sizes, args.out, clean_ckpt=args.clean)
    for r in rows:
        print(f"N={r['batch_size']:>3}  BA {r['BA']:.4f}  BSR {r['BSR']:.4f}±{r['BSR_std']:.4f}")
    return 0


def _cmd_defend(args, cfg):
    res = pipeline.defend_checkpoint(cfg, args.clean, args.checkpoint[0], args.out)
    print(json.dumps(res, indent=2, sort_keys=True))
    return 0


def _cmd_report(args, cfg):
    rows = pipeline.merge_reports(args.runs, args.out, force=args.force)
    print(f"merged {len(rows)} runs into {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ubl", description="Backdoor attacks on unpaired image-text contrastive models.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", type=Path, help="experiment config JSON (strict)")
        p.add_argument("--preset", default="desk", help="desk or paper-<setting> when no --config is given")
        p.add_argument("--backbone", choices=("conv-small", "mlp-small"), help="override model.backbone")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--out", required=name != "report", type=str, help="output directory (CSV path for report)")
        p.set_defaults(func=fn)
        return p

    add("gen-data", _cmd_gen_data, "generate the synthetic dataset splits")
    p = add("train-clean", _cmd_train_clean, "train a benign encoder pair")
    p.add_argument("--data", type=Path, help="gen-data output directory")
    p = add("attack", _cmd_attack, "run the configured attack strategy and evaluate it")
    p.add_argument("--data", type=Path)
    p.add_argument("--clean", type=Path, help="reuse a clean checkpoint")
    p = add("eval", _cmd_eval, "evaluate checkpoints (BA, BSR, untargeted accuracy)")
    p.add_argument("--data", type=Path)
    p.add_argument("--checkpoint", type=Path, nargs="+", required=True)
    p = add("ablate-batch-size", _cmd_ablate, "sweep the BadMatch batch size")
    p.add_argument("--data", type=Path)
    p.add_argument("--clean", type=Path)
    p.add_argument("--sizes", default="1,2,4,8,16,32")
    p = add("defend", _cmd_defend, "augmentation, MNTD-lite and robust masking on a suspect checkpoint")
    p.add_argument("--data", type=Path)
    p.add_argument("--clean", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, nargs=1, required=True)
    p = add("report", _cmd_report, "merge run directories into one results CSV")
    p.add_argument("runs", nargs="+", type=Path)
    p.add_argument("--force", action="store_true", help="merge runs with different datasets")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "report":
        args.out = args.out or "report.csv"
    threads = int(os.environ.get("UBL_THREADS", "1"))
    try:
        cfg = _load_config(args)
        with threadpool_limits(limits=max(threads, 1)):
            return args.func(args, cfg)
    except (ConfigError, IntegrityError, FormatError, FileNotFoundError) as exc:
        print(f"ubl {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
