"""End-to-end runs: data -> clean model -> attack -> evaluation -> defenses -> reports.

A run directory holds ``config.json`` (the echoed config), ``metrics.json``,
``metrics.csv``, loss-trace CSVs, checkpoints and ``timings.json``. Wall-clock
numbers only ever go to ``timings.json`` so reruns leave ``metrics.json``
byte-identical.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ubl import numcore as nc
from ubl.attack import TrainingError, train_badencoder_lite, train_baddist, train_badmatch
from ubl.config import ExperimentConfig, derive_seed
from ubl.data import Dataset, ConfigError, gen_synthetic_dataset, make_prompts, read_dataset, write_dataset
from ubl.defense import (AugmentationPolicy, ConvLocalHead, MaskingConfig, augmentation_defense_eval,
                         masked_accuracy, mntd_lite)
from ubl.evaluate import MetricsReport, evaluate_targeted, evaluate_untargeted
from ubl.model import Checkpoint, EncoderParams, init_params, load_checkpoint, save_checkpoint

SPLIT_NAMES = ("train", "finetune", "test")
CSV_COLUMNS = ("strategy", "trigger", "backbone", "BA", "BA_std", "BSR", "BSR_std", "avg")


@dataclass
class Data:
    train: Dataset
    finetune: Dataset
    test: Dataset

    @property
    def prompts(self):
        return make_prompts(self.train.class_names)


@dataclass
class RunReport:
    out: Path
    metrics: dict
    timings: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.metrics.get("status") == "complete" and all(self.metrics.get("self_checks", {}).values())


# -- small file helpers ----------------------------------------------------

def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_trace(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def _echo_config(cfg: ExperimentConfig, out: Path) -> None:
    _dump_json(out / "config.json", {**cfg.to_dict(), "config_digest": cfg.digest()})


def load_echoed_config(run_dir) -> ExperimentConfig:
    d = json.loads((Path(run_dir) / "config.json").read_text())
    d.pop("config_digest", None)
    return ExperimentConfig.from_dict(d)


def trigger_label(cfg: ExperimentConfig) -> str:
    return cfg.attack.trigger_spec().kind


# -- stages ----------------------------------------------------------------

def make_data(cfg: ExperimentConfig) -> Data:
    ds = cfg.dataset
    if ds.path:
        splits = [read_dataset(Path(ds.path) / s) for s in SPLIT_NAMES]
        if any(s.k != ds.K or s.image_size != ds.image_size for s in splits):
            raise ConfigError(f"dataset at {ds.path} does not match the dataset block")
        return Data(*splits)
    return Data(*(gen_synthetic_dataset(ds.K, ds.counts, ds.image_size, ds.seed, s) for s in SPLIT_NAMES))


def gen_data(cfg: ExperimentConfig, out) -> Data:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    data = make_data(cfg)
    for name in SPLIT_NAMES:
        write_dataset(out / name, getattr(data, name))
    _echo_config(cfg, out)
    return data


def train_clean(cfg: ExperimentConfig, data: Data, trace: list | None = None) -> EncoderParams:
    t = cfg.train
    params = init_params(cfg.model.backbone, cfg.dataset.image_size, cfg.model.h, seed=derive_seed(cfg.seed, "init"))
    ac = replace(cfg.attack.to_attack_config(derive_seed(cfg.seed, "clean"), t.tau),
                 p=0.0, iterations=t.iterations, batch_size=t.batch_size, lr=t.lr)
    return train_badmatch(params, data.train, ac, trace=trace)


def target_reference_image(data: Data, target: int) -> np.ndarray:
    """First fine-tuning image of the target class; BadEncoder-lite's anchor."""
    return data.finetune.images[int(np.flatnonzero(data.finetune.classes == target)[0])]


def attack_once(cfg: ExperimentConfig, clean: EncoderParams, data: Data, repeat_seed: int,
                traces: dict | None = None) -> EncoderParams:
    """Run the configured strategy once; fine-tuning stages go before BadMatch."""
    strategy = cfg.attack.strategy
    traces = {} if traces is None else traces
    ft_cfg = cfg.attack.to_attack_config(derive_seed(cfg.seed, "finetune", repeat_seed), cfg.train.tau)
    bm_cfg = cfg.attack.to_attack_config(derive_seed(cfg.seed, "attack", repeat_seed), cfg.train.tau)
    model = clean
    if strategy.startswith("baddist"):
        model = train_baddist(model, data.finetune, ft_cfg, trace=traces.setdefault("baddist", []))
    elif strategy.startswith("badencoder-lite"):
        ref = target_reference_image(data, cfg.attack.target_class)
        model = train_badencoder_lite(model, data.finetune, ref, ft_cfg, cfg.attack.a1, cfg.attack.a2,
                                      trace=traces.setdefault("badencoder", []))
    if strategy == "badmatch" or strategy.endswith("+badmatch"):
        model = train_badmatch(model, data.train, bm_cfg, trace=traces.setdefault("badmatch", []))
    return model


def evaluate_model(cfg: ExperimentConfig, model: EncoderParams, data: Data) -> MetricsReport:
    trig = cfg.attack.trigger_spec()
    prompts = data.prompts
    t = evaluate_targeted(model, data.test, trig, cfg.attack.target_class, prompts)
    u = evaluate_untargeted(model, data.test, trig, prompts)
    return MetricsReport(BA=t.BA, BSR=t.BSR, clean_acc=u.clean_acc, poisoned_acc=u.poisoned_acc)


def run_defenses(cfg: ExperimentConfig, clean: EncoderParams, model: EncoderParams, data: Data) -> dict:
    d = cfg.defense
    seed = derive_seed(cfg.seed, "defense")
    policy = AugmentationPolicy(tuple(d.augmentations), seed=seed % 2**31)
    before, after = augmentation_defense_eval(model, data.test, cfg.attack.trigger_spec(),
                                              cfg.attack.target_class, data.prompts, policy)
    mntd, _ = mntd_lite(clean, model, data.finetune, d.mntd_train_pairs, d.mntd_test_pairs,
                        seed=seed % 2**31, n_probes=d.mntd_probes)
    masked = None
    if model.arch == "conv-small":
        head = ConvLocalHead(model, data.prompts)
        masked = masked_accuracy(head, data.test.images, data.test.classes, MaskingConfig(d.mask_window))
    return {"bsr_before": before, "bsr_after": after, "mntd_accuracy": mntd, "masked_clean_accuracy": masked}


def _summary(reports: list[MetricsReport]) -> dict:
    out = {}
    for key in ("BA", "BSR", "clean_acc", "poisoned_acc"):
        vals = np.array([getattr(r, key) for r in reports], dtype=np.float64)
        out[key] = float(vals.mean())
        out[key + "_std"] = float(vals.std())
    out["avg"] = (out["BA"] + out["BSR"]) / 2
    return out


def _checkpoint_roundtrip(path: Path, ckpt: Checkpoint) -> bool:
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    return all(np.array_equal(back.params.tensors[k], v) and back.params.tensors[k].dtype == v.dtype
               for k, v in ckpt.params.tensors.items())


def _csv_row(cfg: ExperimentConfig, summary: dict) -> dict:
    return {"strategy": cfg.attack.strategy, "trigger": trigger_label(cfg), "backbone": cfg.model.backbone,
            **{k: summary[k] for k in CSV_COLUMNS[3:]}}


def write_csv(path: Path, rows: list[dict], columns=CSV_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})


# -- whole runs ------------------------------------------------------------

def run_experiment(cfg: ExperimentConfig, out=None, clean_ckpt=None) -> RunReport:
    out = Path(out or cfg.out or "run")
    out.mkdir(parents=True, exist_ok=True)
    cfg = cfg.with_overrides(out=str(out))
    _echo_config(cfg, out)
    digest = cfg.digest()
    timings: dict[str, float] = {}
    metrics: dict = {"config_digest": digest, "dataset_digest": cfg.dataset_digest(), "status": "running",
                     "strategy": cfg.attack.strategy, "trigger": trigger_label(cfg),
                     "backbone": cfg.model.backbone, "repeats": [], "self_checks": {}}
    stage = "data"
    try:
        t0 = time.perf_counter()
        data = make_data(cfg)
        timings["data"] = time.perf_counter() - t0

        stage = "clean"
        t0 = time.perf_counter()
        if clean_ckpt:
            clean = load_checkpoint(clean_ckpt).params
        else:
            trace: list = []
            clean = train_clean(cfg, data, trace)
            _write_trace(out / "trace_clean.csv", trace)
        timings["clean"] = time.perf_counter() - t0
        ck = Checkpoint(clean, digest, cfg.seed, cfg.train.iterations, {"role": "clean"})
        metrics["self_checks"]["clean_checkpoint_roundtrip"] = _checkpoint_roundtrip(out / "clean.ckpt", ck)
        clean_report = evaluate_model(cfg, clean, data)
        metrics["clean_accuracy"] = clean_report.BA

        reports, first_model = [], None
        for s in cfg.eval.seeds:
            stage = f"attack[seed={s}]"
            t0 = time.perf_counter()
            traces: dict = {}
            model = clean if cfg.attack.strategy == "clean" else attack_once(cfg, clean, data, s, traces)
            for name, rows in traces.items():
                _write_trace(out / f"trace_{name}_s{s}.csv", rows)
            if not model.is_finite():
                raise nc.NumericError("attacked model has non-finite parameters")
            rep = evaluate_model(cfg, model, data)
            rep.meta = {"seed": s, "config_digest": digest}
            reports.append(rep)
            metrics["repeats"].append(rep.to_dict())
            ck = Checkpoint(model, digest, s, cfg.attack.iterations, {"role": cfg.attack.strategy})
            metrics["self_checks"][f"checkpoint_roundtrip_s{s}"] = _checkpoint_roundtrip(out / f"model_s{s}.ckpt", ck)
            timings[f"attack_s{s}"] = time.perf_counter() - t0
            first_model = first_model or model

        metrics["summary"] = _summary(reports)
        metrics["self_checks"]["rates_in_unit_interval"] = all(
            0.0 <= v <= 1.0 for r in metrics["repeats"] for k, v in r.items() if k in ("BA", "BSR", "clean_acc", "poisoned_acc"))

        if cfg.defense is not None:
            stage = "defense"
            t0 = time.perf_counter()
            metrics["defense"] = run_defenses(cfg, clean, first_model, data)
            timings["defense"] = time.perf_counter() - t0
        metrics["status"] = "complete"
        write_csv(out / "metrics.csv", [_csv_row(cfg, metrics["summary"])])
    except (TrainingError, nc.NumericError) as exc:
        metrics["status"] = "failed"
        metrics["failure"] = {"stage": stage, "error": str(exc)}
        if metrics["repeats"]:
            metrics["summary"] = _summary([MetricsReport(**{k: r[k] for k in ("BA", "BSR", "clean_acc", "poisoned_acc")})
                                           for r in metrics["repeats"]])
    _dump_json(out / "metrics.json", metrics)
    _dump_json(out / "timings.json", timings)
    return RunReport(out, metrics, timings)


def ablate_batch_size(cfg: ExperimentConfig, sizes, out=None, clean_ckpt=None) -> list[dict]:
    """Rerun the attack pipeline per BadMatch batch size; the clean model and fine-tuning are shared."""
    sizes = [int(n) for n in sizes]
    if not sizes or min(sizes) < 1:
        raise ConfigError("batch sizes must be >= 1")
    out = Path(out or cfg.out or "ablation")
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out)
    data = make_data(cfg)
    clean = load_checkpoint(clean_ckpt).params if clean_ckpt else train_clean(cfg, data)
    strategy = cfg.attack.strategy
    pre = {}
    if "+" in strategy:
        head = replace(cfg, attack=replace(cfg.attack, strategy=strategy.split("+")[0]))
        pre = {s: attack_once(head, clean, data, s) for s in cfg.eval.seeds}
    rows = []
    for n in sizes:
        sized = replace(cfg, attack=replace(cfg.attack, batch_size=n,
                                            strategy="badmatch" if pre else strategy))
        reports = []
        for s in cfg.eval.seeds:
            model = attack_once(sized, pre.get(s, clean), data, s)
            reports.append(evaluate_model(cfg, model, data))
        rows.append({"batch_size": n, **_summary(reports)})
    cols = ("batch_size", "BA", "BA_std", "BSR", "BSR_std", "avg")
    write_csv(out / "ablation.csv", rows, cols)
    _dump_json(out / "ablation.json", {"config_digest": cfg.digest(), "strategy": strategy,
                                       "sizes": sizes, "rows": rows})
    return rows


def eval_checkpoints(cfg: ExperimentConfig, checkpoints, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _echo_config(cfg, out)
    data = make_data(cfg)
    reps = []
    for path in checkpoints:
        ck = load_checkpoint(path)
        r = evaluate_model(cfg, ck.params, data)
        r.meta = {"checkpoint": str(path), "seed": ck.seed, "config_digest": cfg.digest()}
        reps.append(r)
    metrics = {"config_digest": cfg.digest(), "dataset_digest": cfg.dataset_digest(),
               "repeats": [r.to_dict() for r in reps], "summary": _summary(reps), "status": "complete",
               "strategy": cfg.attack.strategy, "trigger": trigger_label(cfg), "backbone": cfg.model.backbone}
    _dump_json(out / "metrics.json", metrics)
    write_csv(out / "metrics.csv", [_csv_row(cfg, metrics["summary"])])
    return metrics


def defend_checkpoint(cfg: ExperimentConfig, clean_ckpt, suspect_ckpt, out) -> dict:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.defense is None:
        from ubl.config import DefenseBlock
        cfg = replace(cfg, defense=DefenseBlock())
    _echo_config(cfg, out)
    data = make_data(cfg)
    res = run_defenses(cfg, load_checkpoint(clean_ckpt).params, load_checkpoint(suspect_ckpt).params, data)
    _dump_json(out / "defense.json", {"config_digest": cfg.digest(), "defense": res})
    return res


def merge_reports(run_dirs, out_csv, force: bool = False) -> list[dict]:
    """One Tables-I/II-shaped CSV over several run directories."""
    rows, digests = [], set()
    for d in run_dirs:
        m = json.loads((Path(d) / "metrics.json").read_text())
        if m.get("status") != "complete":
            raise ConfigError(f"{d}: run did not complete")
        digests.add(m["dataset_digest"])
        rows.append({"strategy": m["strategy"], "trigger": m["trigger"], "backbone": m["backbone"],
                     **{k: m["summary"][k] for k in CSV_COLUMNS[3:]}})
    if len(digests) > 1 and not force:
        raise ConfigError(f"runs use different datasets ({sorted(digests)}); pass --force to merge anyway")
    write_csv(Path(out_csv), rows)
    return rows
