"""Experiment orchestration: train, score, prune, fine-tune, evaluate, sweep."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from .config import ExperimentConfig
from .errors import DataError
from .metrics import PruneReport, count_flops, count_params, evaluate
from .models import Model, ModelSpec, build, init_model
from .select import accumulate_importance, plan_from_tables, RetentionPlan
from .surgery import prune
from .train import finetune, train

log = logging.getLogger(__name__)


def load_data(cfg: ExperimentConfig):
    """``(train, test)`` datasets described by the config."""
    classes = cfg.classes or None
    if cfg.dataset == "idx":
        tr = D.load_idx(cfg.train_images, cfg.train_labels, "train", classes, cfg.train_cap)
        te = D.load_idx(cfg.test_images, cfg.test_labels, "test", classes, cfg.test_cap)
    elif cfg.dataset == "cifar10":
        tr = D.load_cifar10(cfg.cifar_train, "train", classes, cfg.train_cap)
        te = D.load_cifar10(cfg.cifar_test, "test", classes, cfg.test_cap)
    elif cfg.dataset == "synth-shapes":
        s = cfg.synth_size
        tr = D.synth_shapes(cfg.data_seed, cfg.synth_train, cfg.num_classes, s, s, "train")
        te = D.synth_shapes(cfg.data_seed + 1_000_003, cfg.synth_test, cfg.num_classes, s, s, "test")
    else:
        tr, te = D.load_dataset(cfg.train_file), D.load_dataset(cfg.test_file)
    if tr.num_classes != te.num_classes or tr.sample_shape != te.sample_shape:
        raise DataError("train and test splits disagree on classes or sample shape")
    return tr, te


def build_spec(cfg: ExperimentConfig, input_shape, num_classes) -> ModelSpec:
    kw = {"blocks_per_stage": cfg.blocks_per_stage} if cfg.arch == "resnet-lite" else {}
    return build(cfg.arch, cfg.channels, tuple(input_shape), num_classes, **kw)


def restrict_classes(ds: D.Dataset, n: int) -> D.Dataset:
    """The first ``n`` classes of a classification dataset."""
    idx = np.flatnonzero(ds.labels < n)
    sub = ds.subset(idx)
    return D.Dataset(sub.images, sub.labels, n, ds.split, ds.task, ds.mean, ds.std,
                     tuple(ds.class_ids[:n]), dict(ds.meta))


@dataclass
class PipelineResult:
    base: Model
    tables: list
    plan: RetentionPlan
    pruned: Model
    final: Model
    report: PruneReport
    curve: list = field(default_factory=list)
    finetune_curve: list = field(default_factory=list)


def score(cfg: ExperimentConfig, model: Model, ds: D.Dataset) -> list:
    return accumulate_importance(model, ds, per_class_cap=cfg.score_cap)


def train_base(cfg: ExperimentConfig, tr: D.Dataset, seed: int):
    spec = build_spec(cfg, tr.sample_shape, tr.num_classes)
    model = init_model(spec, seed, cfg.precision)
    return train(model, tr.astype(model.dtype), cfg.train_config(seed))


def prune_and_finetune(cfg, base: Model, tables, tr, te, k: float, strategy: str, seed: int,
                       metric_before: float | None = None, fraction: float = 0.3):
    t0 = time.perf_counter()
    plan = plan_from_tables(tables, k, strategy, seed, cfg.mode, fraction)
    pruned = prune(base, plan)
    metric_pruned = evaluate(pruned, te)
    final, ft_curve = finetune(pruned, tr.astype(pruned.dtype), cfg.train_config(seed), cfg.finetune_epochs,
                               schedule=cfg.finetune_schedule)
    if metric_before is None:
        metric_before = evaluate(base, te)
    report = PruneReport.build(base.spec, final.spec, metric_before, metric_pruned, evaluate(final, te),
                               plan, {"seed": seed}, time.perf_counter() - t0,
                               {"k": k, "strategy": strategy, "mode": cfg.mode})
    return plan, pruned, final, report, ft_curve


def run_pipeline(cfg: ExperimentConfig, seed: int | None = None, datasets=None) -> PipelineResult:
    """Train from scratch, score, prune at ``cfg.k`` and fine-tune."""
    seed = cfg.seed if seed is None else seed
    t0 = time.perf_counter()
    tr, te = datasets or load_data(cfg)
    base, curve = train_base(cfg, tr, seed)
    before = evaluate(base, te)
    log.info("seed %d: base %.4f", seed, before)
    tables = score(cfg, base, tr)
    plan, pruned, final, report, ft = prune_and_finetune(cfg, base, tables, tr, te, cfg.k, cfg.strategy, seed,
                                                         before)
    report.wall_clock_s = time.perf_counter() - t0
    report.seeds = {"seed": seed, "data_seed": cfg.data_seed}
    return PipelineResult(base, tables, plan, pruned, final, report, curve, ft)


SWEEP_FIELDS = ("study", "seed", "classes", "strategy", "k", "retained_channels", "flops", "params",
                "metric_base", "metric_pruned", "metric_finetuned")


def ablate(cfg: ExperimentConfig, datasets=None, studies=("k-sweep", "strategy", "classes")) -> list:
    """Rows for the retain-fraction sweep, the selection-strategy comparison
    (all at the same ``ceil(0.3 C)`` retention) and the class-count study
    (``k = cfg.k`` on the first n classes)."""
    tr, te = datasets or load_data(cfg)
    rows = []

    def row(study, seed, n_cls, strategy, k, base_metric, plan, rep):
        rows.append({
            "study": study, "seed": seed, "classes": n_cls, "strategy": strategy, "k": k,
            "retained_channels": sum(len(plan[j].retained) for j in plan),
            "flops": rep.flops_after, "params": rep.params_after, "metric_base": base_metric,
            "metric_pruned": rep.metric_pruned, "metric_finetuned": rep.metric_after,
        })

    for seed in cfg.seeds:
        if "k-sweep" in studies or "strategy" in studies:
            base, _ = train_base(cfg, tr, seed)
            before = evaluate(base, te)
            rows.append({"study": "base", "seed": seed, "classes": tr.num_classes, "strategy": "none", "k": 1.0,
                         "retained_channels": sum(base.spec.layers[j].out_ch for j in base.spec.prunable),
                         "flops": count_flops(base.spec), "params": count_params(base.spec),
                         "metric_base": before, "metric_pruned": before, "metric_finetuned": before})
            tables = score(cfg, base, tr)
            if "k-sweep" in studies:
                for k in cfg.ablate_ks:
                    plan, _, _, rep, _ = prune_and_finetune(cfg, base, tables, tr, te, k, "fgp", seed, before)
                    row("k-sweep", seed, tr.num_classes, "fgp", k, before, plan, rep)
            if "strategy" in studies:
                for strategy in cfg.ablate_strategies:
                    plan, _, _, rep, _ = prune_and_finetune(cfg, base, tables, tr, te, 0.3, strategy, seed, before,
                                                            fraction=0.3)
                    row("strategy", seed, tr.num_classes, strategy, 0.3, before, plan, rep)
        if "classes" in studies:
            for n in cfg.ablate_class_counts:
                if not 2 <= n <= tr.num_classes:
                    raise DataError(f"class count {n} outside [2, {tr.num_classes}]")
                sub = restrict_classes(tr, n), restrict_classes(te, n)
                base, _ = train_base(cfg, sub[0], seed)
                before = evaluate(base, sub[1])
                tables = score(cfg, base, sub[0])
                plan, _, _, rep, _ = prune_and_finetune(cfg, base, tables, *sub, cfg.k, "fgp", seed, before)
                row("classes", seed, n, "fgp", cfg.k, before, plan, rep)
    return rows


def rows_to_csv(rows, fields=SWEEP_FIELDS) -> str:
    out = [",".join(fields)]
    for r in rows:
        out.append(",".join(repr(r[f]) if isinstance(r[f], float) else str(r[f]) for f in fields))
    return "\n".join(out) + "\n"


def summarize(rows) -> str:
    """Aligned table of seed-averaged results per (study, classes, strategy, k)."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r["study"], r["classes"], r["strategy"], r["k"]), []).append(r)
    lines = [f"{'study':<9} {'classes':>7} {'strategy':<27} {'k':>4} {'FLOPs':>12} {'params':>9} "
             f"{'base':>7} {'pruned':>7} {'tuned':>7} {'gap':>7}"]
    for (study, n, strategy, k), rs in groups.items():
        m = {f: float(np.mean([r[f] for r in rs])) for f in ("flops", "params", "metric_base", "metric_pruned",
                                                            "metric_finetuned")}
        lines.append(f"{study:<9} {n:>7} {strategy:<27} {k:>4.2f} {m['flops']:>12,.0f} {m['params']:>9,.0f} "
                     f"{m['metric_base']:>7.4f} {m['metric_pruned']:>7.4f} {m['metric_finetuned']:>7.4f} "
                     f"{m['metric_finetuned'] - m['metric_base']:>+7.4f}")
    return "\n".join(lines) + "\n"
