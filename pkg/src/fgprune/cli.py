"""Command-line entry point.

Every command reads an experiment config (``key = value`` file, overridable
with ``--set key=value``) and writes into a run directory. Outputs are staged
in memory and written only once the command has succeeded, then recorded in
``manifest.json`` together with the sha256 of every input and output.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
from pathlib import Path


from . import checkpoint
from .cam import channel_heatmaps, to_csv, to_pgm
from .config import ExperimentConfig
from .errors import CheckpointError, ConfigError, DataError, FGPError, NumericError, PlanError, ShapeError
from .experiment import ablate, build_spec, load_data, rows_to_csv, summarize
from .metrics import PruneReport, evaluate, metric_name
from .models import init_model
from .select import accumulate_importance, plan_from_tables, tables_from_csv, tables_to_csv
from .surgery import prune
from .train import finetune, train

log = logging.getLogger("fgprune")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3, 4, 5
MANIFEST = "manifest.json"
VOLATILE = ("report.txt", "report.csv", "report.json")  # carry wall-clock time


def sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def file_hash(path) -> str:
    return sha256(Path(path).read_bytes())


def curve_csv(curve) -> str:
    keys = ["epoch", "lr", "loss"] + (["metric"] if any("metric" in r for r in curve) else [])
    lines = [",".join(keys)]
    lines += [",".join(repr(r.get(k, "")) if isinstance(r.get(k), float) else str(r.get(k, "")) for k in keys)
              for r in curve]
    return "\n".join(lines) + "\n"


class Run:
    """Staged outputs of one command in one run directory."""

    def __init__(self, out_dir, command: str, cfg: ExperimentConfig, seed: int):
        self.dir = Path(out_dir)
        self.command = command
        self.cfg = cfg
        self.inputs = {str(p): file_hash(p) for p in cfg.input_paths() if p}
        self.outputs: dict = {}
        self.info: dict = {"seed": seed, "data_seed": cfg.data_seed}
        self.t0 = time.perf_counter()

    def read(self, path) -> Path:
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"required input {path} does not exist")
        self.inputs[str(path)] = file_hash(path)
        return path

    def put(self, name: str, data) -> None:
        self.outputs[name] = data.encode("utf-8") if isinstance(data, str) else bytes(data)

    def commit(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        written = []
        try:
            for name, data in self.outputs.items():
                p = self.dir / name
                p.parent.mkdir(parents=True, exist_ok=True)
                p.write_bytes(data)
                written.append(p)
            self._update_manifest()
        except BaseException:
            for p in written:
                p.unlink(missing_ok=True)
            raise

    def _update_manifest(self) -> None:
        path = self.dir / MANIFEST
        manifest = json.loads(path.read_text()) if path.is_file() else {"steps": {}}
        manifest["steps"][self.command] = {
            "inputs": self.inputs,
            "outputs": {n: sha256(d) for n, d in self.outputs.items()},
            "volatile": [n for n in self.outputs if n in VOLATILE],
            "config": self.cfg.to_text(),
            "wall_clock_s": round(time.perf_counter() - self.t0, 3),
            **self.info,
        }
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


# -- commands --------------------------------------------------------------------------


def cmd_train(args, cfg, run):
    tr, te = load_data(cfg)
    spec = build_spec(cfg, tr.sample_shape, tr.num_classes)
    model = init_model(spec, cfg.seed, cfg.precision)
    model, curve = train(model, tr.astype(model.dtype), cfg.train_config(), te, args.eval_every)
    metric = evaluate(model, te)
    run.info["metric"] = metric
    run.put("model.fgpc", checkpoint.to_bytes(model))
    run.put("train_curve.csv", curve_csv(curve))
    print(f"{metric_name(spec)} {metric:.4f}")


def cmd_heatmap(args, cfg, run):
    model, _ = checkpoint.load(run.read(args.checkpoint))
    tr, te = load_data(cfg)
    ds = te if args.split == "test" else tr
    if not 0 <= args.sample < len(ds):
        raise DataError(f"sample {args.sample} outside [0, {len(ds)})")
    layers = [args.layer] if args.layer is not None else list(model.spec.prunable)
    mask = ds.labels[args.sample] if model.spec.task == "segmentation" else None
    hm = channel_heatmaps(model, ds.images[args.sample], args.cls, layers, mask)
    if hm is None:
        raise DataError(f"class {args.cls} does not occur in sample {args.sample}")
    for j, lh in hm.items():
        stem = f"heatmaps/s{args.sample}_d{args.cls}_l{j}"
        run.put(f"{stem}_layer.pgm", to_pgm(lh.layer_map))
        for c in range(len(lh)):
            run.put(f"{stem}_c{c}.pgm", to_pgm(lh.maps[c]))
            run.put(f"{stem}_c{c}.csv", to_csv(lh.maps[c]))
    print(f"wrote heatmaps for layers {layers}")


def cmd_score(args, cfg, run):
    model, _ = checkpoint.load(run.read(args.checkpoint))
    tr, _ = load_data(cfg)
    tables = accumulate_importance(model, tr.astype(model.dtype), per_class_cap=cfg.score_cap)
    run.put("importance.csv", tables_to_csv(tables))
    print(f"scored {sum(t.channels for t in tables)} channels in {len(tables)} layers")


def cmd_prune(args, cfg, run):
    model, _ = checkpoint.load(run.read(args.checkpoint))
    tables = tables_from_csv(run.read(args.importance).read_text())
    k = cfg.k if args.k is None else args.k
    plan = plan_from_tables(tables, k, cfg.strategy, cfg.seed, cfg.mode)
    pruned = prune(model, plan)
    _, te = load_data(cfg)
    before, after = evaluate(model, te), evaluate(pruned, te)
    run.info.update(metric_before=before, metric_pruned=after, k=k, strategy=cfg.strategy)
    run.put("pruned.fgpc", checkpoint.to_bytes(pruned, plan))
    run.put("plan.json", plan.to_json())
    print(f"kept {sum(len(plan[j].retained) for j in plan)} of {sum(plan[j].channels for j in plan)} channels; "
          f"{metric_name(model.spec)} {before:.4f} -> {after:.4f}")


def cmd_finetune(args, cfg, run):
    model, plan = checkpoint.load(run.read(args.checkpoint))
    tr, te = load_data(cfg)
    model, curve = finetune(model, tr.astype(model.dtype), cfg.train_config(), cfg.finetune_epochs, te,
                            args.eval_every, cfg.finetune_schedule)
    metric = evaluate(model, te)
    run.info["metric"] = metric
    run.put("finetuned.fgpc", checkpoint.to_bytes(model, plan))
    run.put("finetune_curve.csv", curve_csv(curve))
    print(f"{metric_name(model.spec)} {metric:.4f}")


def cmd_eval(args, cfg, run):
    model, _ = checkpoint.load(run.read(args.checkpoint))
    _, te = load_data(cfg)
    metric = evaluate(model, te)
    run.info["metric"] = metric
    name = Path(args.checkpoint).stem
    run.put(f"eval_{name}.json", json.dumps({"checkpoint": name, metric_name(model.spec): metric},
                                            sort_keys=True) + "\n")
    print(f"{metric_name(model.spec)} {metric:.4f}")


def cmd_report(args, cfg, run):
    steps = _manifest_steps(run.dir)
    for need in ("train", "prune", "finetune"):
        if need not in steps:
            raise DataError(f"run directory has no '{need}' step")
    base, _ = checkpoint.load(run.read(run.dir / "model.fgpc"))
    final, plan = checkpoint.load(run.read(run.dir / "finetuned.fgpc"))
    wall = sum(steps[s]["wall_clock_s"] for s in ("train", "score", "prune", "finetune") if s in steps)
    rep = PruneReport.build(base.spec, final.spec, steps["train"]["metric"], steps["prune"]["metric_pruned"],
                            steps["finetune"]["metric"], plan,
                            {"seed": steps["train"]["seed"], "data_seed": steps["train"]["data_seed"]}, wall,
                            {"k": steps["prune"]["k"], "strategy": steps["prune"]["strategy"]})
    rep.check()
    run.put("report.txt", rep.to_text())
    run.put("report.csv", rep.to_csv())
    run.put("report.json", rep.to_json())
    print(rep.to_text(), end="")


def cmd_ablate(args, cfg, run):
    studies = tuple(args.studies.split(",")) if args.studies else ("k-sweep", "strategy", "classes")
    if not cfg.ablate_class_counts:
        studies = tuple(s for s in studies if s != "classes")
    rows = ablate(cfg, studies=studies)
    run.put("ablate.csv", rows_to_csv(rows))
    run.put("ablate.txt", summarize(rows))
    print(summarize(rows), end="")


def _manifest_steps(run_dir: Path) -> dict:
    path = run_dir / MANIFEST
    if not path.is_file():
        raise DataError(f"{run_dir} has no {MANIFEST}")
    return json.loads(path.read_text())["steps"]


COMMANDS = {
    "train": cmd_train, "heatmap": cmd_heatmap, "score": cmd_score, "prune": cmd_prune,
    "finetune": cmd_finetune, "eval": cmd_eval, "report": cmd_report, "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fgprune", description="Feature-gradient channel pruning experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, ckpt=False):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=name != "report", help="experiment config file")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        s.add_argument("--out", help="run directory (default: out_dir from the config)")
        if ckpt:
            s.add_argument("--checkpoint", required=True)
        return s

    add("train", "train a model from scratch").add_argument("--eval-every", type=int, default=0)
    s = add("heatmap", "write per-channel heatmaps of one sample", ckpt=True)
    s.add_argument("--sample", type=int, required=True)
    s.add_argument("--cls", type=int, required=True)
    s.add_argument("--layer", type=int, help="conv layer id (default: all prunable layers)")
    s.add_argument("--split", choices=("train", "test"), default="test")
    add("score", "accumulate channel importance tables", ckpt=True)
    s = add("prune", "select channels and rebuild the model", ckpt=True)
    s.add_argument("--importance", required=True)
    s.add_argument("--k", type=float)
    add("finetune", "fine-tune a pruned model", ckpt=True).add_argument("--eval-every", type=int, default=0)
    add("eval", "evaluate a checkpoint", ckpt=True)
    s = add("report", "summarise a run directory")
    s.add_argument("run_dir", nargs="?")
    s = add("ablate", "retain-fraction sweep, strategy comparison and class-count study")
    s.add_argument("--studies", help="comma list of k-sweep,strategy,classes")
    return p


def _exit_code(e: BaseException) -> int:
    if isinstance(e, (ConfigError, PlanError)):
        return EXIT_CONFIG
    if isinstance(e, (DataError, ShapeError)):
        return EXIT_DATA
    if isinstance(e, NumericError):
        return EXIT_NUMERIC
    if isinstance(e, (OSError, CheckpointError)):
        return EXIT_IO
    return EXIT_ERROR


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.command == "report":
            run_dir = Path(args.run_dir or args.out or "")
            if not args.config:
                steps = _manifest_steps(run_dir)
                cfg = ExperimentConfig.from_text(steps["train"]["config"])
            else:
                cfg = ExperimentConfig.load(args.config, args.set)
        else:
            cfg = ExperimentConfig.load(args.config, args.set)
            run_dir = Path(args.out or cfg.out_dir)
        run = Run(run_dir, args.command, cfg, cfg.seed)
        COMMANDS[args.command](args, cfg, run)
        run.commit()
    except (FGPError, OSError, ValueError) as e:
        print(f"fgprune {args.command}: error: {e}", file=sys.stderr)
        return _exit_code(e)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
