"""Accuracy, mIoU, MAC/parameter accounting and the pruning report."""
from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import Dataset
from .layers import LEARNABLE, expected_state_shapes
from .models import Model, ModelSpec, predict


def accuracy(model: Model, ds: Dataset, batch_size: int = 256) -> float:
    if len(ds) == 0:
        return float("nan")
    pred = predict(model, ds.images.astype(model.dtype, copy=False), batch_size).argmax(axis=1)
    return float((pred == ds.labels).mean())


def confusion(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> np.ndarray:
    idx = truth.astype(np.int64).ravel() * num_classes + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def miou_from_confusion(cm: np.ndarray) -> float:
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    present = union > 0
    if not present.any():
        return float("nan")
    return float((inter[present] / union[present]).mean())


def miou_masks(pred: np.ndarray, truth: np.ndarray, num_classes: int) -> float:
    """Mean IoU; classes absent from both prediction and truth are skipped."""
    return miou_from_confusion(confusion(pred, truth, num_classes))


def miou(model: Model, ds: Dataset, batch_size: int = 64) -> float:
    cm = np.zeros((ds.num_classes, ds.num_classes), dtype=np.int64)
    x = ds.images.astype(model.dtype, copy=False)
    for s in range(0, len(ds), batch_size):
        pred = predict(model, x[s : s + batch_size], batch_size).argmax(axis=1)
        cm += confusion(pred, ds.labels[s : s + batch_size], ds.num_classes)
    return miou_from_confusion(cm)


def evaluate(model: Model, ds: Dataset) -> float:
    return accuracy(model, ds) if model.spec.task == "classification" else miou(model, ds)


def metric_name(spec: ModelSpec) -> str:
    return "accuracy" if spec.task == "classification" else "miou"


def layer_macs(spec: ModelSpec) -> list:
    """Multiply-accumulates per layer: conv Kh*Kw*InC*OutC*Hout*Wout,
    linear In*Out, everything else 0."""
    shapes = spec.shapes()
    macs = []
    for l, out in zip(spec.layers, shapes):
        if l.kind == "conv2d":
            macs.append(l.kernel * l.kernel * l.in_ch * l.out_ch * out[1] * out[2])
        elif l.kind == "linear":
            macs.append(l.in_ch * l.out_ch)
        else:
            macs.append(0)
    return macs


def count_flops(spec: ModelSpec) -> int:
    """FLOPs reported as multiply-accumulate count (MAC convention)."""
    return int(sum(layer_macs(spec)))


def count_params(spec: ModelSpec) -> int:
    """Learnable scalars only: conv/linear weights and biases, BN gain and shift."""
    total = 0
    for l in spec.layers:
        shapes = expected_state_shapes(l)
        for name in LEARNABLE.get(l.kind, ()):
            if name in shapes:
                total += int(np.prod(shapes[name]))
    return total


def _pct(after, before) -> float:
    return 100.0 * after / before if before else float("nan")


@dataclass
class PruneReport:
    flops_before: int
    flops_after: int
    params_before: int
    params_after: int
    metric: str
    metric_before: float
    metric_pruned: float
    metric_after: float
    flops_retained_pct: float = 0.0
    flops_reduction_pct: float = 0.0
    params_retained_pct: float = 0.0
    params_reduction_pct: float = 0.0
    plan: list = field(default_factory=list)  # [layer, channels, kept]
    seeds: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0
    flops_convention: str = "MAC"
    extra: dict = field(default_factory=dict)

    @classmethod
    def build(cls, before: ModelSpec, after: ModelSpec, metric_before, metric_pruned, metric_after,
              plan=None, seeds=None, wall_clock_s=0.0, extra=None) -> "PruneReport":
        fb, fa = count_flops(before), count_flops(after)
        pb, pa = count_params(before), count_params(after)
        rows = []
        if plan is not None:
            rows = [[j, plan[j].channels, len(plan[j].retained)] for j in plan]
        return cls(fb, fa, pb, pa, metric_name(before), float(metric_before), float(metric_pruned),
                   float(metric_after), _pct(fa, fb), 100.0 - _pct(fa, fb), _pct(pa, pb), 100.0 - _pct(pa, pb),
                   rows, dict(seeds or {}), float(wall_clock_s), "MAC", dict(extra or {}))

    def check(self) -> None:
        """Recompute the percentage fields from the absolute counts."""
        want = {
            "flops_retained_pct": _pct(self.flops_after, self.flops_before),
            "params_retained_pct": _pct(self.params_after, self.params_before),
        }
        want["flops_reduction_pct"] = 100.0 - want["flops_retained_pct"]
        want["params_reduction_pct"] = 100.0 - want["params_retained_pct"]
        for k, v in want.items():
            if not np.isclose(getattr(self, k), v, rtol=0, atol=1e-9):
                raise ValueError(f"{k} = {getattr(self, k)} but recomputes to {v}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "PruneReport":
        return cls(**json.loads(text))

    def to_text(self) -> str:
        m = self.metric
        rows = [
            ("FLOPs (MAC)", f"{self.flops_before:,}", f"{self.flops_after:,}",
             f"{self.flops_retained_pct:.2f}% kept / {self.flops_reduction_pct:.2f}% removed"),
            ("Parameters", f"{self.params_before:,}", f"{self.params_after:,}",
             f"{self.params_retained_pct:.2f}% kept / {self.params_reduction_pct:.2f}% removed"),
            (f"{m} (pruned, no finetune)", f"{self.metric_before:.4f}", f"{self.metric_pruned:.4f}", ""),
            (f"{m} (finetuned)", f"{self.metric_before:.4f}", f"{self.metric_after:.4f}",
             f"delta {self.metric_after - self.metric_before:+.4f}"),
        ]
        w0 = max(len(r[0]) for r in rows)
        w1 = max(len(r[1]) for r in rows + [("", "before")])
        w2 = max(len(r[2]) for r in rows + [("", "", "after")])
        lines = [f"{'':<{w0}}  {'before':>{w1}}  {'after':>{w2}}"]
        lines += [f"{a:<{w0}}  {b:>{w1}}  {c:>{w2}}  {d}".rstrip() for a, b, c, d in rows]
        if self.plan:
            lines.append("")
            lines.append("layer  channels  kept")
            lines += [f"{j:>5}  {c:>8}  {k:>4}" for j, c, k in self.plan]
        if self.seeds:
            lines.append("")
            lines.append("seeds: " + ", ".join(f"{k}={v}" for k, v in sorted(self.seeds.items())))
        lines.append(f"wall clock: {self.wall_clock_s:.1f} s")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        out = io.StringIO()
        fields = ["flops_before", "flops_after", "flops_retained_pct", "flops_reduction_pct",
                  "params_before", "params_after", "params_retained_pct", "params_reduction_pct",
                  "metric", "metric_before", "metric_pruned", "metric_after", "wall_clock_s", "flops_convention"]
        out.write(",".join(fields) + "\n")
        out.write(",".join(str(getattr(self, f)) for f in fields) + "\n")
        return out.getvalue()
