"""Channel importance tables, ranking, Top-k retention and baseline selections.

All sums are correctly rounded (``math.fsum``), so a table does not depend on
sample order or on how samples were sharded before merging.
"""
from __future__ import annotations

import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .cam import channel_heatmaps
from .data import Dataset
from .errors import DataError, PlanError
from .models import Model
from .rng import stream

STRATEGIES = (
    "fgp",
    "peak-k",
    "peak-30-of-top-50-random",
    "bot-30-of-bottom-50-random",
    "random-30",
)


@dataclass
class ImportanceTable:
    """``matrix[c, d]`` is the mean heatmap mass of channel ``c`` over the
    samples attributed to class ``d``; ``totals[c]`` sums it over classes."""

    layer: int
    matrix: np.ndarray  # (C, D) float64
    totals: np.ndarray  # (C,)
    counts: np.ndarray  # (D,) samples per class

    @property
    def channels(self) -> int:
        return self.matrix.shape[0]

    def check(self) -> None:
        if (self.matrix < 0).any():
            raise ValueError(f"layer {self.layer}: negative importance")
        recomputed = np.array([math.fsum(row) for row in self.matrix.tolist()])
        if not np.array_equal(recomputed, self.totals):
            raise ValueError(f"layer {self.layer}: totals are not the row sums")


def pixel_sum(m: np.ndarray) -> float:
    return math.fsum(np.asarray(m, dtype=np.float64).ravel().tolist())


def accumulate_importance(model: Model, ds: Dataset, layers=None, per_class_cap: int | None = None,
                          per_channel_relu: bool = True) -> list:
    """Importance tables for ``layers`` (default: the model's prunable convs).

    Classification samples count towards their label; a segmentation sample
    counts towards every class present in its mask, with the class score
    restricted to that class's pixels. At most ``per_class_cap`` samples per
    class are used, taken in dataset order.
    """
    layers = list(model.spec.prunable if layers is None else layers)
    num_classes = model.spec.num_classes
    if ds.num_classes != num_classes:
        raise DataError(f"dataset has {ds.num_classes} classes, model {num_classes}")
    # sums[j][d][c] -> list of per-sample pixel sums
    sums = {j: [[[] for _ in range(model.spec.layers[j].out_ch)] for _ in range(num_classes)]
            for j in layers}
    counts = np.zeros(num_classes, dtype=np.int64)
    seg = model.spec.task == "segmentation"
    for i in range(len(ds)):
        x = ds.images[i]
        classes = np.unique(ds.labels[i]) if seg else [int(ds.labels[i])]
        for d in classes:
            d = int(d)
            if per_class_cap is not None and counts[d] >= per_class_cap:
                continue
            hm = channel_heatmaps(model, x, d, layers, ds.labels[i] if seg else None, per_channel_relu)
            if hm is None:
                continue
            counts[d] += 1
            for j in layers:
                maps = hm[j].maps
                for c in range(maps.shape[0]):
                    sums[j][d][c].append(pixel_sum(maps[c]))
    missing = [d for d in range(num_classes) if counts[d] == 0]
    if missing:
        raise DataError(f"no samples for classes {missing}")
    tables = []
    for j in layers:
        c_n = model.spec.layers[j].out_ch
        mat = np.empty((c_n, num_classes), dtype=np.float64)
        for d in range(num_classes):
            for c in range(c_n):
                mat[c, d] = math.fsum(sums[j][d][c]) / counts[d]
        totals = np.array([math.fsum(row) for row in mat.tolist()], dtype=np.float64)
        tables.append(ImportanceTable(j, mat, totals, counts.copy()))
    return tables


def tables_to_csv(tables) -> str:
    """Rows ``layer,channel,class_0..class_{D-1},total``; exact float reprs."""
    out = io.StringIO()
    d_n = tables[0].matrix.shape[1] if tables else 0
    out.write("layer,channel," + ",".join(f"class_{d}" for d in range(d_n)) + ",total\n")
    for t in tables:
        for c in range(t.channels):
            vals = [repr(float(v)) for v in t.matrix[c]] + [repr(float(t.totals[c]))]
            out.write(f"{t.layer},{c}," + ",".join(vals) + "\n")
    out.write("# counts," + ";".join(f"{t.layer}:" + " ".join(str(int(n)) for n in t.counts) for t in tables) + "\n")
    return out.getvalue()


def tables_from_csv(text: str) -> list:
    rows = {}
    counts = {}
    lines = text.strip().splitlines()
    for line in lines[1:]:
        if line.startswith("# counts,"):
            for part in line[len("# counts,"):].split(";"):
                if part:
                    j, nums = part.split(":")
                    counts[int(j)] = np.array([int(v) for v in nums.split()], dtype=np.int64)
            continue
        f = line.split(",")
        rows.setdefault(int(f[0]), []).append((int(f[1]), [float(v) for v in f[2:]]))
    tables = []
    for j, entries in rows.items():
        entries.sort()
        vals = np.array([v for _, v in entries], dtype=np.float64)
        d_n = vals.shape[1] - 1
        tables.append(ImportanceTable(j, vals[:, :-1].copy(), vals[:, -1].copy(),
                                      counts.get(j, np.ones(d_n, dtype=np.int64))))
    return tables


# -- ranking and selection ------------------------------------------------------------


def rank_channels(table) -> np.ndarray:
    """Channels by descending total importance, lower index first on ties."""
    totals = np.asarray(table.totals if isinstance(table, ImportanceTable) else table, dtype=np.float64)
    return np.lexsort((np.arange(len(totals)), -totals))


def retain_count(k: float, channels: int) -> int:
    """``ceil(k * C)`` evaluated in exact decimal arithmetic, at least 1."""
    if not 0 < k <= 1:
        raise PlanError(f"retain fraction must be in (0, 1], got {k}")
    return max(1, math.ceil(Fraction(repr(float(k))) * channels))


@dataclass
class RetentionEntry:
    layer: int
    channels: int
    k: float
    ranking: tuple
    retained: tuple
    strategy: str = "fgp"

    @property
    def removed(self) -> tuple:
        keep = set(self.retained)
        return tuple(c for c in range(self.channels) if c not in keep)

    def to_dict(self) -> dict:
        return {"layer": self.layer, "channels": self.channels, "k": self.k,
                "ranking": list(self.ranking), "retained": list(self.retained), "strategy": self.strategy}


@dataclass
class RetentionPlan:
    entries: dict = field(default_factory=dict)  # layer -> RetentionEntry
    mode: str = "per-layer"

    def __getitem__(self, layer) -> RetentionEntry:
        return self.entries[layer]

    def __iter__(self):
        return iter(sorted(self.entries))

    def keep_sets(self) -> dict:
        return {j: np.asarray(e.retained, dtype=np.int64) for j, e in self.entries.items()}

    def removal_sets(self) -> dict:
        return {j: e.removed for j, e in self.entries.items()}

    def to_json(self) -> str:
        return json.dumps({"mode": self.mode, "entries": [self.entries[j].to_dict() for j in self]}, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RetentionPlan":
        d = json.loads(text)
        entries = {}
        for e in d["entries"]:
            entries[int(e["layer"])] = RetentionEntry(int(e["layer"]), int(e["channels"]), float(e["k"]),
                                                      tuple(e["ranking"]), tuple(e["retained"]), e["strategy"])
        return cls(entries, d["mode"])


def select_topk(ranking, k: float, layer: int = -1) -> RetentionEntry:
    ranking = tuple(int(c) for c in ranking)
    n = retain_count(k, len(ranking))
    return RetentionEntry(layer, len(ranking), float(k), ranking, tuple(sorted(ranking[:n])), "fgp")


def baseline_select(strategy: str, ranking, seed: int, k: float = 0.3, layer: int = -1,
                    fraction: float = 0.3, pool: float = 0.5) -> RetentionEntry:
    """Reference selections for comparison with Top-k.

    ``peak-k``: the first ``ceil(k C)`` ranked channels.
    ``peak-30-of-top-50-random``: ``ceil(0.3 C)`` drawn from the top ``ceil(C/2)`` positions.
    ``bot-30-of-bottom-50-random``: ``ceil(0.3 C)`` drawn from the remaining bottom positions.
    ``random-30``: ``ceil(0.3 C)`` drawn from all channels.
    """
    ranking = tuple(int(c) for c in ranking)
    c_n = len(ranking)
    if strategy in ("peak-k", "fgp"):
        e = select_topk(ranking, k, layer)
        e.strategy = strategy
        return e
    rng = stream(seed, "select", max(layer, 0))
    n = retain_count(fraction, c_n)
    split = retain_count(pool, c_n)
    if strategy == "peak-30-of-top-50-random":
        candidates = ranking[:split]
    elif strategy == "bot-30-of-bottom-50-random":
        candidates = ranking[split:] or ranking[-1:]
    elif strategy == "random-30":
        candidates = ranking
    else:
        raise PlanError(f"unknown selection strategy {strategy!r}")
    n = min(n, len(candidates))
    picked = rng.choice(np.asarray(candidates), size=n, replace=False)
    return RetentionEntry(layer, c_n, float(fraction), ranking, tuple(sorted(int(c) for c in picked)), strategy)


def plan_from_tables(tables, k: float, strategy: str = "fgp", seed: int = 0, mode: str = "per-layer",
                     fraction: float = 0.3) -> RetentionPlan:
    """Retention plan over the tables' layers.

    ``mode="global"`` (FGP only) ranks every channel of every layer by its
    total importance divided by its layer's maximum and keeps the top
    ``ceil(k * total)`` network-wide, with at least one channel per layer.
    """
    if mode == "global":
        if strategy != "fgp":
            raise PlanError("global mode is only defined for the fgp strategy")
        return _global_plan(tables, k)
    if mode != "per-layer":
        raise PlanError(f"unknown selection mode {mode!r}")
    entries = {}
    for t in tables:
        ranking = rank_channels(t)
        if strategy == "fgp":
            entries[t.layer] = select_topk(ranking, k, t.layer)
        else:
            entries[t.layer] = baseline_select(strategy, ranking, seed, k, t.layer, fraction)
    return RetentionPlan(entries, "per-layer")


def _global_plan(tables, k):
    scored = []
    for t in tables:
        top = t.totals.max()
        norm = t.totals / top if top > 0 else np.zeros_like(t.totals)
        scored += [(-float(norm[c]), t.layer, c) for c in range(t.channels)]
    scored.sort()
    n = retain_count(k, len(scored))
    kept = {t.layer: [] for t in tables}
    for _, j, c in scored[:n]:
        kept[j].append(c)
    entries = {}
    for t in tables:
        ranking = tuple(int(c) for c in rank_channels(t))
        keep = kept[t.layer] or [ranking[0]]
        entries[t.layer] = RetentionEntry(t.layer, t.channels, float(k), ranking,
                                          tuple(sorted(int(c) for c in keep)), "fgp")
    return RetentionPlan(entries, "global")


def full_plan(spec) -> RetentionPlan:
    """Keep-everything plan over the prunable layers."""
    entries = {}
    for j in spec.prunable:
        c_n = spec.layers[j].out_ch
        entries[j] = RetentionEntry(j, c_n, 1.0, tuple(range(c_n)), tuple(range(c_n)), "keep-all")
    return RetentionPlan(entries)
