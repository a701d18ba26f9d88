"""Rebuilding a smaller network from a retention plan.

Pruning a conv removes output channels from it, from the BatchNorm that
follows and from the input axis of whatever consumes it next (conv or
linear head). Layers joined by an add-skip must keep identical channel sets;
the architectures only mark convs whose outputs never reach an add-skip as
prunable, so a mismatch here means the model spec itself is wrong.
"""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import PlanError
from .models import Model, ModelSpec, ModelState, forward
from .select import RetentionPlan


@dataclass
class DependencyMap:
    """Index sets into the original model: ``out_keep[i]`` for layer i's
    output channels (or features), ``in_keep[i]`` for its input."""

    out_keep: list
    in_keep: list

    def is_identity(self, spec: ModelSpec) -> bool:
        shapes = spec.shapes()
        return all(len(k) == s[0] for k, s in zip(self.out_keep, shapes))


def propagate(plan: RetentionPlan, spec: ModelSpec) -> DependencyMap:
    keep = plan.keep_sets()
    unknown = sorted(set(keep) - set(spec.prunable))
    if unknown:
        raise PlanError(f"plan references non-prunable or unknown layers {unknown}")
    missing = sorted(set(spec.prunable) - set(keep))
    if missing:
        raise PlanError(f"plan does not cover prunable layers {missing}")
    shapes = spec.shapes()
    cur = np.arange(spec.input_shape[0])
    out_keep, in_keep = [], []
    for i, l in enumerate(spec.layers):
        in_keep.append(cur)
        if l.kind == "conv2d":
            if i in keep:
                k = np.unique(np.asarray(keep[i], dtype=np.int64))
                if k.size == 0:
                    raise PlanError(f"layer {i}: empty keep set")
                if k.min() < 0 or k.max() >= l.out_ch:
                    raise PlanError(f"layer {i}: keep index out of range [0, {l.out_ch})")
                cur = k
            else:
                cur = np.arange(l.out_ch)
        elif l.kind == "flatten":
            c, h, w = (shapes[i - 1] if i else spec.input_shape)
            hw = h * w
            cur = (cur[:, None] * hw + np.arange(hw)[None, :]).ravel()
        elif l.kind == "linear":
            cur = np.arange(l.out_ch)
        elif l.kind == "add-skip":
            if not np.array_equal(cur, out_keep[l.src]):
                raise PlanError(f"add-skip {i}: inputs keep different channel sets")
        out_keep.append(cur)
    return DependencyMap(out_keep, in_keep)


def rebuild(model: Model, dep: DependencyMap) -> Model:
    """Sliced copy of ``model``; every kept value is copied bit-for-bit."""
    spec = model.spec
    layers, states = [], []
    for i, (l, st) in enumerate(zip(spec.layers, model.state.layers)):
        ik, ok = dep.in_keep[i], dep.out_keep[i]
        if l.kind == "conv2d":
            w = st["weight"][ok][:, ik]
            new = {"weight": np.ascontiguousarray(w)}
            if "bias" in st:
                new["bias"] = st["bias"][ok].copy()
            layers.append(replace(l, in_ch=len(ik), out_ch=len(ok)))
        elif l.kind == "batchnorm2d":
            new = {k: v[ok].copy() for k, v in st.items()}
            layers.append(replace(l, in_ch=len(ok), out_ch=len(ok)))
        elif l.kind == "linear":
            new = {"weight": np.ascontiguousarray(st["weight"][:, ik])}
            if "bias" in st:
                new["bias"] = st["bias"].copy()
            layers.append(replace(l, in_ch=len(ik)))
        else:
            new = {}
            layers.append(l)
        states.append(new)
    return Model(spec.with_layers(layers), ModelState(states))


def prune(model: Model, plan: RetentionPlan) -> Model:
    return rebuild(model, propagate(plan, model.spec))


def mask_forward(model: Model, x, removal: dict) -> np.ndarray:
    """Eval-mode forward with the listed channels of each conv zeroed at its
    post-activation output. ``removal`` maps conv id -> removed indices."""
    masks = {}
    for j, removed in removal.items():
        l = model.spec.layers[j]
        if l.kind != "conv2d":
            raise PlanError(f"layer {j} is not a conv layer")
        m = np.ones(l.out_ch, dtype=model.dtype)
        m[list(removed)] = 0
        masks[model.spec.activation_point(j)] = m
    out, _ = forward(model, x, masks=masks)
    return out.data
