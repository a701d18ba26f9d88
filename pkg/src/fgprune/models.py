"""Model descriptions, weights, the forward executor and concrete architectures."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .layers import (
    LEARNABLE,
    LayerSpec,
    apply_layer,
    bn,
    conv,
    expected_state_shapes,
    init_state,
    output_shape,
    pool,
)
from .rng import stream
from .tensor import CaptureHandle, Tape, Tensor, resolve_dtype


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple
    input_shape: tuple
    num_classes: int
    task: str = "classification"
    prunable: tuple = ()
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        object.__setattr__(self, "prunable", tuple(int(v) for v in self.prunable))
        if self.task not in ("classification", "segmentation"):
            raise ValueError(f"unknown task {self.task!r}")
        self.validate()

    def validate(self) -> None:
        for j in self.prunable:
            if not 0 <= j < len(self.layers) or self.layers[j].kind != "conv2d":
                raise ShapeError(f"prunable layer {j} is not a conv layer")
        for i, l in enumerate(self.layers):
            if l.kind == "add-skip" and not 0 <= l.src < i:
                raise ShapeError(f"add-skip {i} references layer {l.src} that does not precede it")
        shapes = self.shapes()
        out = shapes[-1] if shapes else self.input_shape
        want = (self.num_classes,) if self.task == "classification" else \
            (self.num_classes,) + tuple(self.input_shape[1:])
        if tuple(out) != want:
            raise ShapeError(f"model output {tuple(out)} does not match expected {want}")

    def shapes(self) -> list:
        """Per-sample output shape of every layer."""
        shapes = []
        cur = self.input_shape
        for l in self.layers:
            skip = shapes[l.src] if l.kind == "add-skip" else None
            cur = output_shape(l, cur, skip)
            shapes.append(cur)
        return shapes

    def input_shapes(self) -> list:
        return [self.input_shape] + self.shapes()[:-1]

    @property
    def conv_layers(self) -> list:
        return [i for i, l in enumerate(self.layers) if l.kind == "conv2d"]

    def activation_point(self, j: int) -> int:
        """Last layer of the conv -> [bn] -> [relu] chain started by conv ``j``.

        Captures, heatmaps and channel masks for a conv layer all act on this
        post-activation output.
        """
        if self.layers[j].kind != "conv2d":
            raise ShapeError(f"layer {j} is not a conv layer")
        end = j
        for kind in ("batchnorm2d", "relu"):
            if end + 1 < len(self.layers) and self.layers[end + 1].kind == kind:
                end += 1
        return end

    def with_layers(self, layers) -> "ModelSpec":
        return ModelSpec(tuple(layers), self.input_shape, self.num_classes, self.task,
                         self.prunable, self.name)

    def to_json(self) -> str:
        return json.dumps({
            "name": self.name,
            "task": self.task,
            "input_shape": list(self.input_shape),
            "num_classes": self.num_classes,
            "prunable": list(self.prunable),
            "layers": [l.to_dict() for l in self.layers],
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelSpec":
        d = json.loads(text)
        return cls(
            layers=tuple(LayerSpec.from_dict(l) for l in d["layers"]),
            input_shape=tuple(d["input_shape"]),
            num_classes=int(d["num_classes"]),
            task=d["task"],
            prunable=tuple(d["prunable"]),
            name=d.get("name", ""),
        )


@dataclass
class ModelState:
    """Per-layer dicts of named arrays, aligned with ``ModelSpec.layers``."""

    layers: list = field(default_factory=list)

    def copy(self) -> "ModelState":
        return ModelState([{k: v.copy() for k, v in d.items()} for d in self.layers])

    def astype(self, dtype) -> "ModelState":
        dt = resolve_dtype(dtype)
        return ModelState([{k: v.astype(dt) for k, v in d.items()} for d in self.layers])

    @property
    def dtype(self):
        for d in self.layers:
            for v in d.values():
                return v.dtype
        return np.dtype(np.float32)

    def named_arrays(self):
        for i, d in enumerate(self.layers):
            for name in sorted(d):
                yield f"{i}.{name}", d[name]

    def learnable(self, spec: ModelSpec):
        """(layer id, name, array) for every trainable tensor."""
        for i, (l, d) in enumerate(zip(spec.layers, self.layers)):
            for name in LEARNABLE.get(l.kind, ()):
                if name in d:
                    yield i, name, d[name]

    def check(self, spec: ModelSpec) -> None:
        if len(self.layers) != len(spec.layers):
            raise ShapeError(f"state has {len(self.layers)} layers, spec has {len(spec.layers)}")
        for i, (l, d) in enumerate(zip(spec.layers, self.layers)):
            want = expected_state_shapes(l)
            got = {k: tuple(v.shape) for k, v in d.items()}
            if got != want:
                raise ShapeError(f"layer {i} ({l.kind}) state {got} does not match {want}")
            if l.kind == "batchnorm2d" and not (d["running_var"] > 0).all():
                raise ShapeError(f"layer {i} running variance must be positive")


@dataclass
class Model:
    spec: ModelSpec
    state: ModelState

    def __post_init__(self):
        self.state.check(self.spec)

    def copy(self) -> "Model":
        return Model(self.spec, self.state.copy())

    def astype(self, dtype) -> "Model":
        return Model(self.spec, self.state.astype(dtype))

    @property
    def dtype(self):
        return self.state.dtype


def init_model(spec: ModelSpec, seed: int = 0, precision="float32") -> Model:
    dt = resolve_dtype(precision)
    rng = stream(seed, "init")
    return Model(spec, ModelState([init_state(l, rng, dt) for l in spec.layers]))


def forward(model: Model, x, capture_layers=(), *, train: bool = False, params: dict | None = None,
            masks: dict | None = None, overrides: dict | None = None):
    """Run the network.

    ``params`` maps ``(layer, name)`` to Tensors (e.g. tape-watched weights);
    missing entries use the stored arrays untracked. ``masks`` maps a layer id
    to a length-C multiplier applied to that layer's output channels;
    ``overrides`` replaces a layer's output outright. Each captured layer's
    output is returned in a :class:`CaptureHandle`; if nothing upstream is
    tracked the capture becomes a fresh leaf of a new tape so gradients of
    downstream scalars can reach it.

    Returns ``(output, captures)``.
    """
    spec, state = model.spec, model.state
    capture_layers = sorted(set(int(c) for c in capture_layers))
    n_layers = len(spec.layers)
    for c in capture_layers:
        if not 0 <= c < n_layers:
            raise ShapeError(f"unknown layer id {c}")
    masks = masks or {}
    overrides = overrides or {}
    for c in list(masks) + list(overrides):
        if not 0 <= c < n_layers:
            raise ShapeError(f"unknown layer id {c}")

    dtype = model.dtype
    if isinstance(x, Tensor):
        if x.dtype != dtype:
            raise ShapeError(f"input dtype {x.dtype} differs from model dtype {dtype}")
        cur = x
    else:
        cur = Tensor(np.asarray(x, dtype=dtype))
    if tuple(cur.shape[1:]) != spec.input_shape:
        raise ShapeError(f"input shape {tuple(cur.shape[1:])} does not match {spec.input_shape}")

    params = params or {}
    tape = None
    for t in list(params.values()) + [cur]:
        if t.tape is not None:
            tape = t.tape
            break

    outputs = []
    captures = []
    for i, (l, st) in enumerate(zip(spec.layers, state.layers)):
        p = {name: params.get((i, name), Tensor(st[name])) for name in LEARNABLE.get(l.kind, ()) if name in st}
        skip = outputs[l.src] if l.kind == "add-skip" else None
        cur = apply_layer(l, st, cur, p, train=train, skip=skip)
        if i in overrides:
            val = np.asarray(overrides[i], dtype=dtype)
            if val.shape != cur.shape:
                raise ShapeError(f"override for layer {i} has shape {val.shape}, expected {cur.shape}")
            cur = Tensor(val)
        if i in masks:
            from .functional import mul

            m = np.asarray(masks[i], dtype=dtype)
            cur = mul(cur, m.reshape((1, -1) + (1,) * (cur.ndim - 2)))
        if i in capture_layers:
            if cur.tape is None:
                if tape is None:
                    tape = Tape()
                cur = tape.watch(cur.data)
            captures.append(CaptureHandle(i, cur))
        outputs.append(cur)
    return cur, captures


def predict(model: Model, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Eval-mode outputs for a stack of samples, no tape."""
    outs = []
    for s in range(0, len(x), batch_size):
        out, _ = forward(model, x[s : s + batch_size])
        outs.append(out.data)
    if not outs:
        return np.zeros((0,), dtype=model.dtype)
    return np.concatenate(outs, axis=0)


# -- architectures ------------------------------------------------------------------


def _conv_block(layers, in_ch, out_ch, prunable, mark=True):
    j = len(layers)
    layers += [conv(in_ch, out_ch), bn(out_ch), LayerSpec("relu")]
    if mark:
        prunable.append(j)
    return j


def build_vgg_lite(channels, input_shape=(1, 28, 28), num_classes=10) -> ModelSpec:
    """conv-BN-ReLU blocks, each followed by 2x2 max-pool while the map is at
    least 2 pixels wide, then global average pooling and a linear classifier."""
    channels = [int(c) for c in channels]
    if len(channels) < 2 or min(channels) < 1:
        raise ValueError(f"vgg-lite needs at least two positive channel counts, got {channels}")
    layers, prunable = [], []
    in_ch, size = input_shape[0], min(input_shape[1:])
    for c in channels:
        _conv_block(layers, in_ch, c, prunable)
        if size >= 2:
            layers.append(pool(2))
            size //= 2
        in_ch = c
    layers += [LayerSpec("global-avg-pool"), LayerSpec("linear", in_ch=in_ch, out_ch=num_classes, bias=True)]
    return ModelSpec(tuple(layers), input_shape, num_classes, "classification", tuple(prunable), "vgg-lite")


def build_resnet_lite(stages=(16, 32), blocks_per_stage=1, input_shape=(1, 28, 28), num_classes=10) -> ModelSpec:
    """Stem conv, then per stage: [max-pool + transition conv] and residual
    blocks ``conv-bn-relu-conv-bn (+skip) relu``. Only the first conv of each
    block is prunable; every other conv output is joined by an add-skip."""
    stages = [int(c) for c in stages]
    if not stages or min(stages) < 1 or blocks_per_stage < 1:
        raise ValueError(f"invalid resnet-lite stages {stages} / blocks {blocks_per_stage}")
    layers, prunable = [], []
    _conv_block(layers, input_shape[0], stages[0], prunable, mark=False)
    in_ch = stages[0]
    for s, c in enumerate(stages):
        if s > 0:
            layers.append(pool(2))
            _conv_block(layers, in_ch, c, prunable, mark=False)
        for _ in range(blocks_per_stage):
            src = len(layers) - 1
            _conv_block(layers, c, c, prunable)
            layers += [conv(c, c), bn(c), LayerSpec("add-skip", src=src), LayerSpec("relu")]
        in_ch = c
    layers += [LayerSpec("global-avg-pool"), LayerSpec("linear", in_ch=in_ch, out_ch=num_classes, bias=True)]
    return ModelSpec(tuple(layers), input_shape, num_classes, "classification", tuple(prunable), "resnet-lite")


def build_seg_lite(channels=(16, 32), input_shape=(1, 32, 32), num_classes=4) -> ModelSpec:
    """Encoder of conv-BN-ReLU + max-pool stages, decoder of nearest 2x
    upsampling + conv-BN-ReLU stages, and a 1x1 conv emitting class logits."""
    channels = [int(c) for c in channels]
    if not channels or min(channels) < 1:
        raise ValueError(f"seg-lite needs positive channel counts, got {channels}")
    h, w = input_shape[1:]
    if h % (2 ** len(channels)) or w % (2 ** len(channels)):
        raise ValueError(f"input {input_shape} not divisible by 2^{len(channels)}")
    layers, prunable = [], []
    in_ch = input_shape[0]
    for c in channels:
        _conv_block(layers, in_ch, c, prunable)
        layers.append(pool(2))
        in_ch = c
    for c in reversed(channels):
        layers.append(LayerSpec("upsample-nearest", scale=2))
        _conv_block(layers, in_ch, c, prunable)
        in_ch = c
    layers.append(conv(in_ch, num_classes, kernel=1, bias=True))
    return ModelSpec(tuple(layers), input_shape, num_classes, "segmentation", tuple(prunable), "seg-lite")


VGG16_CFG = (64, 64, "M", 128, 128, "M", 256, 256, 256, "M", 512, 512, 512, "M", 512, 512, 512, "M")


def build_vgg16_reference(num_classes=10, input_shape=(3, 32, 32)) -> ModelSpec:
    """13-conv CIFAR VGG-16 (conv-BN-ReLU, five max-pools, 512->classes head).

    Used for FLOPs accounting; never trained here.
    """
    layers, prunable = [], []
    in_ch = input_shape[0]
    for v in VGG16_CFG:
        if v == "M":
            layers.append(pool(2))
        else:
            _conv_block(layers, in_ch, v, prunable)
            in_ch = v
    layers += [LayerSpec("flatten"), LayerSpec("linear", in_ch=in_ch, out_ch=num_classes, bias=True)]
    return ModelSpec(tuple(layers), input_shape, num_classes, "classification", tuple(prunable), "vgg16")


def build(arch: str, channels=None, input_shape=(1, 28, 28), num_classes=10, **kw) -> ModelSpec:
    if arch == "vgg-lite":
        return build_vgg_lite(channels or (8, 16), input_shape, num_classes)
    if arch == "resnet-lite":
        return build_resnet_lite(channels or (16, 32), kw.get("blocks_per_stage", 1), input_shape, num_classes)
    if arch == "seg-lite":
        return build_seg_lite(channels or (16, 32), input_shape, num_classes)
    if arch == "vgg16":
        return build_vgg16_reference(num_classes, input_shape)
    raise ValueError(f"unknown architecture {arch!r}")
