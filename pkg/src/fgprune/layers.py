"""Layer descriptions, parameter initialisation and per-layer application."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import functional as F
from .errors import ShapeError

KINDS = (
    "conv2d",
    "batchnorm2d",
    "relu",
    "maxpool",
    "avgpool",
    "global-avg-pool",
    "linear",
    "upsample-nearest",
    "add-skip",
    "flatten",
)

# layers that pass the channel axis through untouched
CHANNEL_PRESERVING = ("batchnorm2d", "relu", "maxpool", "avgpool", "upsample-nearest")

LEARNABLE = {
    "conv2d": ("weight", "bias"),
    "batchnorm2d": ("gamma", "beta"),
    "linear": ("weight", "bias"),
}


@dataclass(frozen=True)
class LayerSpec:
    """One layer. Unused hyperparameters keep their defaults.

    ``in_ch``/``out_ch`` are channel counts for conv/bn and feature counts for
    linear. ``src`` is the id of the layer whose output an add-skip adds.
    """

    kind: str
    in_ch: int = 0
    out_ch: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    bias: bool = False
    scale: int = 0
    src: int = -1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        default = LayerSpec(self.kind)
        return {k: v for k, v in d.items() if k == "kind" or v != getattr(default, k)}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def conv(in_ch, out_ch, kernel=3, stride=1, padding=None, bias=False) -> LayerSpec:
    pad = kernel // 2 if padding is None else padding
    return LayerSpec("conv2d", in_ch=in_ch, out_ch=out_ch, kernel=kernel, stride=stride,
                     padding=pad, bias=bias)


def bn(ch) -> LayerSpec:
    return LayerSpec("batchnorm2d", in_ch=ch, out_ch=ch)


def pool(kernel=2, kind="maxpool") -> LayerSpec:
    return LayerSpec(kind, kernel=kernel, stride=kernel)


def output_shape(spec: LayerSpec, in_shape: tuple, skip_shape: tuple | None = None) -> tuple:
    """Per-sample output shape of ``spec`` given its per-sample input shape."""
    k = spec.kind
    if k == "conv2d":
        c, h, w = _chw(spec, in_shape)
        if c != spec.in_ch:
            raise ShapeError(f"conv2d expects {spec.in_ch} channels, got {c}")
        ho = (h + 2 * spec.padding - spec.kernel) // spec.stride + 1
        wo = (w + 2 * spec.padding - spec.kernel) // spec.stride + 1
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"conv2d output extent non-positive for input {in_shape}")
        return (spec.out_ch, ho, wo)
    if k == "batchnorm2d":
        c, h, w = _chw(spec, in_shape)
        if c != spec.in_ch:
            raise ShapeError(f"batchnorm2d expects {spec.in_ch} channels, got {c}")
        return in_shape
    if k == "relu":
        return in_shape
    if k in ("maxpool", "avgpool"):
        c, h, w = _chw(spec, in_shape)
        s = spec.stride
        ho, wo = (h - spec.kernel) // s + 1, (w - spec.kernel) // s + 1
        if ho <= 0 or wo <= 0:
            raise ShapeError(f"{k} does not fit input {in_shape}")
        return (c, ho, wo)
    if k == "global-avg-pool":
        return (_chw(spec, in_shape)[0],)
    if k == "flatten":
        return (int(np.prod(in_shape)),)
    if k == "linear":
        if len(in_shape) != 1 or in_shape[0] != spec.in_ch:
            raise ShapeError(f"linear expects ({spec.in_ch},), got {in_shape}")
        return (spec.out_ch,)
    if k == "upsample-nearest":
        c, h, w = _chw(spec, in_shape)
        return (c, h * spec.scale, w * spec.scale)
    if k == "add-skip":
        if skip_shape != in_shape:
            raise ShapeError(f"add-skip joins {in_shape} and {skip_shape}")
        return in_shape
    raise AssertionError(k)


def _chw(spec, shape):
    if len(shape) != 3:
        raise ShapeError(f"{spec.kind} needs a (C, H, W) input, got {shape}")
    return shape


def init_state(spec: LayerSpec, rng: np.random.Generator, dtype=np.float32) -> dict:
    """Kaiming-normal conv/linear weights, unit BN gain, zero shifts."""
    k = spec.kind
    if k == "conv2d":
        fan_out = spec.out_ch * spec.kernel * spec.kernel
        shape = (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel)
        st = {"weight": (rng.standard_normal(shape) * np.sqrt(2.0 / fan_out)).astype(dtype)}
        if spec.bias:
            st["bias"] = np.zeros(spec.out_ch, dtype=dtype)
        return st
    if k == "batchnorm2d":
        c = spec.out_ch
        return {
            "gamma": np.ones(c, dtype=dtype),
            "beta": np.zeros(c, dtype=dtype),
            "running_mean": np.zeros(c, dtype=dtype),
            "running_var": np.ones(c, dtype=dtype),
        }
    if k == "linear":
        bound = 1.0 / np.sqrt(spec.in_ch)
        st = {"weight": rng.uniform(-bound, bound, (spec.out_ch, spec.in_ch)).astype(dtype)}
        if spec.bias:
            st["bias"] = rng.uniform(-bound, bound, spec.out_ch).astype(dtype)
        return st
    return {}


def expected_state_shapes(spec: LayerSpec) -> dict:
    k = spec.kind
    if k == "conv2d":
        d = {"weight": (spec.out_ch, spec.in_ch, spec.kernel, spec.kernel)}
        if spec.bias:
            d["bias"] = (spec.out_ch,)
        return d
    if k == "batchnorm2d":
        return {n: (spec.out_ch,) for n in ("gamma", "beta", "running_mean", "running_var")}
    if k == "linear":
        d = {"weight": (spec.out_ch, spec.in_ch)}
        if spec.bias:
            d["bias"] = (spec.out_ch,)
        return d
    return {}


def apply_layer(spec: LayerSpec, state: dict, x, params: dict, *, train=False, skip=None,
                momentum: float = F.BN_MOMENTUM):
    """Apply one layer. ``params`` maps learnable names to Tensors (tracked or
    not); running statistics are read from and written to ``state``."""
    k = spec.kind
    if k == "conv2d":
        return F.conv2d(x, params["weight"], params.get("bias"), spec.stride, spec.padding)
    if k == "batchnorm2d":
        if not train:
            return F.batchnorm2d(x, params["gamma"], params["beta"], state["running_mean"],
                                 state["running_var"], train=False)
        stats: dict = {}
        out = F.batchnorm2d(x, params["gamma"], params["beta"], None, None, train=True, stats=stats)
        rm, rv = state["running_mean"], state["running_var"]
        rm *= 1.0 - momentum
        rm += momentum * stats["mean"].astype(rm.dtype)
        rv *= 1.0 - momentum
        rv += momentum * stats["var"].astype(rv.dtype)
        return out
    if k == "relu":
        return F.relu(x)
    if k == "maxpool":
        return F.maxpool2d(x, spec.kernel, spec.stride)
    if k == "avgpool":
        return F.avgpool2d(x, spec.kernel, spec.stride)
    if k == "global-avg-pool":
        return F.global_avg_pool(x)
    if k == "flatten":
        return F.flatten(x)
    if k == "linear":
        return F.linear(x, params["weight"], params.get("bias"))
    if k == "upsample-nearest":
        return F.upsample_nearest(x, spec.scale)
    if k == "add-skip":
        return F.add(x, skip)
    raise AssertionError(k)
