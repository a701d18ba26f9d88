"""Class activation maps and per-channel, per-class heatmaps.

For a conv layer ``j`` every function here reads the post-activation output of
its conv-BN-ReLU chain (``ModelSpec.activation_point``). The class score is
the pre-softmax logit of class ``d`` for classification, or the sum of the
class-``d`` logit map over a pixel set for segmentation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .errors import ShapeError
from .models import Model, forward
from .tensor import backward, second_grad_sum


@dataclass
class CamWeights:
    layer: int
    cls: int
    kind: str
    weights: np.ndarray  # (C,)
    area: int  # spatial size of the feature map


@dataclass
class ClassActivationMap:
    layer: int
    cls: int
    map: np.ndarray  # (H, W), non-negative
    weights: CamWeights


@dataclass
class ChannelHeatmap:
    layer: int
    channel: int
    cls: int
    map: np.ndarray  # (H, W), non-negative


@dataclass
class LayerHeatmaps:
    """All channel heatmaps of one layer for one class and one sample.

    ``contributions[c] = G[c] * F[c]`` is the pre-ReLU channel term,
    ``maps[c]`` the emitted heatmap and ``layer_map`` the summed audit map
    ``ReLU(sum_c contributions[c])``.
    """

    layer: int
    cls: int
    weights: np.ndarray  # (C,) spatially averaged gradients
    features: np.ndarray  # (C, H, W)
    contributions: np.ndarray  # (C, H, W)
    maps: np.ndarray  # (C, H, W)
    layer_map: np.ndarray  # (H, W)

    def __len__(self):
        return len(self.maps)

    def __getitem__(self, c) -> ChannelHeatmap:
        return ChannelHeatmap(self.layer, int(c), self.cls, self.maps[c])

    def __iter__(self):
        return (self[c] for c in range(len(self)))


def _batch1(model: Model, x) -> np.ndarray:
    x = np.asarray(x, dtype=model.dtype)
    if x.shape == model.spec.input_shape:
        x = x[None]
    if x.shape[0] != 1 or x.shape[1:] != model.spec.input_shape:
        raise ShapeError(f"expected one sample of shape {model.spec.input_shape}, got {x.shape}")
    return x


def _check_model(model: Model, d: int, layers) -> list:
    if model is None or model.state is None or not model.state.layers:
        raise ValueError("model has no weights")
    model.state.check(model.spec)
    if not 0 <= int(d) < model.spec.num_classes:
        raise ValueError(f"class {d} out of range [0, {model.spec.num_classes})")
    pts = []
    for j in layers:
        if not 0 <= j < len(model.spec.layers) or model.spec.layers[j].kind != "conv2d":
            raise ValueError(f"layer {j} is not a conv layer")
        pts.append(model.spec.activation_point(j))
    return pts


def score_weights(model: Model, out_shape: tuple, d: int, pixels=None) -> np.ndarray:
    """Constant weights selecting the class-``d`` score from a batch-1 output."""
    w = np.zeros(out_shape, dtype=model.dtype)
    if model.spec.task == "classification":
        w[0, d] = 1
    else:
        if pixels is None:
            w[0, d] = 1
        else:
            pixels = np.asarray(pixels, dtype=bool)
            if not pixels.any():
                raise ValueError("segmentation pixel set is empty")
            w[0, d][pixels] = 1
    return w


def _class_gradients(model, x, d, points, pixels=None):
    out, caps = forward(model, x, points)
    seed = F.weighted_sum(out, score_weights(model, out.shape, d, pixels))
    backward(seed, caps)
    return {c.layer: (c.activation.data[0], c.gradient[0]) for c in caps}, out, seed, caps


def grad_cam(model: Model, x, d: int, layer: int, pixels=None) -> ClassActivationMap:
    """``ReLU(sum_k alpha_k A^k)`` with ``alpha_k`` the spatial mean of
    d(score)/dA^k."""
    (pt,) = _check_model(model, d, [layer])
    grads, *_ = _class_gradients(model, _batch1(model, x), d, [pt], pixels)
    a, g = grads[pt]
    area = a.shape[1] * a.shape[2]
    alpha = g.sum(axis=(1, 2)) / area
    cam = np.maximum(np.tensordot(alpha, a, axes=1), 0)
    return ClassActivationMap(layer, d, cam, CamWeights(layer, d, "grad-cam", alpha, area))


def grad_campp(model: Model, x, d: int, layer: int, pixels=None, step: float = 1e-3) -> CamWeights:
    """Per-channel sum of elementwise second derivatives of the class score.

    This is the bare higher-order term ``sum_ij d2 y / dA_ij^2`` (no
    normalisation, no gradient powers); it is exactly zero through
    piecewise-linear (ReLU) paths away from kinks. Computed in 64-bit by
    forward differences of first gradients.
    """
    (pt,) = _check_model(model, d, [layer])
    m64 = model.astype(np.float64)
    x64 = _batch1(m64, x)
    out, caps = forward(m64, x64, [pt])
    seed = F.weighted_sum(out, score_weights(m64, out.shape, d, pixels))
    act = caps[0].activation
    h2 = second_grad_sum(act.tape, seed, act, step)[0]
    return CamWeights(layer, d, "grad-cam++", h2.sum(axis=(1, 2)), h2.shape[1] * h2.shape[2])


def score_cam(model: Model, x, d: int, layer: int, pixels=None):
    """Channel-isolation Score-CAM.

    ``S_k`` is the class score when layer ``j``'s output keeps only channel
    ``k``; ``beta = softmax(S)`` and the map is ``sum_k beta_k A^k``.
    Returns ``(CamWeights, ClassActivationMap)``.
    """
    (pt,) = _check_model(model, d, [layer])
    x = _batch1(model, x)
    _, caps = forward(model, x, [pt])
    a = caps[0].activation.data  # (1, C, H, W)
    c = a.shape[1]
    iso = np.zeros((c,) + a.shape[1:], dtype=a.dtype)
    iso[np.arange(c), np.arange(c)] = a[0]
    out, _ = forward(model, np.repeat(x, c, axis=0), overrides={pt: iso})
    w = score_weights(model, (1,) + out.shape[1:], d, pixels)[0]
    scores = (out.data.astype(np.float64) * w).reshape(c, -1).sum(axis=1)
    z = np.exp(scores - scores.max())
    beta = z / z.sum()
    cam = np.tensordot(beta, a[0].astype(np.float64), axes=1)
    weights = CamWeights(layer, d, "score-cam", beta, a.shape[2] * a.shape[3])
    return weights, ClassActivationMap(layer, d, cam, weights)


def channel_heatmaps(model: Model, x, d: int, layers, gt_mask=None, per_channel_relu: bool = True):
    """Per-channel heatmaps ``M_c = ReLU(G_c * F_c)`` with ``G_c`` the spatial
    mean of d(score)/dF_c.

    ``layers`` may be one conv id (returns :class:`LayerHeatmaps`) or several
    (returns ``{layer: LayerHeatmaps}``); all are served by one backward pass.
    For segmentation the score sums the class-``d`` logits over the pixels of
    ``gt_mask == d``; if class ``d`` is absent from ``gt_mask`` the sample
    has nothing to say about it and ``None`` is returned. Without a mask all
    pixels are used. ``per_channel_relu=False`` emits the raw contributions.
    """
    single = np.isscalar(layers)
    layers = [int(layers)] if single else [int(j) for j in layers]
    pts = _check_model(model, d, layers)
    pixels = None
    if model.spec.task == "segmentation" and gt_mask is not None:
        pixels = np.asarray(gt_mask) == d
        if not pixels.any():
            return None
    grads, *_ = _class_gradients(model, _batch1(model, x), d, pts, pixels)
    res = {}
    for j, pt in zip(layers, pts):
        f, g = grads[pt]
        gw = g.mean(axis=(1, 2))
        contrib = gw[:, None, None] * f
        maps = np.maximum(contrib, 0) if per_channel_relu else contrib
        res[j] = LayerHeatmaps(j, d, gw, f, contrib, maps, np.maximum(contrib.sum(axis=0), 0))
    return res[layers[0]] if single else res


# -- export ------------------------------------------------------------------------


def to_pgm(m: np.ndarray) -> bytes:
    """Binary 8-bit PGM after min-max scaling (for viewing only)."""
    m = np.asarray(m, dtype=np.float64)
    lo, hi = m.min(), m.max()
    scaled = np.zeros(m.shape) if hi <= lo else (m - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    h, w = pix.shape
    return f"P5\n{w} {h}\n255\n".encode() + pix.tobytes()


def to_csv(m: np.ndarray) -> str:
    """Unscaled values, one row per map row, round-trippable reprs."""
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in np.asarray(m))
