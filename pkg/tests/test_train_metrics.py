import json

import numpy as np
import pytest

from fgprune.data import Dataset, synth_shapes
from fgprune.errors import NumericError
from fgprune.layers import LayerSpec, bn, conv
from fgprune.metrics import (
    PruneReport,
    accuracy,
    confusion,
    count_flops,
    count_params,
    evaluate,
    layer_macs,
    miou,
    miou_masks,
)
from fgprune.models import ModelSpec, build_seg_lite, build_vgg16_reference, build_vgg_lite, init_model, predict
from fgprune.select import plan_from_tables, ImportanceTable
from fgprune.surgery import prune
from fgprune.train import SEGMENTATION_DEFAULTS, SGD, TrainConfig, finetune, train

from oracles import sliced_counts, vgg16_macs_by_hand


def quad_run(lr, momentum, steps):
    w = np.zeros(1)
    opt = SGD(lr, momentum)
    seq = []
    for _ in range(steps):
        opt.step({"w": w}, {"w": 2 * (w - 3)})
        seq.append(float(w[0]))
    return seq


def test_gd_closed_form():
    got = quad_run(0.1, 0.0, 30)
    want = [3 - 3 * 0.8 ** t for t in range(1, 31)]
    np.testing.assert_allclose(got, want, rtol=1e-12)


def test_heavy_ball_hand_iteration():
    np.testing.assert_allclose(quad_run(0.1, 0.9, 5), [0.6, 1.62, 2.814, 3.9258, 4.74126], rtol=1e-12)


def test_weight_decay_in_gradient():
    w = np.array([2.0])
    SGD(0.5, 0.0, 0.1).step({"w": w}, {"w": np.zeros(1)})
    assert w[0] == pytest.approx(2.0 - 0.5 * 0.1 * 2.0)


def small_task(n=32, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    x = rng.normal(0, 0.3, (n, 1, 8, 8)).astype(np.float32)
    x[y == 1, :, :4] += 1.0
    return Dataset(x, y, 2)


def small_model(seed=0):
    return init_model(build_vgg_lite((4, 4), input_shape=(1, 8, 8), num_classes=2), seed)


def learnable(m):
    return {(i, n): m.state.layers[i][n].copy() for i, n, _ in m.state.learnable(m.spec)}


def test_zero_lr_leaves_weights():
    m = small_model()
    out, _ = train(m, small_task(), TrainConfig(epochs=2, lr=0.0, milestones=(), batch_size=8))
    a, b = learnable(m), learnable(out)
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_zero_epoch_finetune_is_identity():
    m = small_model()
    out, curve = finetune(m, small_task(), TrainConfig(), epochs=0)
    assert curve == [] and out.spec == m.spec
    for (_, a), (_, b) in zip(m.state.named_arrays(), out.state.named_arrays()):
        assert np.array_equal(a, b)


def test_training_learns_and_is_deterministic():
    ds = small_task()
    cfg = TrainConfig(epochs=6, lr=0.05, batch_size=8, milestones=(4,), seed=3)
    a, curve = train(small_model(), ds, cfg)
    b, _ = train(small_model(), ds, cfg)
    for (_, x), (_, y) in zip(a.state.named_arrays(), b.state.named_arrays()):
        assert np.array_equal(x, y)
    assert curve[-1]["loss"] < curve[0]["loss"]
    assert [r["lr"] for r in curve] == [0.05] * 4 + [pytest.approx(0.005)] * 2
    assert accuracy(a, ds) > 0.9
    c, _ = train(small_model(), ds, TrainConfig(epochs=6, lr=0.05, batch_size=8, milestones=(4,), seed=4))
    assert not np.array_equal(a.state.layers[0]["weight"], c.state.layers[0]["weight"])


def test_finetune_keeps_shape_and_curve_metric():
    ds = small_task()
    m = small_model()
    t = ImportanceTable(0, np.ones((4, 1)), np.array([4.0, 3.0, 2.0, 1.0]), np.array([1]))
    t2 = ImportanceTable(4, np.ones((4, 1)), np.array([1.0, 2.0, 3.0, 4.0]), np.array([1]))
    p = prune(m, plan_from_tables([t, t2], 0.5))
    out, curve = finetune(p, ds, TrainConfig(batch_size=8), epochs=2, eval_ds=ds, eval_every=1)
    assert out.spec == p.spec and len(curve) == 2 and "metric" in curve[1]


def test_divergence_guard():
    ds = small_task()
    ds.images[3] = np.nan
    with pytest.raises(NumericError, match="epoch 0"):
        train(small_model(), ds, TrainConfig(epochs=1, batch_size=32, milestones=()))


def test_config_validation_and_schedule():
    with pytest.raises(ValueError):
        TrainConfig(milestones=(15, 10))
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, milestones=(10,))
    with pytest.raises(ValueError):
        TrainConfig(lr=-1)
    cfg = TrainConfig()
    assert [cfg.lr_at(e) for e in (0, 9, 10, 15)] == [0.05, 0.05, pytest.approx(0.005), pytest.approx(0.0005)]
    assert cfg.for_finetune(10).milestones == () and cfg.for_finetune(12).milestones == (10,)
    assert cfg.for_finetune(10, "scaled").milestones == (5, 7) and cfg.for_finetune(4, "scaled").milestones == (2, 3)
    assert cfg.for_finetune(1, "scaled").milestones == () and cfg.for_finetune(0).epochs == 0
    with pytest.raises(ValueError):
        cfg.for_finetune(10, "cosine")
    assert (SEGMENTATION_DEFAULTS.lr, SEGMENTATION_DEFAULTS.weight_decay, SEGMENTATION_DEFAULTS.batch_size) == (
        0.01, 1e-4, 16)


def test_miou_hand_case():
    truth = np.array([[0, 0, 1, 1], [0, 0, 1, 1], [2, 2, 2, 2], [2, 2, 2, 2]])
    pred = np.array([[0, 0, 0, 1], [0, 1, 1, 1], [2, 2, 2, 2], [2, 2, 0, 2]])
    # IoU: class 0 3/6, class 1 3/5, class 2 7/8
    want = (3 / 6 + 3 / 5 + 7 / 8) / 3
    assert miou_masks(pred, truth, 3) == pytest.approx(want, abs=1e-15)
    assert miou_masks(pred, truth, 4) == pytest.approx(want, abs=1e-15)  # class 3 absent from both
    assert miou_masks(truth, truth, 3) == 1.0
    assert miou_masks(np.ones((2, 2)), np.zeros((2, 2)), 2) == 0.0
    assert confusion(pred, truth, 3).sum() == 16


def test_model_metrics_agree_with_argmax():
    ds = small_task()
    m = small_model()
    want = float((predict(m, ds.images).argmax(axis=1) == ds.labels).mean())
    assert accuracy(m, ds) == want == evaluate(m, ds)
    seg = init_model(build_seg_lite((2, 2), input_shape=(1, 16, 16), num_classes=3), 0)
    sds = synth_shapes(0, 5, num_classes=3, h=16, w=16)
    pred = predict(seg, sds.images).argmax(axis=1)
    assert miou(seg, sds, batch_size=2) == pytest.approx(miou_masks(pred, sds.labels, 3), abs=1e-12)


def test_macs_of_1x1_conv():
    spec = ModelSpec((conv(1, 1, kernel=1, padding=0), LayerSpec("global-avg-pool"),
                      LayerSpec("linear", in_ch=1, out_ch=1, bias=True)), (1, 4, 4), 1)
    assert layer_macs(spec) == [16, 0, 1]
    assert count_params(spec) == 1 + 2


def test_vgg16_anchor_and_per_layer():
    spec = build_vgg16_reference()
    total, per_layer = vgg16_macs_by_hand()
    assert count_flops(spec) == total
    assert [m for m in layer_macs(spec) if m] == per_layer
    assert abs(total - 314.03e6) / 314.03e6 < 0.02


def test_params_skip_running_stats():
    spec = ModelSpec((conv(1, 3), bn(3), LayerSpec("relu"), LayerSpec("global-avg-pool"),
                      LayerSpec("linear", in_ch=3, out_ch=2, bias=True)), (1, 4, 4), 2)
    assert count_params(spec) == 27 + 6 + 8


def test_pruned_flops_closed_form():
    spec = build_vgg_lite((8, 16), input_shape=(1, 8, 8), num_classes=3)
    t0 = ImportanceTable(0, np.ones((8, 1)), np.arange(8.0), np.array([1]))
    t4 = ImportanceTable(4, np.ones((16, 1)), np.arange(16.0), np.array([1]))
    plan = plan_from_tables([t0, t4], 0.25)
    p = prune(init_model(spec), plan)
    # conv1 1->2 at 8x8, conv2 2->4 at 4x4, head 4->3
    assert count_flops(p.spec) == 9 * 1 * 2 * 64 + 9 * 2 * 4 * 16 + 4 * 3
    assert count_params(p.spec) == 9 * 2 + 4 + 9 * 2 * 4 + 8 + 4 * 3 + 3
    assert (count_flops(p.spec), count_params(p.spec)) == sliced_counts(spec, plan)


def make_report():
    spec = build_vgg_lite((8, 16), input_shape=(1, 8, 8), num_classes=3)
    t0 = ImportanceTable(0, np.ones((8, 1)), np.arange(8.0), np.array([1]))
    t4 = ImportanceTable(4, np.ones((16, 1)), np.arange(16.0), np.array([1]))
    plan = plan_from_tables([t0, t4], 0.5)
    after = prune(init_model(spec), plan).spec
    return PruneReport.build(spec, after, 0.9, 0.4, 0.88, plan, {"seed": 1}, 2.5)


def test_report_consistency_and_formats():
    r = make_report()
    r.check()
    assert r.flops_retained_pct + r.flops_reduction_pct == pytest.approx(100.0)
    assert r.plan == [[0, 8, 4], [4, 16, 8]]
    assert PruneReport.from_json(r.to_json()) == r
    json.loads(r.to_json())
    text = r.to_text()
    assert "FLOPs (MAC)" in text and "seed=1" in text and "delta -0.0200" in text
    lines = r.to_csv().splitlines()
    assert len(lines) == 2 and lines[0].split(",")[0] == "flops_before"
    assert dict(zip(lines[0].split(","), lines[1].split(",")))["flops_convention"] == "MAC"
    r.flops_retained_pct += 1.0
    with pytest.raises(ValueError, match="flops_retained_pct"):
        r.check()
