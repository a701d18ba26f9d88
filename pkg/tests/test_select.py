import math

import numpy as np
import pytest

from fgprune.data import Dataset, synth_shapes
from fgprune.errors import DataError, PlanError
from fgprune.models import build_seg_lite, build_vgg_lite, init_model
from fgprune.select import (
    ImportanceTable,
    RetentionPlan,
    accumulate_importance,
    baseline_select,
    full_plan,
    plan_from_tables,
    rank_channels,
    retain_count,
    select_topk,
    tables_from_csv,
    tables_to_csv,
)
from fgprune.cam import channel_heatmaps

from oracles import naive_importance


def tiny_classification(n=8, d=2, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 1, 8, 8))
    y = np.arange(n) % d
    return Dataset(x, y, d)


def tiny_model(d=2, seed=0):
    return init_model(build_vgg_lite((3, 4), input_shape=(1, 8, 8), num_classes=d), seed, "float64")


def test_single_sample_single_class():
    m = init_model(build_vgg_lite((3, 4), input_shape=(1, 8, 8), num_classes=1), 0, "float64")
    ds = Dataset(np.random.default_rng(0).standard_normal((1, 1, 8, 8)), np.array([0]), 1)
    (t,) = accumulate_importance(m, ds, layers=[0])
    hm = channel_heatmaps(m, ds.images[0], 0, 0)
    want = [math.fsum(hm.maps[c].ravel().tolist()) for c in range(3)]
    assert t.matrix[:, 0].tolist() == want
    assert t.counts.tolist() == [1]


def test_matches_brute_force_two_classes():
    m, ds = tiny_model(), tiny_classification(4, 2, 1)
    tables = accumulate_importance(m, ds)
    for t in tables:
        mat, totals, counts = naive_importance(m, ds, t.layer)
        assert np.array_equal(t.matrix, mat) and np.array_equal(t.totals, totals)
        assert t.counts.tolist() == counts
        t.check()


def test_segmentation_attribution_and_brute_force():
    m = init_model(build_seg_lite((2, 3), input_shape=(1, 16, 16), num_classes=3), 0, "float64")
    ds = synth_shapes(3, 4, num_classes=3, h=16, w=16).astype(np.float64)
    (t,) = accumulate_importance(m, ds, layers=[0])
    mat, totals, counts = naive_importance(m, ds, 0)
    assert np.array_equal(t.matrix, mat) and np.array_equal(t.totals, totals)
    assert counts[0] == 4  # every image has background


def test_missing_class_is_an_error():
    m = tiny_model(3)
    ds = Dataset(np.zeros((2, 1, 8, 8)), np.array([0, 2]), 3)
    with pytest.raises(DataError, match=r"\[1\]"):
        accumulate_importance(m, ds)


def test_zero_channel_has_zero_importance():
    m = tiny_model()
    m.state.layers[0]["weight"][1] = 0
    m.state.layers[1]["beta"][1] = -1.0  # relu(bn(0)) stays at zero
    (t,) = accumulate_importance(m, tiny_classification(), layers=[0])
    assert t.totals[1] == 0 and not t.matrix[1].any()
    assert t.totals.sum() > 0


def test_permutation_invariance_bit_exact():
    m, ds = tiny_model(), tiny_classification(10, 2, 3)
    perm = np.random.default_rng(0).permutation(len(ds))
    a = accumulate_importance(m, ds)
    b = accumulate_importance(m, ds.subset(perm))
    for x, y in zip(a, b):
        assert np.array_equal(x.matrix, y.matrix) and np.array_equal(x.totals, y.totals)


def test_per_class_cap():
    (t,) = accumulate_importance(tiny_model(), tiny_classification(10), layers=[0], per_class_cap=2)
    assert t.counts.tolist() == [2, 2]


def test_check_catches_corruption():
    t = ImportanceTable(0, np.array([[1.0, 2.0]]), np.array([3.0]), np.array([1, 1]))
    t.check()
    with pytest.raises(ValueError):
        ImportanceTable(0, np.array([[1.0, 2.0]]), np.array([3.5]), np.array([1, 1])).check()
    with pytest.raises(ValueError):
        ImportanceTable(0, np.array([[-1.0, 2.0]]), np.array([1.0]), np.array([1, 1])).check()


def test_csv_roundtrip_exact():
    tables = accumulate_importance(tiny_model(), tiny_classification())
    back = tables_from_csv(tables_to_csv(tables))
    for a, b in zip(tables, back):
        assert a.layer == b.layer
        assert np.array_equal(a.matrix, b.matrix) and np.array_equal(a.totals, b.totals)
        assert np.array_equal(a.counts, b.counts)
    assert tables_to_csv(tables).splitlines()[0] == "layer,channel,class_0,class_1,total"


def test_rank_examples():
    assert rank_channels([3.0, 1.0, 2.0]).tolist() == [0, 2, 1]
    assert rank_channels([5.0] * 4).tolist() == [0, 1, 2, 3]
    assert rank_channels([1.0, 2.0, 2.0, 0.5]).tolist() == [1, 2, 0, 3]


def test_rank_against_reference_sort():
    rng = np.random.default_rng(0)
    for _ in range(20):
        v = rng.integers(0, 5, 12).astype(float)  # many ties
        want = sorted(range(12), key=lambda c: (-v[c], c))
        assert rank_channels(v).tolist() == want


def test_retain_count():
    assert retain_count(0.35, 64) == 23
    assert retain_count(0.3, 10) == 3  # 0.3 * 10 is 3.0000000000000004 in floating point
    assert retain_count(1.0, 7) == 7
    assert retain_count(0.01, 3) == 1
    for bad in (0.0, -0.1, 1.01):
        with pytest.raises(PlanError):
            retain_count(bad, 10)


def test_topk_nesting_and_full():
    ranking = np.random.default_rng(1).permutation(64)
    a, b = select_topk(ranking, 0.35), select_topk(ranking, 0.4)
    assert set(a.retained) < set(b.retained)
    assert len(a.retained) == 23 and list(a.retained) == sorted(a.retained)
    full = select_topk(ranking, 1.0)
    assert full.retained == tuple(range(64)) and full.removed == ()


def test_baselines():
    ranking = tuple(np.random.default_rng(2).permutation(10).tolist())
    r30 = baseline_select("random-30", ranking, seed=0, layer=3)
    assert len(r30.retained) == 3
    bot = baseline_select("bot-30-of-bottom-50-random", ranking, seed=0)
    assert set(bot.retained) <= set(ranking[5:])
    top = baseline_select("peak-30-of-top-50-random", ranking, seed=0)
    assert set(top.retained) <= set(ranking[:5]) and len(top.retained) == 3
    peak = baseline_select("peak-k", ranking, seed=0, k=0.3)
    assert set(peak.retained) == set(ranking[:3])
    again = baseline_select("random-30", ranking, seed=0, layer=3)
    assert again.retained == r30.retained
    with pytest.raises(PlanError):
        baseline_select("lottery", ranking, 0)


def test_plan_json_and_helpers():
    tables = accumulate_importance(tiny_model(), tiny_classification())
    plan = plan_from_tables(tables, 0.5)
    back = RetentionPlan.from_json(plan.to_json())
    assert back.keep_sets().keys() == plan.keep_sets().keys()
    for j in plan:
        assert back[j].retained == plan[j].retained and back[j].ranking == plan[j].ranking
        assert set(plan.removal_sets()[j]) | set(plan[j].retained) == set(range(plan[j].channels))
    fp = full_plan(tiny_model().spec)
    assert all(len(fp[j].removed) == 0 for j in fp)


def test_global_mode():
    t1 = ImportanceTable(0, np.array([[4.0], [2.0], [1.0]]), np.array([4.0, 2.0, 1.0]), np.array([1]))
    t2 = ImportanceTable(4, np.array([[9.0], [8.0], [0.0], [0.0]]), np.array([9.0, 8.0, 0.0, 0.0]), np.array([1]))
    plan = plan_from_tables([t1, t2], 3 / 7, mode="global")
    # normalised scores: 1, .5, .25 | 1, .889, 0, 0 -> top 3 = (0,0), (4,0), (4,1)
    assert plan[0].retained == (0,) and plan[4].retained == (0, 1)
    with pytest.raises(PlanError):
        plan_from_tables([t1], 0.5, strategy="random-30", mode="global")
