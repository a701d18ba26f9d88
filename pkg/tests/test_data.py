import gzip
import struct

import numpy as np
import pytest

from fgprune import data as D
from fgprune.errors import DataError
from fgprune.rng import fisher_yates, stream

from oracles import idx_bytes


def _idx_pair(tmp_path, images, labels, gz=False, prefix=""):
    ib, lb = idx_bytes(images, labels)
    pi, pl = tmp_path / f"{prefix}img", tmp_path / f"{prefix}lab"
    pi.write_bytes(gzip.compress(ib) if gz else ib)
    pl.write_bytes(gzip.compress(lb) if gz else lb)
    return pi, pl


def test_idx_hand_authored_bytes(tmp_path):
    # two 2x2 images, labels 3 and 7, written byte by byte
    img = bytes([0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 255, 51, 102, 255, 255, 0, 0])
    lab = bytes([0, 0, 8, 1, 0, 0, 0, 2, 3, 7])
    (tmp_path / "i").write_bytes(img)
    (tmp_path / "l").write_bytes(lab)
    ds = D.load_idx(tmp_path / "i", tmp_path / "l")
    assert ds.images.shape == (2, 1, 2, 2) and ds.images.dtype == np.float32
    assert list(ds.labels) == [3, 7]
    want = (np.array([0, 255, 51, 102], np.float32) / 255 - np.float32(0.1307)) / np.float32(0.3081)
    np.testing.assert_allclose(ds.images[0, 0].ravel(), want, rtol=1e-6)
    assert ds.mean == (0.1307,) and ds.std == (0.3081,)


def test_idx_gzip_and_filters(tmp_path):
    rng = np.random.default_rng(0)
    labels = np.array([0, 1, 2, 1, 2, 2, 0, 1])
    pi, pl = _idx_pair(tmp_path, rng.integers(0, 256, (8, 3, 3)), labels, gz=True)
    ds = D.load_idx(pi, pl, classes=[2, 1], per_class_cap=2)
    assert ds.num_classes == 2 and ds.class_ids == (1, 2)
    # file order kept: indices 1(1),2(2),3(1),4(2)
    assert list(ds.labels) == [0, 1, 0, 1]


def test_idx_errors(tmp_path):
    imgs = np.zeros((2, 2, 2), np.uint8)
    pi, pl = _idx_pair(tmp_path, imgs, np.array([1, 2]))
    raw = pi.read_bytes()
    (tmp_path / "bad").write_bytes(b"\x00\x00\x08\x04" + raw[4:])
    with pytest.raises(DataError, match="magic"):
        D.load_idx(tmp_path / "bad", pl)
    (tmp_path / "short").write_bytes(raw[:-1])
    with pytest.raises(DataError, match="bytes"):
        D.load_idx(tmp_path / "short", pl)
    _, pl3 = _idx_pair(tmp_path, np.zeros((3, 2, 2)), np.array([0, 0, 0]), prefix="three-")
    with pytest.raises(DataError, match="labels"):
        D.load_idx(pi, pl3)
    pi4, pl4 = _idx_pair(tmp_path, imgs, np.array([1, 12]), prefix="big-")
    with pytest.raises(DataError, match="out of range"):
        D.load_idx(pi4, pl4)
    with pytest.raises(DataError):
        D.load_idx(tmp_path / "missing", pl)


def _cifar_record(label, fill):
    return bytes([label]) + bytes([fill]) * 1024 + bytes([fill // 2]) * 1024 + bytes([0]) * 1024


def test_cifar_records(tmp_path):
    p = tmp_path / "data_batch_1.bin"
    p.write_bytes(_cifar_record(4, 200) + _cifar_record(9, 10))
    ds = D.load_cifar10([p])
    assert ds.images.shape == (2, 3, 32, 32) and list(ds.labels) == [4, 9]
    r = ds.images[0, :, 0, 0]
    want = (np.array([200, 100, 0]) / 255 - np.array(D.CIFAR_MEAN)) / np.array(D.CIFAR_STD)
    np.testing.assert_allclose(r, want, rtol=1e-5)
    sub = D.load_cifar10(p, classes=[9])
    assert len(sub) == 1 and sub.labels[0] == 0 and sub.class_ids == (9,)


def test_cifar_errors(tmp_path):
    p = tmp_path / "b.bin"
    p.write_bytes(_cifar_record(1, 0)[:-5])
    with pytest.raises(DataError, match="multiple"):
        D.load_cifar10(p)
    p.write_bytes(_cifar_record(11, 0))
    with pytest.raises(DataError, match="out of range"):
        D.load_cifar10(p)


def test_fisher_yates_hand_trace():
    # replay the same stream by hand: i = 4..1, j = integers(0, i + 1)
    rng = stream(3, "shuffle", 0)
    js = [int(rng.integers(0, i + 1)) for i in range(4, 0, -1)]
    perm = list(range(5))
    for i, j in zip(range(4, 0, -1), js):
        perm[i], perm[j] = perm[j], perm[i]
    assert list(fisher_yates(5, stream(3, "shuffle", 0))) == perm
    assert sorted(fisher_yates(50, stream(1, "shuffle"))) == list(range(50))


def test_streams_are_independent_and_reproducible():
    a = stream(0, "init").standard_normal(4)
    assert np.array_equal(a, stream(0, "init").standard_normal(4))
    assert not np.array_equal(a, stream(0, "shuffle").standard_normal(4))
    assert not np.array_equal(a, stream(1, "init").standard_normal(4))


def test_iterate_covers_everything_and_keeps_partial_batch():
    ds = D.Dataset(np.arange(10, dtype=np.float32).reshape(10, 1, 1, 1), np.arange(10) % 2, 2)
    batches = list(D.iterate(ds, 4, seed=1, epoch=0))
    assert [len(y) for _, y in batches] == [4, 4, 2]
    seen = np.concatenate([x.ravel() for x, _ in batches])
    assert sorted(seen) == list(range(10))
    again = np.concatenate([x.ravel() for x, _ in D.iterate(ds, 4, seed=1, epoch=0)])
    assert np.array_equal(seen, again)
    other = np.concatenate([x.ravel() for x, _ in D.iterate(ds, 4, seed=1, epoch=1)])
    assert not np.array_equal(seen, other)


def test_augment_flip_and_crop_shapes():
    x = np.arange(2 * 1 * 4 * 4, dtype=np.float32).reshape(2, 1, 4, 4)
    out = D.augment(x, stream(0, "augment"), flip=True, crop=1)
    assert out.shape == x.shape
    assert np.array_equal(D.augment(x, stream(0, "augment")), x)


def test_synth_shapes_self_audit():
    ds, logs = D.synth_shapes(5, 20, num_classes=4, return_log=True)
    assert ds.task == "segmentation" and ds.images.shape == (20, 1, 32, 32)
    yy, xx = np.mgrid[0:32, 0:32]
    for mask, log in zip(ds.labels, logs):
        redraw = np.zeros((32, 32), np.int64)
        for d, kind, p in log:
            if kind == "rect":
                y0, x0, hh, ww = p
                region = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
            else:
                cy, cx, r = p
                region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            redraw[region] = d
        assert np.array_equal(redraw, mask)
        for d in range(4):
            assert (mask == d).sum() == (redraw == d).sum()


def test_synth_shapes_determinism_and_limits():
    a, b = D.synth_shapes(1, 4), D.synth_shapes(1, 4)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, D.synth_shapes(2, 4).images)
    with pytest.raises(DataError):
        D.synth_shapes(0, 2, num_classes=1)
    with pytest.raises(DataError):
        D.synth_shapes(0, 2, num_classes=9)


def test_container_roundtrip(tmp_path):
    ds = D.synth_shapes(0, 3)
    D.save_dataset(ds, tmp_path / "s.fgpd")
    back = D.load_dataset(tmp_path / "s.fgpd")
    assert np.array_equal(back.images, ds.images) and np.array_equal(back.labels, ds.labels)
    assert back.record() == ds.record()
    raw = (tmp_path / "s.fgpd").read_bytes()
    with pytest.raises(DataError):
        D.dataset_from_bytes(raw[:-3])
    with pytest.raises(DataError):
        D.dataset_from_bytes(b"XXXX" + raw[4:])


def test_dataset_validation():
    with pytest.raises(DataError):
        D.Dataset(np.zeros((2, 1, 2, 2)), np.zeros(3, int), 2)
    with pytest.raises(DataError):
        D.Dataset(np.zeros((1, 1, 2, 2)), np.array([5]), 2)
