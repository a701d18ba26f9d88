import struct
import zlib

import numpy as np
import pytest

from fgprune import checkpoint
from fgprune.config import ExperimentConfig
from fgprune.errors import CheckpointError, ConfigError
from fgprune.models import build_resnet_lite, build_seg_lite, build_vgg_lite, init_model
from fgprune.select import full_plan


def test_roundtrip_bit_exact(tmp_path):
    for spec in (build_vgg_lite((4, 6)), build_resnet_lite((4, 6), blocks_per_stage=2), build_seg_lite((4, 6))):
        m = init_model(spec, 3)
        m.state.layers[1]["running_var"][:] = np.linspace(0.5, 2, len(m.state.layers[1]["running_var"]))
        checkpoint.save(tmp_path / "m.fgpc", m, full_plan(spec))
        back, plan = checkpoint.load(tmp_path / "m.fgpc")
        assert back.spec == spec and plan.to_json() == full_plan(spec).to_json()
        for (na, a), (nb, b) in zip(m.state.named_arrays(), back.state.named_arrays()):
            assert na == nb and a.dtype == b.dtype == np.float32 and np.array_equal(a, b)
    assert checkpoint.from_bytes(checkpoint.to_bytes(m))[1] is None


def test_layout_header_and_crc():
    raw = checkpoint.to_bytes(init_model(build_vgg_lite((2, 2))))
    assert raw[:4] == b"FGPC"
    assert struct.unpack("<H", raw[4:6])[0] == checkpoint.VERSION
    assert struct.unpack("<I", raw[-4:])[0] == zlib.crc32(raw[:-4])


def test_corruption_is_rejected():
    raw = bytearray(checkpoint.to_bytes(init_model(build_vgg_lite((2, 2)))))
    flipped = bytearray(raw)
    flipped[40] ^= 0xFF
    with pytest.raises(CheckpointError, match="CRC"):
        checkpoint.from_bytes(bytes(flipped))
    with pytest.raises(CheckpointError):
        checkpoint.from_bytes(bytes(raw[:-9]))
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.from_bytes(b"XXXX" + bytes(raw[4:]))
    newer = bytearray(raw[:-4])
    newer[4:6] = struct.pack("<H", checkpoint.VERSION + 1)
    newer += struct.pack("<I", zlib.crc32(bytes(newer)))
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.from_bytes(bytes(newer))


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        checkpoint.load(tmp_path / "nope.fgpc")


CFG = """
# a segmentation experiment
task = segmentation
arch = seg-lite
channels = 8, 16
dataset = synth-shapes
num_classes = 4
milestones = 4, 6   # decay twice
epochs = 8
flip = true
train_cap = none
"""


def test_config_parsing():
    cfg = ExperimentConfig.from_text(CFG)
    assert cfg.channels == (8, 16) and cfg.milestones == (4, 6) and cfg.flip is True
    assert cfg.train_cap is None and cfg.epochs == 8 and cfg.k == 0.4
    tc = cfg.train_config(seed=5)
    assert tc.seed == 5 and tc.milestones == (4, 6)
    again = ExperimentConfig.from_text(cfg.to_text())
    assert again == cfg


def test_config_overrides():
    cfg = ExperimentConfig.from_text(CFG, ["k=0.7", "seeds = 1, 2, 3"])
    assert cfg.k == 0.7 and cfg.seeds == (1, 2, 3)
    with pytest.raises(ConfigError, match="unknown"):
        ExperimentConfig.from_text(CFG, ["kk=1"])
    with pytest.raises(ConfigError):
        ExperimentConfig.from_text(CFG, ["k"])


@pytest.mark.parametrize("text,match", [
    ("colour = red", "unknown"),
    ("epochs = 3\nepochs = 4", "duplicate"),
    ("epochs three", "key = value"),
    ("epochs = three", "epochs"),
    ("arch = alexnet", "arch"),
    ("k = 1.5", "retain"),
    ("milestones = 30", "milestones"),
    ("strategy = lottery", "strategy"),
    ("task = segmentation\narch = vgg-lite", "seg-lite"),
])
def test_config_rejections(text, match):
    base = "".join(f"{k} = {v}\n" for k, v in
                   [("dataset", "synth-shapes"), ("task", "segmentation"), ("arch", "seg-lite")] if k not in text)
    with pytest.raises(ConfigError, match=match):
        ExperimentConfig.from_text(base + text)


def test_config_paths(tmp_path):
    (tmp_path / "a").write_bytes(b"")
    text = "train_images = a\ntrain_labels = a\ntest_images = a\ntest_labels = missing\n"
    (tmp_path / "exp.cfg").write_text(text)
    with pytest.raises(ConfigError, match="missing"):
        ExperimentConfig.load(tmp_path / "exp.cfg")
    ok = ExperimentConfig.load(tmp_path / "exp.cfg", ["test_labels=a"])
    assert ok.train_images == str(tmp_path / "a")
    with pytest.raises(ConfigError, match="input paths"):
        ExperimentConfig.from_text("dataset = idx")
    with pytest.raises(ConfigError):
        ExperimentConfig.load(tmp_path / "none.cfg")
