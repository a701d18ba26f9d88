"""Dataset loaders (IDX, CIFAR-10 binary), synthetic segmentation shapes,
a small serialisation container and seeded batch iteration."""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .rng import fisher_yates, stream

MNIST_MEAN, MNIST_STD = (0.1307,), (0.3081,)
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)
SHAPES_MEAN, SHAPES_STD = (0.35,), (0.3,)
MAX_SHAPE_CLASSES = 8

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073


@dataclass
class Dataset:
    """Stacked samples (N, C, H, W) with class labels (N,) or masks (N, H, W)."""

    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    task: str = "classification"
    mean: tuple = ()
    std: tuple = ()
    class_ids: tuple = ()
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")
        if not self.class_ids:
            self.class_ids = tuple(range(self.num_classes))

    def __len__(self):
        return len(self.images)

    @property
    def sample_shape(self) -> tuple:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.split, self.task,
                       self.mean, self.std, self.class_ids, dict(self.meta))

    def astype(self, dtype) -> "Dataset":
        return Dataset(self.images.astype(dtype), self.labels, self.num_classes, self.split, self.task,
                       self.mean, self.std, self.class_ids, dict(self.meta))

    def record(self) -> dict:
        """Summary embedded in experiment reports (includes normalisation)."""
        return {
            "n": len(self), "num_classes": self.num_classes, "split": self.split, "task": self.task,
            "mean": list(self.mean), "std": list(self.std), "class_ids": list(self.class_ids),
            **self.meta,
        }


def _read(path) -> bytes:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _normalize(pixels: np.ndarray, mean, std) -> np.ndarray:
    x = pixels.astype(np.float32) / np.float32(255.0)
    m = np.asarray(mean, dtype=np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(1, -1, 1, 1)
    return (x - m) / s


def _filter_classes(images, labels, classes, per_class_cap):
    """Keep ``classes`` (remapped to 0..len-1 in sorted order) and at most
    ``per_class_cap`` samples of each, in file order."""
    ids = tuple(sorted(int(c) for c in classes))
    remap = np.full(256, -1, dtype=np.int64)
    remap[list(ids)] = np.arange(len(ids))
    keep = []
    seen = dict.fromkeys(range(len(ids)), 0)
    for i, lab in enumerate(remap[labels]):
        if lab < 0:
            continue
        if per_class_cap is not None and seen[lab] >= per_class_cap:
            continue
        seen[lab] += 1
        keep.append(i)
    keep = np.asarray(keep, dtype=np.int64)
    return images[keep], remap[labels[keep]], ids


def load_idx(images_path, labels_path, split="train", classes=None, per_class_cap=None,
             num_classes: int = 10) -> Dataset:
    """MNIST-style IDX pair (optionally gzipped), normalised with the MNIST constants."""
    img = _read(images_path)
    lab = _read(labels_path)
    if len(img) < 16 or struct.unpack(">I", img[:4])[0] != IDX_IMAGES_MAGIC:
        raise DataError(f"{images_path}: bad IDX image magic")
    if len(lab) < 8 or struct.unpack(">I", lab[:4])[0] != IDX_LABELS_MAGIC:
        raise DataError(f"{labels_path}: bad IDX label magic")
    n, rows, cols = struct.unpack(">III", img[4:16])
    (nl,) = struct.unpack(">I", lab[4:8])
    if len(img) != 16 + n * rows * cols:
        raise DataError(f"{images_path}: expected {16 + n * rows * cols} bytes, found {len(img)}")
    if len(lab) != 8 + nl:
        raise DataError(f"{labels_path}: expected {8 + nl} bytes, found {len(lab)}")
    if n != nl:
        raise DataError(f"{n} images but {nl} labels")
    pixels = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, 1, rows, cols)
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise DataError(f"{labels_path}: label {labels.max()} out of range [0, {num_classes})")
    ids = tuple(range(num_classes))
    if classes is not None or per_class_cap is not None:
        pixels, labels, ids = _filter_classes(pixels, labels, classes if classes is not None else ids,
                                              per_class_cap)
    return Dataset(_normalize(pixels, MNIST_MEAN, MNIST_STD), labels, len(ids), split,
                   "classification", MNIST_MEAN, MNIST_STD, ids, {"source": "idx"})


def load_cifar10(paths, split="train", classes=None, per_class_cap=None) -> Dataset:
    """CIFAR-10 binary batches: 1 label byte + 3072 plane-major RGB bytes per record."""
    if isinstance(paths, (str, Path)):
        paths = [paths]
    chunks = []
    for p in paths:
        raw = _read(p)
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            raise DataError(f"{p}: length {len(raw)} is not a multiple of {CIFAR_RECORD}")
        chunks.append(np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD))
    rec = np.concatenate(chunks) if chunks else np.zeros((0, CIFAR_RECORD), np.uint8)
    labels = rec[:, 0].astype(np.int64)
    if labels.size and labels.max() >= 10:
        raise DataError(f"CIFAR label {labels.max()} out of range [0, 10)")
    pixels = rec[:, 1:].reshape(-1, 3, 32, 32)
    ids = tuple(range(10))
    if classes is not None or per_class_cap is not None:
        pixels, labels, ids = _filter_classes(pixels, labels, classes if classes is not None else ids,
                                              per_class_cap)
    return Dataset(_normalize(pixels, CIFAR_MEAN, CIFAR_STD), labels, len(ids), split,
                   "classification", CIFAR_MEAN, CIFAR_STD, ids, {"source": "cifar10"})


def synth_shapes(seed: int, n: int, num_classes: int = 4, h: int = 32, w: int = 32,
                 split="train", return_log: bool = False):
    """Grayscale scenes of rectangles and discs over a textured background.

    Class 0 is background; class d >= 1 is drawn at intensity
    ``0.35 + 0.65 * d / (D - 1)``. Each image gets 1-3 shapes; later shapes
    overwrite earlier ones. With ``return_log`` also returns, per image, the
    ordered placement list ``(class, kind, params)``.
    """
    if num_classes < 2:
        raise DataError("synthetic shapes need at least 2 classes (background + shapes)")
    if num_classes > MAX_SHAPE_CLASSES:
        raise DataError(f"at most {MAX_SHAPE_CLASSES} classes supported, got {num_classes}")
    rng = stream(seed, "data")
    yy, xx = np.mgrid[0:h, 0:w]
    images = np.empty((n, 1, h, w), dtype=np.float32)
    masks = np.zeros((n, h, w), dtype=np.int64)
    logs = []
    for i in range(n):
        fy, fx = rng.uniform(0.2, 0.8, 2)
        py, px = rng.uniform(0, 2 * np.pi, 2)
        img = 0.15 + 0.08 * np.sin(fy * yy + py) * np.sin(fx * xx + px)
        mask = np.zeros((h, w), dtype=np.int64)
        log = []
        for _ in range(int(rng.integers(1, 4))):
            d = int(rng.integers(1, num_classes))
            if rng.random() < 0.5:
                y0, x0 = (int(v) for v in rng.integers(0, [h - 6, w - 6]))
                hh, ww = (int(v) for v in rng.integers(5, [min(14, h - y0) + 1, min(14, w - x0) + 1]))
                region = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
                log.append((d, "rect", (y0, x0, hh, ww)))
            else:
                r = int(rng.integers(3, 8))
                cy, cx = (int(v) for v in rng.integers(0, [h, w]))
                region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
                log.append((d, "disc", (cy, cx, r)))
            mask[region] = d
            img = np.where(region, 0.35 + 0.65 * d / (num_classes - 1), img)
        img = img + rng.normal(0.0, 0.04, (h, w))
        images[i, 0] = img
        masks[i] = mask
        logs.append(log)
    m = np.asarray(SHAPES_MEAN, np.float32).reshape(1, -1, 1, 1)
    s = np.asarray(SHAPES_STD, np.float32).reshape(1, -1, 1, 1)
    ds = Dataset((images - m) / s, masks, num_classes, split, "segmentation", SHAPES_MEAN, SHAPES_STD,
                 meta={"source": "synth-shapes", "seed": int(seed)})
    return (ds, logs) if return_log else ds


# -- container -----------------------------------------------------------------------

DATASET_MAGIC = b"FGPD"


def dataset_to_bytes(ds: Dataset) -> bytes:
    """``FGPD`` + u32 header length + JSON header + raw float32 images + raw int64 labels."""
    header = json.dumps({
        "images": list(ds.images.shape), "labels": list(ds.labels.shape),
        "num_classes": ds.num_classes, "split": ds.split, "task": ds.task,
        "mean": list(ds.mean), "std": list(ds.std), "class_ids": list(ds.class_ids), "meta": ds.meta,
    }, sort_keys=True).encode()
    return b"".join([
        DATASET_MAGIC, struct.pack("<I", len(header)), header,
        ds.images.astype("<f4").tobytes(), ds.labels.astype("<i8").tobytes(),
    ])


def dataset_from_bytes(raw: bytes) -> Dataset:
    if raw[:4] != DATASET_MAGIC:
        raise DataError("bad dataset container magic")
    (hl,) = struct.unpack("<I", raw[4:8])
    try:
        hdr = json.loads(raw[8 : 8 + hl])
    except ValueError as e:
        raise DataError(f"corrupt dataset header: {e}") from e
    off = 8 + hl
    ni = int(np.prod(hdr["images"])) * 4
    nl = int(np.prod(hdr["labels"])) * 8
    if len(raw) != off + ni + nl:
        raise DataError("dataset container truncated")
    images = np.frombuffer(raw, "<f4", count=ni // 4, offset=off).reshape(hdr["images"]).astype(np.float32)
    labels = np.frombuffer(raw, "<i8", count=nl // 8, offset=off + ni).reshape(hdr["labels"]).astype(np.int64)
    return Dataset(images, labels, hdr["num_classes"], hdr["split"], hdr["task"], tuple(hdr["mean"]),
                   tuple(hdr["std"]), tuple(hdr["class_ids"]), hdr["meta"])


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> Dataset:
    return dataset_from_bytes(_read(path))


# -- iteration -----------------------------------------------------------------------


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    return fisher_yates(n, stream(seed, "shuffle", epoch)) if shuffle else np.arange(n)


def augment(x: np.ndarray, rng: np.random.Generator, flip: bool = False, crop: int = 0) -> np.ndarray:
    """Random horizontal flip and zero-pad + random crop, per sample."""
    out = x.copy()
    n, _, h, w = x.shape
    if flip:
        sel = rng.random(n) < 0.5
        out[sel] = out[sel, :, :, ::-1]
    if crop:
        padded = np.pad(out, ((0, 0), (0, 0), (crop, crop), (crop, crop)))
        offs = rng.integers(0, 2 * crop + 1, (n, 2))
        for i, (dy, dx) in enumerate(offs):
            out[i] = padded[i, :, dy : dy + h, dx : dx + w]
    return out


def iterate(ds: Dataset, batch_size: int, seed: int = 0, epoch: int = 0, shuffle: bool = True,
            flip: bool = False, crop: int = 0):
    """Yield ``(x, y)`` batches; the permutation is fixed by ``(seed, epoch)``
    and the last partial batch is kept."""
    order = epoch_order(len(ds), seed, epoch, shuffle)
    aug = stream(seed, "augment", epoch) if (flip or crop) else None
    for s in range(0, len(order), batch_size):
        idx = order[s : s + batch_size]
        x = ds.images[idx]
        if aug is not None:
            x = augment(x, aug, flip, crop)
        yield x, ds.labels[idx]
