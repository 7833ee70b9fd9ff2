"""Datasets: PGM/PPM image folders, a seeded synthetic blob generator, splits."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


class DataError(Exception):
    pass


class MissingFileError(DataError, FileNotFoundError):
    pass


class DecodeError(DataError, ValueError):
    pass


class UnknownClassError(DataError, KeyError):
    def __str__(self):
        return str(self.args[0])


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [N, C, H, W] in [0, 1]
    labels: np.ndarray
    class_names: tuple
    split_tag: str = "train"

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if self.images.ndim != 4:
            raise DataError(f"images must be [N, C, H, W], got {self.images.shape}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DataError("label index out of range for class_names")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise DataError("pixel values must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def n_classes(self):
        return len(self.class_names)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, idx, split_tag=None):
        idx = np.asarray(idx, dtype=np.int64)
        return replace(self, images=self.images[idx], labels=self.labels[idx],
                       split_tag=split_tag or self.split_tag)

    def checksum(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.images, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.labels, dtype="<i8").tobytes())
        h.update("\x00".join(self.class_names).encode("utf-8"))
        return h.hexdigest()


def synth(classes=3, per_class=200, size=32, seed=0, noise=0.05, jitter=0.1):
    """Seeded elliptical-blob images, one blob shape per class.

    Class ``c`` has radius ``(0.15 + 0.08c) * size`` and axis ratio
    ``1 + 0.3c`` with Gaussian falloff ``exp(-d^2 / r^2)``; centres are
    jittered by up to ``jitter * size`` and uniform noise of amplitude
    ``noise`` is added before clipping to [0, 1].
    """
    if classes < 2:
        raise ValueError("synth needs at least 2 classes")
    rng = np.random.default_rng(seed)
    rows, cols = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((classes * per_class, 1, size, size))
    labels = np.repeat(np.arange(classes), per_class)
    for i, c in enumerate(labels):
        radius = (0.15 + 0.08 * c) * size
        ecc = 1.0 + 0.3 * c
        cy, cx = size // 2 + rng.uniform(-jitter * size, jitter * size, size=2)
        d2 = (cols - cx) ** 2 + ((rows - cy) * ecc) ** 2
        img = np.exp(-d2 / radius ** 2)
        if noise > 0:
            img = img + rng.uniform(-noise, noise, size=img.shape)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, tuple(f"class{c}" for c in range(classes)))


def split_indices(labels, n_classes, fractions=(0.7, 0.15, 0.15), seed=0):
    """Seeded stratified (train, val, test) index arrays, each sorted.

    Each class contributes ``floor(f * n_c)`` examples to every part. When the
    fractions sum to 1 the rounding remainder goes to train, so the parts
    cover the whole set; otherwise it is left unused.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f <= 0 for f in fractions) or sum(fractions) > 1 + 1e-9:
        raise ValueError(f"need three positive fractions summing to <= 1, got {fractions}")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    parts = [[], [], []]
    for c in range(n_classes):
        members = np.flatnonzero(labels == c)
        counts = [int(np.floor(f * len(members) + 1e-9)) for f in fractions]
        if abs(sum(fractions) - 1.0) <= 1e-9:
            counts[0] = len(members) - counts[1] - counts[2]
        if min(counts) == 0:
            raise ValueError(f"class {c} has {len(members)} examples, too few for {fractions}")
        perm = members[rng.permutation(len(members))]
        at = 0
        for k, n in enumerate(counts):
            parts[k].append(perm[at:at + n])
            at += n
    return tuple(np.sort(np.concatenate(p)) for p in parts)


def split(dataset, fractions=(0.7, 0.15, 0.15), seed=0):
    """Seeded stratified split into (train, val, test) datasets."""
    idx = split_indices(dataset.labels, dataset.n_classes, fractions, seed)
    return tuple(dataset.subset(i, tag) for i, tag in zip(idx, ("train", "val", "test")))


# -- Netpbm ---------------------------------------------------------------------

def _tokens(buf, count):
    out, pos = [], 2
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DecodeError("truncated header")
        out.append(buf[start:pos])
    return out, pos + 1


def read_netpbm(path):
    """Decode an 8-bit binary PGM (P5) or PPM (P6) into ``[C, H, W]`` in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    buf = path.read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise DecodeError(f"{path}: not a binary PGM/PPM image")
    try:
        (w, h, maxval), start = _tokens(buf, 3)
        w, h, maxval = int(w), int(h), int(maxval)
    except (DecodeError, ValueError) as exc:
        raise DecodeError(f"{path}: bad header ({exc})") from None
    if not 0 < maxval <= 255:
        raise DecodeError(f"{path}: only 8-bit images are supported (maxval {maxval})")
    channels = 1 if magic == b"P5" else 3
    need = w * h * channels
    data = buf[start:start + need]
    if len(data) != need:
        raise DecodeError(f"{path}: expected {need} pixel bytes, found {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8).reshape(h, w, channels).transpose(2, 0, 1)
    return arr.astype(np.float64) / maxval


def write_netpbm(path, image):
    """Write ``[C, H, W]`` values in [0, 1] as 8-bit PGM (C=1) or PPM (C=3)."""
    image = np.asarray(image)
    c, h, w = image.shape
    if c not in (1, 3):
        raise ValueError(f"netpbm needs 1 or 3 channels, got {c}")
    pixels = np.clip(np.rint(image * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    magic = "P5" if c == 1 else "P6"
    Path(path).write_bytes(f"{magic}\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def load_folder(root, index="index.csv", image_shape=None, split_tag="train"):
    """Load images listed in an index CSV (header ``filename,class``).

    Labels follow the lexicographic order of class names. All images must
    share one shape (``image_shape`` if given); nothing is resampled.
    """
    root = Path(root)
    index_path = root / index
    if not index_path.is_file():
        raise MissingFileError(f"missing file: {index_path}")
    with open(index_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["filename", "class"]:
            raise DataError(f"{index_path}: header must be 'filename,class'")
        rows = [(r["filename"].strip(), r["class"].strip()) for r in reader]
    if not rows:
        raise DataError(f"{index_path}: no entries")
    class_names = tuple(sorted({c for _, c in rows}))
    return _load_rows(root, rows, class_names, image_shape, split_tag)


def _load_rows(root, rows, class_names, image_shape, split_tag):
    lookup = {c: i for i, c in enumerate(class_names)}
    images, labels = [], []
    for name, cls in rows:
        if cls not in lookup:
            raise UnknownClassError(f"unknown class {cls!r} for {name}")
        img = read_netpbm(root / name)
        if image_shape is None:
            image_shape = img.shape
        if img.shape != tuple(image_shape):
            raise DecodeError(f"{root / name}: shape {img.shape} differs from expected {tuple(image_shape)}")
        images.append(img)
        labels.append(lookup[cls])
    return Dataset(np.stack(images), np.asarray(labels, dtype=np.int64), class_names, split_tag)


def save_folder(dataset, root, index="index.csv", prefix="img"):
    """Export as numbered PGM/PPM files plus an index CSV (8-bit quantised)."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    ext = "pgm" if dataset.images.shape[1] == 1 else "ppm"
    with open(root / index, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["filename", "class"])
        for i, (img, label) in enumerate(zip(dataset.images, dataset.labels)):
            name = f"{prefix}{i:05d}.{ext}"
            write_netpbm(root / name, img)
            w.writerow([name, dataset.class_names[label]])
    return root / index
