"""Dataset indexing, image preprocessing, augmentation and batching."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, SplitError
from .io_utils import atomic_write_text
from .model import CLASS_NAMES

SPLITS = ("train", "val", "test")
IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp"}
LUMA = np.array([0.299, 0.587, 0.114])

# directory-name keywords -> class id, checked in order
_CLASS_KEYWORDS = (
    (("gray", "grey", "cercospora"), 0),
    (("rust",), 1),
    (("blight",), 2),
    (("healthy",), 3),
)


# ---------------------------------------------------------------- index


@dataclass
class Entry:
    path: str
    label: int
    split: str = ""


@dataclass
class DatasetIndex:
    entries: list[Entry]
    class_names: tuple = CLASS_NAMES

    def split(self, name: str) -> list[Entry]:
        return [e for e in self.entries if e.split == name]

    def class_counts(self, split: Optional[str] = None) -> list[int]:
        counts = [0] * len(self.class_names)
        for e in self.entries:
            if split is None or e.split == split:
                counts[e.label] += 1
        return counts

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["path", "class", "split"])
        for e in self.entries:
            writer.writerow([e.path, e.label, e.split])
        return buf.getvalue()

    def to_csv(self, path):
        atomic_write_text(path, self.to_csv_text())

    @classmethod
    def from_csv(cls, path, class_names=CLASS_NAMES) -> "DatasetIndex":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([Entry(r["path"], int(r["class"]), r["split"]) for r in rows],
                   tuple(class_names))


def class_id_for(dirname: str) -> Optional[int]:
    low = dirname.lower()
    for keys, cid in _CLASS_KEYWORDS:
        if any(k in low for k in keys):
            return cid
    return None


def scan_dataset(root) -> DatasetIndex:
    """Index a root with one sub-directory per class.

    Directory names are matched to the four maize classes by keyword
    (e.g. "Corn_(maize)___Common_rust_" -> Common Rust). If any directory
    does not match, classes are numbered in sorted directory order instead.
    Paths are stored relative to ``root``.
    """
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root {root} does not exist")
    dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not dirs:
        raise SplitError(f"{root} has no class sub-directories")
    ids = [class_id_for(d.name) for d in dirs]
    if None in ids or len(set(ids)) != len(ids):
        ids = list(range(len(dirs)))
        names = tuple(d.name for d in dirs)
    else:
        names = CLASS_NAMES
    entries = []
    for d, cid in sorted(zip(dirs, ids), key=lambda t: t[1]):
        files = sorted(p for p in d.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        entries += [Entry(str(p.relative_to(root)), cid) for p in files]
    return DatasetIndex(entries, names)


def _largest_remainder(total: int, counts: Sequence[int]) -> list[int]:
    """Share ``total`` draws across classes proportionally to ``counts``.

    Floors first, then hands the leftover draws to the largest fractional
    parts; ties go to the larger class, then the lower class id.
    """
    n = sum(counts)
    exact = [Fraction(total * c, n) for c in counts]
    alloc = [math.floor(x) for x in exact]
    order = sorted(range(len(counts)), key=lambda i: (-(exact[i] - alloc[i]), -counts[i], i))
    for i in order[:total - sum(alloc)]:
        alloc[i] += 1
    return alloc


def allocate_split_counts(counts: Sequence[int], ratios=(0.8, 0.1, 0.1)) -> list[tuple]:
    """Per-class (train, val, test) sizes.

    Two stages: the held-out share (val + test) is drawn first with
    ``ceil(share * N)`` samples, then split into val and test with test
    taking ``ceil`` of its share. Each stage distributes its total over the
    classes by largest remainder.
    """
    fr = [Fraction(str(r)) for r in ratios]
    if len(fr) != 3 or any(r < 0 for r in fr) or sum(fr) != 1:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    n = sum(counts)
    held_share = fr[1] + fr[2]
    held = _largest_remainder(math.ceil(held_share * n), counts)
    test_share = fr[2] / held_share if held_share else Fraction(0)
    test = _largest_remainder(math.ceil(test_share * sum(held)), held)
    return [(c - h, h - t, t) for c, h, t in zip(counts, held, test)]


def stratified_split(index: DatasetIndex, ratios=(0.8, 0.1, 0.1), seed: int = 42,
                     min_per_class: int = 10) -> DatasetIndex:
    counts = index.class_counts()
    for cid, c in enumerate(counts):
        if c < min_per_class:
            raise SplitError(f"class {cid} ({index.class_names[cid]}) has {c} entries; "
                             f"need at least {min_per_class}")
    sizes = allocate_split_counts(counts, ratios)
    by_class: dict[int, list[int]] = {}
    for i, e in enumerate(index.entries):
        by_class.setdefault(e.label, []).append(i)
    assign = [""] * len(index.entries)
    for cid, members in by_class.items():
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, cid])))
        order = [members[j] for j in rng.permutation(len(members))]
        n_train, n_val, n_test = sizes[cid]
        for k, i in enumerate(order):
            assign[i] = "test" if k < n_test else "val" if k < n_test + n_val else "train"
    entries = [replace(e, split=s) for e, s in zip(index.entries, assign)]
    return DatasetIndex(entries, index.class_names)


# ---------------------------------------------------------------- images


def load_image(path) -> np.ndarray:
    """H x W x 3 float32 RGB in [0, 1]."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except (OSError, UnidentifiedImageError, ValueError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc
    return arr.astype(np.float32) / np.float32(255.0)


def _bilinear_axis(n_in, n_out):
    # half-pixel centres, clamped at the borders
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, (src - lo)


def resize(img: np.ndarray, height: int = 224, width: int = 224) -> np.ndarray:
    """Bilinear resize of an H x W x C image."""
    h, w = img.shape[:2]
    if (h, w) == (height, width):
        return img
    y0, y1, fy = _bilinear_axis(h, height)
    x0, x1, fx = _bilinear_axis(w, width)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    out = top * (1 - fy) + bot * fy
    # interpolation weights are convex, but rounding can step outside the range
    return np.clip(out, img.min(), img.max()).astype(img.dtype)


# ---------------------------------------------------------------- augmentation


@dataclass(frozen=True)
class AugmentParams:
    h_flip: float = 0.5
    v_flip: float = 0.5
    brightness_delta: float = 0.2
    contrast_range: tuple = (0.8, 1.2)
    saturation_range: tuple = (0.8, 1.2)
    hue_delta: float = 0.05


IDENTITY_AUGMENT = AugmentParams(0.0, 0.0, 0.0, (1.0, 1.0), (1.0, 1.0), 0.0)


def sample_factors(params: AugmentParams, rng: np.random.Generator) -> dict:
    return {
        "h_flip": bool(rng.random() < params.h_flip),
        "v_flip": bool(rng.random() < params.v_flip),
        "brightness": float(rng.uniform(-params.brightness_delta, params.brightness_delta)),
        "contrast": float(rng.uniform(*params.contrast_range)),
        "saturation": float(rng.uniform(*params.saturation_range)),
        "hue": float(rng.uniform(-params.hue_delta, params.hue_delta)),
    }


def flip(img, horizontal=True):
    return img[:, ::-1] if horizontal else img[::-1]


def luma(img):
    return img @ LUMA.astype(img.dtype)


def adjust_brightness(img, delta):
    return img + delta


def adjust_contrast(img, factor):
    mean = img.mean(axis=(0, 1), keepdims=True)
    return (img - mean) * factor + mean


def adjust_saturation(img, factor):
    y = luma(img)[..., None]
    return y + (img - y) * factor


_RGB2YIQ = np.array([[0.299, 0.587, 0.114],
                     [0.595716, -0.274453, -0.321263],
                     [0.211456, -0.522591, 0.311135]])
_YIQ2RGB = np.linalg.inv(_RGB2YIQ)


def adjust_hue(img, delta):
    """Rotate chroma by ``delta`` of a full turn around the luma axis."""
    if delta == 0:
        return img
    theta = 2 * np.pi * delta
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[1, 0, 0], [0, c, -s], [0, s, c]])
    m = _YIQ2RGB @ rot @ _RGB2YIQ
    return (img @ m.T).astype(img.dtype)


def apply_factors(img, f: dict) -> np.ndarray:
    out = img
    if f["h_flip"]:
        out = flip(out, True)
    if f["v_flip"]:
        out = flip(out, False)
    # identity factors are skipped so flips alone move pixels without rounding
    if f["brightness"] != 0:
        out = adjust_brightness(out, f["brightness"])
    if f["contrast"] != 1:
        out = adjust_contrast(out, f["contrast"])
    if f["saturation"] != 1:
        out = adjust_saturation(out, f["saturation"])
    out = adjust_hue(out, f["hue"])
    return np.clip(out, 0.0, 1.0).astype(img.dtype)


def augment(img, params: AugmentParams, rng: np.random.Generator) -> np.ndarray:
    return apply_factors(img, sample_factors(params, rng))


# ---------------------------------------------------------------- batching


def buffered_shuffle(items, buffer_size: int, rng: np.random.Generator):
    """Streaming shuffle with a fixed-size reservoir."""
    buf = []
    for item in items:
        if len(buf) < buffer_size:
            buf.append(item)
            continue
        j = int(rng.integers(len(buf)))
        yield buf[j]
        buf[j] = item
    while buf:
        j = int(rng.integers(len(buf)))
        buf[j], buf[-1] = buf[-1], buf[j]
        yield buf.pop()


def _epoch_rng(seed, epoch, stream):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch, stream])))


def batch_iterator(index: DatasetIndex, split: str, root=".", batch_size: int = 32,
                   shuffle_buffer: int = 3000, seed: int = 42, epoch: int = 0,
                   image_size=(224, 224), augment_params: Optional[AugmentParams] = AugmentParams(),
                   cache: Optional[dict] = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) batches for ``split``.

    The train split is shuffled through a ``shuffle_buffer`` reservoir and
    augmented (pass ``augment_params=None`` to disable); val and test keep
    index order and are never augmented. The last partial batch is kept.
    Each sample's augmentation draws from a generator seeded by
    (seed, epoch, entry position), so contents do not depend on order.
    """
    members = [(i, e) for i, e in enumerate(index.entries) if e.split == split]
    if not members:
        raise ValueError(f"split {split!r} is empty")
    training = split == "train"
    if training:
        members = list(buffered_shuffle(members, shuffle_buffer, _epoch_rng(seed, epoch, 0)))
    root = Path(root)
    h, w = image_size
    for start in range(0, len(members), batch_size):
        chunk = members[start:start + batch_size]
        xs = np.empty((len(chunk), h, w, 3), dtype=np.float32)
        ys = np.empty(len(chunk), dtype=np.int64)
        for k, (i, e) in enumerate(chunk):
            img = cache.get(e.path) if cache is not None else None
            if img is None:
                img = resize(load_image(root / e.path), h, w)
                if cache is not None:
                    cache[e.path] = img
            if training and augment_params is not None:
                img = augment(img, augment_params, _epoch_rng(seed, epoch, i + 1))
            xs[k] = img
            ys[k] = e.label
        yield xs, ys


def array_batches(x: np.ndarray, y: np.ndarray, batch_size: int = 32, shuffle: bool = False,
                  seed: int = 42, epoch: int = 0,
                  augment_params: Optional[AugmentParams] = None):
    """Batches from in-memory arrays, with the same seeding rules as ``batch_iterator``."""
    order = np.arange(len(x))
    if shuffle:
        order = _epoch_rng(seed, epoch, 0).permutation(len(x))
    for start in range(0, len(x), batch_size):
        idx = order[start:start + batch_size]
        xb = x[idx]
        if augment_params is not None:
            xb = np.stack([augment(img, augment_params, _epoch_rng(seed, epoch, int(i) + 1))
                           for img, i in zip(xb, idx)])
        yield xb, y[idx]


# ---------------------------------------------------------------- synthetic data


def make_synthetic_dataset(n_per_class: int = 100, size: int = 32, seed: int = 0):
    """Four-class color/texture images standing in for the leaf classes.

    0: grey-brown rectangular lesions, 1: dense orange pustules,
    2: long tan diagonal streaks, 3: plain green with mild veins.
    Returns (images float32 N x size x size x 3 in [0, 1], labels int64).
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    yy, xx = np.mgrid[0:size, 0:size] / size
    images, labels = [], []
    for label in range(4):
        for _ in range(n_per_class):
            green = np.array([0.2, 0.55, 0.15]) + rng.normal(0, 0.04, 3)
            img = np.broadcast_to(green, (size, size, 3)).copy()
            img += rng.normal(0, 0.03, (size, size, 3))
            phase = rng.uniform(0, 2 * np.pi)
            if label == 0:
                for _ in range(rng.integers(3, 6)):
                    cy, cx = rng.uniform(0, 1, 2)
                    mask = (np.abs(yy - cy) < rng.uniform(0.05, 0.12)) & \
                           (np.abs(xx - cx) < rng.uniform(0.1, 0.2))
                    img[mask] = [0.55, 0.5, 0.45]
            elif label == 1:
                mask = rng.random((size, size)) < 0.18
                img[mask] = [0.85, 0.45, 0.1]
            elif label == 2:
                freq = rng.uniform(3, 5)
                mask = np.sin(2 * np.pi * freq * (xx + yy) + phase) > 0.6
                img[mask] = [0.75, 0.65, 0.4]
            else:
                veins = 0.05 * np.sin(2 * np.pi * 6 * xx + phase)
                img[..., 1] += veins
            images.append(np.clip(img, 0, 1))
            labels.append(label)
    return np.asarray(images, dtype=np.float32), np.asarray(labels, dtype=np.int64)


def write_image_folder(root, images, labels, class_dirs=None):
    """Write uint8 PNGs into ``root/<class_dir>/img_XXXX.png``."""
    root = Path(root)
    class_dirs = class_dirs or ["gray_leaf_spot", "common_rust", "northern_leaf_blight", "healthy"]
    for d in class_dirs:
        (root / d).mkdir(parents=True, exist_ok=True)
    for i, (img, label) in enumerate(zip(images, labels)):
        arr = np.round(np.clip(img, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(arr).save(root / class_dirs[int(label)] / f"img_{i:04d}.png")
    return root
