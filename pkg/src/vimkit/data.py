"""Class-per-folder image datasets, preprocessing, stratified splits and batching.

Also hosts the synthetic six-pattern generator used as a desk-scale stand-in
for the MRI corpus.
"""

from __future__ import annotations

import logging
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .tensor import Tensor, get_dtype

log = logging.getLogger(__name__)

__all__ = [
    "Item",
    "LabeledDataset",
    "SplitSpec",
    "DatasetError",
    "IMAGE_EXTENSIONS",
    "PATTERNS",
    "load_dataset",
    "read_image",
    "to_three_channel",
    "resize_bilinear",
    "preprocess",
    "stratified_split",
    "split_counts",
    "batches",
    "generate_synthetic",
    "save_dataset",
    "write_split_manifest",
    "read_split_manifest",
]

IMAGE_EXTENSIONS = (".png", ".pgm", ".bmp")


class DatasetError(ValueError):
    pass


class Item(NamedTuple):
    source: object  # path on disk or an in-memory 2D grayscale array
    label: int
    sample_id: str  # path relative to the dataset root, e.g. "glioma/0001.png"


@dataclass
class LabeledDataset:
    items: list[Item]
    class_names: list[str]
    source_dir: str | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        k = len(self.class_names)
        for it in self.items:
            if not 0 <= it.label < k:
                raise DatasetError(f"{it.sample_id}: label {it.label} outside [0, {k})")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def labels(self) -> np.ndarray:
        return np.array([it.label for it in self.items], dtype=np.int64)

    def subset(self, indices: Sequence[int]) -> "LabeledDataset":
        return LabeledDataset([self.items[i] for i in indices], list(self.class_names), self.source_dir)

    def class_counts(self) -> list[int]:
        return np.bincount(self.labels, minlength=self.num_classes).tolist()

    def arrays(self, image_size: int) -> tuple[np.ndarray, np.ndarray]:
        """All images preprocessed to ``[N, 3, S, S]`` plus labels; memoised per size."""
        key = (image_size, np.dtype(get_dtype()).str)
        if key not in self._cache:
            if self.items:
                imgs = np.stack([preprocess_array(it.source, image_size) for it in self.items])
            else:
                imgs = np.zeros((0, 3, image_size, image_size), dtype=get_dtype())
            self._cache[key] = (imgs.astype(get_dtype(), copy=False), self.labels)
        return self._cache[key]


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(not 0.0 <= r <= 1.0 for r in self.ratios):
            raise ValueError(f"split ratios must be three values in [0, 1], got {self.ratios}")
        if abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must sum to 1, got {sum(self.ratios)!r}")


# --------------------------------------------------------------------------
# Loading
# --------------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    """Read an 8- or 16-bit grayscale image as a 2D array (uint8 or uint16)."""
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L", "I"):
                arr = np.array(im)
                return arr.astype(np.uint16) if arr.max(initial=0) <= 65535 else arr
            if im.mode != "L":
                im = im.convert("L")
            return np.array(im, dtype=np.uint8)
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DatasetError(f"unreadable image: {path} ({exc})") from exc


def load_dataset(root) -> LabeledDataset:
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset directory not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise DatasetError(f"{root}: no class folders")
    items: list[Item] = []
    for label, cdir in enumerate(class_dirs):
        files = sorted(p for p in cdir.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_EXTENSIONS)
        if not files:
            raise DatasetError(f"{cdir}: class folder contains no images")
        for f in files:
            try:
                with Image.open(f) as im:
                    im.verify()
            except Exception as exc:
                raise DatasetError(f"unreadable image: {f} ({exc})") from exc
            items.append(Item(str(f), label, f.relative_to(root).as_posix()))
    return LabeledDataset(items, [p.name for p in class_dirs], str(root))


# --------------------------------------------------------------------------
# Preprocessing
# --------------------------------------------------------------------------


def to_three_channel(gray) -> Tensor:
    arr = gray.data if isinstance(gray, Tensor) else np.asarray(gray)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ValueError(f"to_three_channel expects a single-channel image, got shape {arr.shape}")
    return Tensor(np.broadcast_to(arr, (3,) + arr.shape))


def resize_bilinear(img: np.ndarray, size: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a 2D float array to ``size x size``."""
    h, w = img.shape
    if h == 0 or w == 0:
        raise ValueError("cannot resize a zero-area image")
    if (h, w) == (size, size):
        return img.copy()

    def coords(n_src):
        if size == 1 or n_src == 1:
            pos = np.zeros(size)
        else:
            pos = np.arange(size) * ((n_src - 1) / (size - 1))
        lo = np.minimum(np.floor(pos).astype(int), n_src - 1)
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(h)
    x0, x1, fx = coords(w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def _to_unit(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img.astype(np.float64) / 255.0
    if img.dtype == np.uint16:
        return img.astype(np.float64) / 65535.0
    if np.issubdtype(img.dtype, np.integer):
        return img.astype(np.float64) / max(1, int(img.max(initial=0)))
    return np.clip(img.astype(np.float64), 0.0, 1.0)


def preprocess_array(img, image_size: int) -> np.ndarray:
    arr = read_image(img) if isinstance(img, (str, os.PathLike)) else np.asarray(img)
    if arr.ndim != 2:
        raise ValueError(f"expected a 2D grayscale image, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError("cannot preprocess a zero-area image")
    return to_three_channel(resize_bilinear(_to_unit(arr), image_size)).data


def preprocess(img, cfg) -> Tensor:
    """Resize to the model's image size, scale to [0, 1], replicate to three channels.

    ``cfg`` is a ``VimConfig`` or a plain integer size.
    """
    return Tensor(preprocess_array(img, getattr(cfg, "image_size", cfg)))


# --------------------------------------------------------------------------
# Splitting and batching
# --------------------------------------------------------------------------


def split_counts(n: int, ratios: Sequence[float]) -> tuple[int, int, int]:
    """(train, val, test) sizes: floor for val and test, remainder to train."""
    n_val = math.floor(ratios[1] * n + 1e-9)
    n_test = math.floor(ratios[2] * n + 1e-9)
    return n - n_val - n_test, n_val, n_test


def stratified_split(ds: LabeledDataset, spec: SplitSpec):
    labels = ds.labels
    parts: list[list[int]] = [[], [], []]
    for c in range(ds.num_classes):
        idx = np.flatnonzero(labels == c)
        if idx.size == 0:
            raise DatasetError(f"class {ds.class_names[c]!r} has no items")
        rng = np.random.default_rng([spec.seed, c])
        idx = idx[rng.permutation(idx.size)]
        n_train, n_val, n_test = split_counts(idx.size, spec.ratios)
        if (n_val == 0 and spec.ratios[1] > 0) or (n_test == 0 and spec.ratios[2] > 0):
            log.warning(
                "class %r with %d items leaves an empty val/test partition", ds.class_names[c], idx.size
            )
        parts[1].extend(idx[:n_val].tolist())
        parts[2].extend(idx[n_val : n_val + n_test].tolist())
        parts[0].extend(idx[n_val + n_test :].tolist())
    return tuple(ds.subset(sorted(p)) for p in parts)


def batches(
    ds: LabeledDataset, batch_size: int, seed: int, epoch: int, image_size: int, shuffle: bool = True
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(images [B,3,S,S], labels [B])`` in an order fixed by ``(seed, epoch)``."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    images, labels = ds.arrays(image_size)
    n = len(labels)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for s in range(0, n, batch_size):
        idx = order[s : s + batch_size]
        yield images[idx], labels[idx]


# --------------------------------------------------------------------------
# Split manifest (relative_path \t class_index \t partition)
# --------------------------------------------------------------------------

PARTITIONS = ("train", "val", "test")


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_split_manifest(path, splits, class_names: Sequence[str], root=None) -> None:
    lines = []
    if root is not None:
        lines.append(f"#root\t{Path(root).resolve()}")
    lines.append("#classes\t" + "\t".join(class_names))
    rows = []
    for part, ds in zip(PARTITIONS, splits):
        rows.extend((it.sample_id, it.label, part) for it in ds.items)
    rows.sort()
    lines.extend(f"{sid}\t{label}\t{part}" for sid, label, part in rows)
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_split_manifest(path, root=None) -> dict[str, LabeledDataset]:
    """Parse a split manifest into ``{"train": ds, "val": ds, "test": ds}``."""
    class_names: list[str] | None = None
    stored_root = None
    rows: dict[str, list[Item]] = {p: [] for p in PARTITIONS}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#root\t"):
                stored_root = line.split("\t", 1)[1]
                continue
            if line.startswith("#classes\t"):
                class_names = line.split("\t")[1:]
                continue
            if line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3 or parts[2] not in rows:
                raise DatasetError(f"{path}:{lineno}: malformed manifest row {line!r}")
            try:
                label = int(parts[1])
            except ValueError:
                raise DatasetError(f"{path}:{lineno}: bad class index {parts[1]!r}") from None
            rows[parts[2]].append(Item(parts[0], label, parts[0]))
    base = root if root is not None else stored_root
    if base is None:
        raise DatasetError(f"{path}: no dataset root recorded; pass one explicitly")
    if class_names is None:
        k = 1 + max((it.label for items in rows.values() for it in items), default=0)
        class_names = [str(i) for i in range(k)]
    out = {}
    for part, items in rows.items():
        resolved = [Item(str(Path(base) / it.sample_id), it.label, it.sample_id) for it in items]
        out[part] = LabeledDataset(resolved, list(class_names), str(base))
    return out


# --------------------------------------------------------------------------
# Synthetic patterns
# --------------------------------------------------------------------------

PATTERNS = ("hstripes", "vstripes", "disk", "checker", "diagonal", "ring")

# jitter distributions for the two synthetic variants used by transfer experiments
_VARIANTS = {
    "A": dict(period=(6.0, 10.0), phase=(0.0, 1.0), offset=3.0, noise=0.10, contrast=(0.6, 1.0)),
    "B": dict(period=(8.0, 13.0), phase=(0.25, 0.75), offset=5.0, noise=0.15, contrast=(0.45, 0.9)),
}


def _pattern(kind: str, size: int, rng: np.random.Generator, jit: dict) -> np.ndarray:
    period = rng.uniform(*jit["period"])
    phase = rng.uniform(*jit["phase"]) * 2 * np.pi
    cy, cx = (size - 1) / 2 + rng.uniform(-jit["offset"], jit["offset"], 2)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    w = 2 * np.pi / period
    if kind == "hstripes":
        v = 0.5 + 0.5 * np.sin(w * yy + phase)
    elif kind == "vstripes":
        v = 0.5 + 0.5 * np.sin(w * xx + phase)
    elif kind == "disk":
        r = size * rng.uniform(0.2, 0.32)
        v = 1.0 / (1.0 + np.exp((np.hypot(yy - cy, xx - cx) - r) / 0.8))
    elif kind == "checker":
        v = 0.5 + 0.5 * np.sign(np.sin(w * xx + phase) * np.sin(w * yy + phase))
    elif kind == "diagonal":
        angle = rng.uniform(np.pi / 8, 3 * np.pi / 8)
        t = (np.cos(angle) * (xx - cx) + np.sin(angle) * (yy - cy)) / size
        v = np.clip(0.5 + t, 0.0, 1.0)
    elif kind == "ring":
        r = size * rng.uniform(0.22, 0.34)
        v = np.exp(-((np.hypot(yy - cy, xx - cx) - r) ** 2) / (2 * 1.5**2))
    else:
        raise ValueError(f"unknown pattern {kind!r}")
    lo, hi = jit["contrast"]
    amp = rng.uniform(lo, hi)
    base = rng.uniform(0.0, 1.0 - amp)
    return base + amp * v


def generate_synthetic(
    num_classes: int = 6, per_class: int = 50, image_size: int = 32, seed: int = 0, variant: str = "A"
) -> LabeledDataset:
    """Deterministic 8-bit grayscale pattern images, one pattern family per class."""
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    if not 2 <= num_classes <= len(PATTERNS):
        raise ValueError(f"num_classes must be in [2, {len(PATTERNS)}]")
    if variant not in _VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(_VARIANTS)}")
    jit = _VARIANTS[variant]
    rng = np.random.default_rng(seed)
    names = [f"{c}_{PATTERNS[c]}" for c in range(num_classes)]
    items = []
    for c in range(num_classes):
        for i in range(per_class):
            img = _pattern(PATTERNS[c], image_size, rng, jit)
            img = img + rng.normal(0.0, jit["noise"], img.shape)
            arr = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
            items.append(Item(arr, c, f"{names[c]}/{i:05d}.png"))
    return LabeledDataset(items, names, None)


def save_dataset(ds: LabeledDataset, out_dir) -> int:
    """Write in-memory items as PNG files under ``out_dir/<sample_id>``."""
    out = Path(out_dir)
    n = 0
    for it in ds.items:
        target = out / it.sample_id
        target.parent.mkdir(parents=True, exist_ok=True)
        arr = np.asarray(it.source) if not isinstance(it.source, (str, os.PathLike)) else read_image(it.source)
        Image.fromarray(arr).save(target)
        n += 1
    return n
