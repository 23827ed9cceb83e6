"""Dataset ingestion: label CSVs, decoding/resizing, splits, batch iteration.

Labels arrive as a CSV with header ``image,grade`` (5-level retinopathy
grades, binarized here) or ``image,label`` (already 0/1).  Decoded images are
bilinearly resized to the network's input resolution and scaled to [0,1];
no mean/std normalization is applied unless explicitly requested.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, FormatError

SPLIT_NAMES = ("train", "val", "test")
SPLIT_MANIFEST_HEADER = ["path", "label", "split"]

NORMAL, EXUDATE = 0, 1


def binarize_grade(grade: int) -> int:
    """Collapse 0-4 retinopathy grades to binary: 0 stays Normal, 1-4 are Exudate."""
    if not 0 <= grade <= 4:
        raise DataError(f"grade must lie in 0..4, got {grade}")
    return NORMAL if grade == 0 else EXUDATE


@dataclass
class LabeledImage:
    """A decoded, resized sample: [3,H,W] float pixels in [0,1] plus its label."""

    path: str
    chw: np.ndarray
    label: int


def read_labels_csv(path: str) -> list:
    """Parse a labels CSV into (image name, binary label) pairs.

    The header decides the label convention: ``image,grade`` rows are run
    through :func:`binarize_grade`; ``image,label`` rows must already be 0/1.
    Any malformed row raises :class:`FormatError` naming the 1-based line.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, expected a header row") from None
        header = [col.strip().lower() for col in header]
        if header == ["image", "grade"]:
            graded = True
        elif header == ["image", "label"]:
            graded = False
        else:
            raise FormatError(
                f"{path}:1: header must be image,grade or image,label, got {','.join(header)}")
        pairs = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise FormatError(f"{path}:{lineno}: expected 2 columns, got {len(row)}")
            name, raw = row[0].strip(), row[1].strip()
            try:
                value = int(raw)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: non-integer label {raw!r}") from None
            try:
                label = binarize_grade(value) if graded else _check_binary(value)
            except DataError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            pairs.append((name, label))
    return pairs


def _check_binary(label: int) -> int:
    if label not in (0, 1):
        raise DataError(f"label must be 0 or 1, got {label}")
    return label


def decode_image(path: str, size=(224, 224)) -> np.ndarray:
    """Decode PNG/JPEG, bilinear-resize, return [3,H,W] float32 in [0,1]."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB").resize((size[1], size[0]), Image.BILINEAR)
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load image {path}: {exc}") from exc
    hwc = np.asarray(rgb, dtype=np.float32) / 255.0
    return np.ascontiguousarray(hwc.transpose(2, 0, 1))


def load_dataset(labels_csv: str, image_root: str, *, size=(224, 224),
                 standardize: bool = False) -> list:
    """Materialize every row of a labels CSV as a :class:`LabeledImage`.

    With ``standardize`` each image is additionally shifted/scaled to
    zero mean and unit variance per channel (leaving the [0,1] convention).
    """
    root = Path(image_root)
    items = []
    for name, label in read_labels_csv(labels_csv):
        chw = decode_image(str(root / name), size=size)
        if standardize:
            mean = chw.mean(axis=(1, 2), keepdims=True)
            std = chw.std(axis=(1, 2), keepdims=True)
            chw = (chw - mean) / (std + 1e-8)
        items.append(LabeledImage(path=str(root / name), chw=chw, label=label))
    return items


# --- splitting ----------------------------------------------------------------


@dataclass
class SplitDataset:
    train: list
    val: list
    test: list
    fractions: tuple
    seed: int

    def counts(self) -> tuple:
        return len(self.train), len(self.val), len(self.test)

    def part(self, name: str) -> list:
        if name not in SPLIT_NAMES:
            raise ConfigError(f"split must be one of {SPLIT_NAMES}, got {name!r}")
        return getattr(self, name)


def _largest_remainder(n: int, fractions: Sequence[float]) -> list:
    """Apportion n items over fractions, rounding leftovers to the largest
    fractional remainders (earlier splits win ties)."""
    quotas = [n * f for f in fractions]
    base = [int(q) for q in quotas]
    leftovers = n - sum(base)
    order = sorted(range(len(fractions)),
                   key=lambda i: (-(quotas[i] - base[i]), i))
    for i in order[:leftovers]:
        base[i] += 1
    return base


def stratified_split(items: Sequence, fractions=(0.7, 0.2, 0.1), seed: int = 0, *,
                     stratify: bool = True, allow_empty: bool = False,
                     label_of: Callable = lambda item: item.label) -> SplitDataset:
    """Shuffle and partition into train/val/test with class balance preserved.

    Each class is shuffled with its own seed-derived stream and apportioned
    by largest-remainder rounding, so 250 items at (0.7, 0.2, 0.1) land
    exactly 175/50/25.  ``stratify=False`` shuffles and apportions the pool
    as a whole (class balance then drifts with the draw).  Unless
    ``allow_empty`` is set, a split ending up empty for any class is a
    configuration error.
    """
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or any(f < 0 for f in fractions):
        raise ConfigError(f"need three non-negative fractions, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)}")

    if stratify:
        groups: dict = {}
        for item in items:
            groups.setdefault(label_of(item), []).append(item)
        group_keys = sorted(groups)
    else:
        groups = {None: list(items)}
        group_keys = [None]

    parts: tuple = ([], [], [])
    for key in group_keys:
        members = groups[key]
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0 if key is None else key)))
        order = rng.permutation(len(members))
        counts = _largest_remainder(len(members), fractions)
        if not allow_empty and min(counts) == 0:
            raise ConfigError(
                f"class {key!r} with {len(members)} items cannot fill fractions "
                f"{fractions}; pass allow_empty to permit empty splits")
        offset = 0
        for part, count in zip(parts, counts):
            part.extend(members[i] for i in order[offset:offset + count])
            offset += count
    return SplitDataset(train=parts[0], val=parts[1], test=parts[2],
                        fractions=fractions, seed=seed)


def write_split_manifest(split: SplitDataset, dest: str,
                         path_of: Callable = lambda item: item.path,
                         label_of: Callable = lambda item: item.label) -> None:
    """Audit CSV: one ``path,label,split`` row per item, split order fixed."""
    with open(dest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SPLIT_MANIFEST_HEADER)
        for name in SPLIT_NAMES:
            for item in split.part(name):
                writer.writerow([path_of(item), label_of(item), name])


def read_split_manifest(path: str) -> dict:
    """Read a split manifest back as {split name: [(path, label), ...]}."""
    out: dict = {name: [] for name in SPLIT_NAMES}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip().lower() for c in header] != SPLIT_MANIFEST_HEADER:
            raise FormatError(f"{path}:1: expected header path,label,split")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3 or row[2] not in SPLIT_NAMES:
                raise FormatError(f"{path}:{lineno}: bad split row {row!r}")
            try:
                label = _check_binary(int(row[1]))
            except (ValueError, DataError):
                raise FormatError(f"{path}:{lineno}: bad label {row[1]!r}") from None
            out[row[2]].append((row[0], label))
    return out


# --- batching -----------------------------------------------------------------


def batch_iter(items: Sequence, batch_size: int = 32, seed: int = 0,
               epoch: int = 0, dtype=np.float32) -> Iterator:
    """Yield (pixels [N,3,H,W], labels [N]) batches in a seeded per-epoch order.

    The shuffle depends only on (seed, epoch); the final short batch is
    emitted rather than dropped, so each item appears exactly once per epoch.
    """
    if not len(items):
        raise DataError("cannot iterate an empty split")
    if batch_size < 1:
        raise ConfigError(f"batch size must be >= 1, got {batch_size}")
    rng = np.random.default_rng(np.random.SeedSequence((seed, epoch)))
    order = rng.permutation(len(items))
    for start in range(0, len(items), batch_size):
        chunk = order[start:start + batch_size]
        x = np.stack([items[i].chw for i in chunk]).astype(dtype, copy=False)
        y = np.array([items[i].label for i in chunk], dtype=np.int64)
        yield x, y
