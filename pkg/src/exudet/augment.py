"""Fundus image augmentation: flip, rotate, brightness, blur, dataset assembly.

Images are RGB uint8 [H, W, 3] arrays at rest.  Transforms convert to float
[0, 1], do their math, then quantize back with round-half-even and clamping,
so every output is a valid 8-bit image.  All transforms preserve dimensions
and are pure functions of (pixels, parameters, derived seed).

Vertical flips are deliberately not offered: mirroring a fundus image across
the horizontal axis mostly duplicates information the horizontal flip and
rotations already provide.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, FormatError

MANIFEST_HEADER = ["out_path", "src_path", "label", "ops", "seed"]

OP_KINDS = ("hflip", "rotate", "brightness", "blur")


def to_unit(img: np.ndarray) -> np.ndarray:
    """uint8 [H,W,3] -> float64 in [0,1]."""
    return img.astype(np.float64) / 255.0


def quantize(unit: np.ndarray) -> np.ndarray:
    """float [0,1-ish] -> uint8 with clamping and banker's rounding."""
    return np.clip(np.rint(unit * 255.0), 0, 255).astype(np.uint8)


def _check_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise DataError(f"expected RGB uint8 [H,W,3] image, got {img.dtype} {img.shape}")
    return img


def hflip(img: np.ndarray) -> np.ndarray:
    """Mirror across the vertical axis; bit-exact involution."""
    return np.ascontiguousarray(_check_image(img)[:, ::-1])


def rotate(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center, positive angles counter-clockwise.

    Inverse-mapped bilinear interpolation; samples falling outside the source
    are filled black (the natural fundus surround).  Output dimensions equal
    the input's.  At multiples of 90 degrees on square images the result is
    an exact pixel permutation.
    """
    img = _check_image(img)
    if not -180 < degrees <= 180:
        raise ConfigError(f"rotation must lie in (-180, 180], got {degrees}")
    h, w = img.shape[:2]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    theta = math.radians(degrees)
    c, s = math.cos(theta), math.sin(theta)
    yd, xd = np.mgrid[0:h, 0:w]
    dxd, dyd = xd - cx, yd - cy
    xs = cx + c * dxd - s * dyd
    ys = cy + s * dxd + c * dyd

    x0 = np.floor(xs).astype(np.int64)
    y0 = np.floor(ys).astype(np.int64)
    fx = xs - x0
    fy = ys - y0

    unit = to_unit(img)
    out = np.zeros((h, w, 3), dtype=np.float64)
    for dy, dx, weight in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yy, xx = y0 + dy, x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = unit[yy.clip(0, h - 1), xx.clip(0, w - 1)]
        out += np.where(valid[..., None], vals, 0.0) * weight[..., None]
    return quantize(out)


def brightness(img: np.ndarray, factor: float) -> np.ndarray:
    """Multiplicative brightness scaling in linear [0,1] space, clamped."""
    img = _check_image(img)
    if factor <= 0:
        raise ConfigError(f"brightness factor must be positive, got {factor}")
    return quantize(to_unit(img) * factor)


def gaussian_kernel(radius: int) -> np.ndarray:
    """Normalized 1-D Gaussian, sigma = radius/2, support 2*radius + 1."""
    if radius < 1:
        raise ConfigError(f"blur radius must be >= 1, got {radius}")
    sigma = radius / 2.0
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-(t ** 2) / (2.0 * sigma ** 2))
    return k / k.sum()


def gaussian_blur(img: np.ndarray, radius: int) -> np.ndarray:
    """Separable Gaussian blur with edge replication at the borders.

    The kernel is a convex combination, so blurring never widens the
    pixel-value range: per-channel minima cannot drop, maxima cannot rise.
    """
    img = _check_image(img)
    radius = int(radius)
    kernel = gaussian_kernel(radius)
    out = to_unit(img)
    for axis in (0, 1):
        pad = [(0, 0)] * 3
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="edge")
        windows = np.lib.stride_tricks.sliding_window_view(
            padded, 2 * radius + 1, axis=axis)
        out = windows @ kernel
    return quantize(out)


# --- ops and recipes ----------------------------------------------------------


@dataclass(frozen=True)
class AugmentOp:
    """One parameterized transform: hflip | rotate | brightness | blur."""

    kind: str
    value: Optional[float] = None

    def __post_init__(self):
        if self.kind not in OP_KINDS:
            raise ConfigError(f"unknown augment op {self.kind!r}, want one of {OP_KINDS}")
        if self.kind == "hflip":
            if self.value is not None:
                raise ConfigError("hflip takes no parameter")
        elif self.value is None:
            raise ConfigError(f"{self.kind} needs a parameter")
        elif self.kind == "rotate" and not -180 < self.value <= 180:
            raise ConfigError(f"rotation must lie in (-180, 180], got {self.value}")
        elif self.kind == "brightness" and self.value <= 0:
            raise ConfigError(f"brightness factor must be positive, got {self.value}")
        elif self.kind == "blur":
            if self.value != int(self.value) or self.value < 1:
                raise ConfigError(f"blur radius must be an integer >= 1, got {self.value}")

    def apply(self, img: np.ndarray) -> np.ndarray:
        if self.kind == "hflip":
            return hflip(img)
        if self.kind == "rotate":
            return rotate(img, self.value)
        if self.kind == "brightness":
            return brightness(img, self.value)
        return gaussian_blur(img, int(self.value))

    def spec_str(self) -> str:
        """Compact form used in manifests: 'hflip', 'rotate(-20)', 'blur(3)'."""
        if self.kind == "hflip":
            return "hflip"
        return f"{self.kind}({self.value:g})"

    def slug(self) -> str:
        if self.kind == "hflip":
            return "hflip"
        short = {"rotate": "rot", "brightness": "br", "blur": "blur"}[self.kind]
        return f"{short}{self.value:g}"


def parse_op(text: str) -> AugmentOp:
    """Inverse of :meth:`AugmentOp.spec_str`."""
    text = text.strip()
    if text == "hflip":
        return AugmentOp("hflip")
    if text.endswith(")") and "(" in text:
        kind, _, arg = text[:-1].partition("(")
        try:
            return AugmentOp(kind, float(arg))
        except (ValueError, ConfigError) as exc:
            raise FormatError(f"bad augment op {text!r}: {exc}") from exc
    raise FormatError(f"bad augment op {text!r}")


def parse_ops(text: str) -> list:
    """Parse a ';'-joined op chain; '' means the untouched original."""
    if not text:
        return []
    return [parse_op(part) for part in text.split(";")]


def apply_chain(img: np.ndarray, ops: Sequence[AugmentOp]) -> np.ndarray:
    for op in ops:
        img = op.apply(img)
    return img


@dataclass(frozen=True)
class RecipeEntry:
    op: AugmentOp
    probability: float = 1.0

    def __post_init__(self):
        if not 0 <= self.probability <= 1:
            raise ConfigError(f"probability must lie in [0,1], got {self.probability}")


@dataclass(frozen=True)
class Recipe:
    """Ordered variant generators; each entry fires independently per sample."""

    entries: tuple

    def __init__(self, entries: Iterable[RecipeEntry]):
        object.__setattr__(self, "entries", tuple(entries))

    def expected_outputs_per_input(self) -> float:
        """Mean emitted images per source, the original included."""
        return 1.0 + sum(e.probability for e in self.entries)


def default_recipe(*, brightness_factors=(1.38, 1.20), blur_radius: int = 3,
                   probability: float = 0.7) -> Recipe:
    """Flip, four rotations, two brightness levels, one blur.

    At the default probability each source yields 6.6 outputs on average
    (original plus eight chances at 0.7), so 500 inputs grow to roughly
    3,300 images.
    """
    ops = [
        AugmentOp("hflip"),
        AugmentOp("rotate", 45.0),
        AugmentOp("rotate", -45.0),
        AugmentOp("rotate", 20.0),
        AugmentOp("rotate", -20.0),
        AugmentOp("brightness", brightness_factors[0]),
        AugmentOp("brightness", brightness_factors[1]),
        AugmentOp("blur", float(blur_radius)),
    ]
    return Recipe(RecipeEntry(op, probability) for op in ops)


def sample_seed(global_seed: int, index: int) -> int:
    """Stable per-sample seed; independent of iteration order."""
    return int(np.random.SeedSequence((global_seed, index)).generate_state(1)[0])


@dataclass(frozen=True)
class PlannedOutput:
    index: int           # source position in the input listing
    entry_index: int     # -1 for the passthrough original
    ops: tuple           # () for the original
    seed: int


def plan_augmentation(n_sources: int, recipe: Recipe, seed: int) -> list:
    """Decide, without touching any pixels, which variants will be emitted.

    Each source always contributes its original; recipe entries fire on
    independent Bernoulli draws from the per-sample stream, so the plan for
    one sample never depends on how many other samples exist.
    """
    if n_sources < 1:
        raise DataError("cannot augment an empty dataset")
    plan = []
    for i in range(n_sources):
        s = sample_seed(seed, i)
        rng = np.random.default_rng(s)
        plan.append(PlannedOutput(i, -1, (), s))
        for j, entry in enumerate(recipe.entries):
            fire = rng.random() < entry.probability
            if fire:
                plan.append(PlannedOutput(i, j, (entry.op,), s))
    return plan


def _out_name(index: int, src_path: str, planned: PlannedOutput) -> str:
    stem = Path(src_path).stem
    if planned.entry_index < 0:
        return f"{index:05d}_{stem}_orig.png"
    slug = "-".join(op.slug() for op in planned.ops)
    return f"{index:05d}_{stem}_{planned.entry_index:02d}_{slug}.png"


def build_augmented_dataset(items: Sequence, recipe: Recipe, seed: int,
                            out_dir: str) -> list:
    """Write originals plus per-recipe variants as PNGs; return manifest rows.

    ``items`` is a sequence of (path, label) pairs.  The manifest (also
    written to ``out_dir/manifest.csv``) has one row per emitted image:
    ``out_path,src_path,label,ops,seed`` with ops as a ';'-joined chain, ''
    for the untouched original.  A source that cannot be decoded is skipped
    and recorded as a row with an empty out_path and ``error:<reason>`` in
    the ops column.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    plan = plan_augmentation(len(items), recipe, seed)
    by_index: dict = {}
    for planned in plan:
        by_index.setdefault(planned.index, []).append(planned)

    rows = []
    for i, (src_path, label) in enumerate(items):
        try:
            with Image.open(src_path) as decoded:
                img = np.asarray(decoded.convert("RGB"))
        except (OSError, ValueError) as exc:
            rows.append(["", str(src_path), int(label),
                         f"error:{exc.__class__.__name__}", sample_seed(seed, i)])
            continue
        for planned in by_index[i]:
            result = apply_chain(img, planned.ops)
            name = _out_name(i, str(src_path), planned)
            Image.fromarray(result, "RGB").save(out / name)
            ops_text = ";".join(op.spec_str() for op in planned.ops)
            rows.append([name, str(src_path), int(label), ops_text, planned.seed])

    with open(out / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    return rows
