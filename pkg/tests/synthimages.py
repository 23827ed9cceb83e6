"""Synthetic test images: a near-black background with bright yellow
Gaussian blobs injected for the positive (Exudate) class; the negative
(Normal) class is background only.

The images are smooth by construction (gentle gradients and Gaussian
spots, no pixel noise), which matters for the interpolation-error
oracles, and the two classes are separable enough for the end-to-end
training checks to converge quickly.
"""

from pathlib import Path

import numpy as np
from PIL import Image

from exudet.dataio import LabeledImage


def blob_image(rng: np.random.Generator, size: int = 224,
               exudate: bool = False) -> np.ndarray:
    """One RGB uint8 [size, size, 3] image; exudate=True injects blobs."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    base = rng.uniform(0.02, 0.06)
    tilt_y, tilt_x = rng.uniform(-0.03, 0.03, 2)
    background = base + tilt_y * (yy / size - 0.5) + tilt_x * (xx / size - 0.5)
    img = np.repeat(background[..., None], 3, axis=2)
    img[..., 2] *= 0.6  # slightly warm backdrop

    if exudate:
        for _ in range(int(rng.integers(2, 5))):
            by = rng.uniform(0.2, 0.8) * size
            bx = rng.uniform(0.2, 0.8) * size
            sigma = rng.uniform(0.04, 0.08) * size
            blob = np.exp(-((yy - by) ** 2 + (xx - bx) ** 2) / (2 * sigma ** 2))
            img[..., 0] += 0.85 * blob
            img[..., 1] += 0.80 * blob
            img[..., 2] += 0.10 * blob

    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)


def make_items(n: int, size: int = 224, seed: int = 0) -> list:
    """n in-memory LabeledImages with alternating labels (balanced)."""
    rng = np.random.default_rng(seed)
    items = []
    for i in range(n):
        label = i % 2
        hwc = blob_image(rng, size=size, exudate=bool(label))
        chw = np.ascontiguousarray(hwc.astype(np.float32).transpose(2, 0, 1) / 255.0)
        items.append(LabeledImage(path=f"synthetic-{i}", chw=chw, label=label))
    return items


def write_corpus(directory, n: int, size: int = 96, seed: int = 0) -> str:
    """Write n PNGs plus a labels.csv (image,label header); returns CSV path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    rows = ["image,label"]
    for i in range(n):
        label = i % 2
        name = f"blob_{i:03d}.png"
        Image.fromarray(blob_image(rng, size=size, exudate=bool(label)), "RGB").save(
            directory / name)
        rows.append(f"{name},{label}")
    csv_path = directory / "labels.csv"
    csv_path.write_text("\n".join(rows) + "\n")
    return str(csv_path)
