"""Synthetic shapes dataset with an exact class-color palette, plus metrics.

Images are flat palette colors per class region with a low-amplitude seeded
texture, quantized to 8 bits so the on-disk and in-memory pipelines agree
bit for bit. Because palette colors are well separated, nearest-color lookup
recovers the exact class map from any image perturbed by less than half the
minimum palette separation; that makes mIoU an exact metric here instead of
depending on a pretrained segmenter.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import pnm

MIN_PALETTE_SEPARATION = 0.3

# background + four body colors, pairwise L2 >= 0.3 in [0,1]^3
DEFAULT_PALETTE = (
    (0.10, 0.10, 0.12),  # 0: background, near-black
    (0.90, 0.15, 0.15),  # 1: red
    (0.10, 0.80, 0.20),  # 2: green
    (0.20, 0.30, 0.90),  # 3: blue
    (0.95, 0.85, 0.10),  # 4: yellow
)


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class ShapesSpec:
    canvas: int = 32
    palette: tuple = DEFAULT_PALETTE
    shape_types: tuple = ("rectangle", "disk")
    shapes_min: int = 1
    shapes_max: int = 3
    texture_amplitude: float = 0.05
    seed: int = 0

    def __post_init__(self):
        pal = np.asarray(self.palette, dtype=np.float64)
        if pal.ndim != 2 or pal.shape[1] != 3:
            raise DataError(f"palette must be K x 3, got {pal.shape}")
        for i in range(len(pal)):
            for j in range(i + 1, len(pal)):
                d = float(np.linalg.norm(pal[i] - pal[j]))
                if d < MIN_PALETTE_SEPARATION:
                    raise DataError(
                        f"palette colors {i} and {j} separated by {d:.3f} "
                        f"< {MIN_PALETTE_SEPARATION}")
        if not 1 <= self.shapes_min <= self.shapes_max:
            raise DataError(f"bad shape count range [{self.shapes_min}, {self.shapes_max}]")

    @property
    def num_classes(self):
        return len(self.palette)

    @property
    def palette_array(self):
        return np.asarray(self.palette, dtype=np.float64)

    @property
    def separation_radius(self):
        pal = self.palette_array
        dists = [np.linalg.norm(pal[i] - pal[j])
                 for i in range(len(pal)) for j in range(i + 1, len(pal))]
        return 0.5 * min(dists)


def _paint_shape(cmap, rng, spec):
    h = w = spec.canvas
    cls = int(rng.integers(1, spec.num_classes))
    kind = spec.shape_types[int(rng.integers(0, len(spec.shape_types)))]
    if kind == "rectangle":
        sh = int(rng.integers(h // 4, h // 2 + 1))
        sw = int(rng.integers(w // 4, w // 2 + 1))
        top = int(rng.integers(0, h - sh + 1))
        left = int(rng.integers(0, w - sw + 1))
        cmap[top:top + sh, left:left + sw] = cls
    else:
        r = int(rng.integers(h // 6, h // 3))
        cy = int(rng.integers(r, h - r))
        cx = int(rng.integers(r, w - r))
        yy, xx = np.ogrid[:h, :w]
        cmap[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = cls


def generate_shapes(spec, n):
    """n pixel-aligned (image, class map) pairs; image is float32 [3, H, W] in [0, 1]."""
    if n < 1:
        raise DataError(f"need n >= 1, got {n}")
    rng = np.random.default_rng(spec.seed)
    pal = spec.palette_array
    pairs = []
    for _ in range(n):
        cmap = np.zeros((spec.canvas, spec.canvas), dtype=np.int32)
        for _ in range(int(rng.integers(spec.shapes_min, spec.shapes_max + 1))):
            _paint_shape(cmap, rng, spec)
        img = pal[cmap].transpose(2, 0, 1)
        if spec.texture_amplitude > 0:
            img = img + rng.uniform(-spec.texture_amplitude, spec.texture_amplitude,
                                    size=img.shape)
        # quantize so files and memory carry identical values
        img = np.clip(np.round(np.clip(img, 0.0, 1.0) * 255.0), 0, 255) / 255.0
        pairs.append((img.astype(np.float32), cmap))
    return pairs


def recover_map(image, palette):
    """Nearest palette color per pixel (L2), ties to the lower class id."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise DataError(f"image must be 3 x H x W, got {img.shape}")
    if img.min() < 0.0 or img.max() > 1.0:
        raise DataError("image values must lie in [0, 1]")
    pal = np.asarray(palette, dtype=np.float64)
    d2 = np.sum((img[None, ...] - pal[:, :, None, None]) ** 2, axis=1)
    return np.argmin(d2, axis=0).astype(np.int32)  # argmin takes the first (lower) id


def miou(pred, ref, classes=None):
    """Mean IoU over classes present in pred or ref (others excluded)."""
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise DataError(f"map shapes differ: {pred.shape} vs {ref.shape}")
    if classes is None:
        classes = np.union1d(np.unique(pred), np.unique(ref))
    ious = []
    for c in classes:
        p = pred == c
        r = ref == c
        union = np.logical_or(p, r).sum()
        if union == 0:
            continue
        ious.append(np.logical_and(p, r).sum() / union)
    return float(np.mean(ious)) if ious else 1.0


PSNR_IDENTICAL = float("inf")


def pixel_metrics(a, b):
    """(MSE, empirical PSNR in dB); identical images report an inf sentinel."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DataError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return 0.0, PSNR_IDENTICAL
    return mse, float(10.0 * np.log10(1.0 / mse))


# -- on-disk dataset ---------------------------------------------------------

MANIFEST_NAME = "manifest.txt"


def save_dataset(dirpath, spec, pairs):
    """Images as P6 pixmaps, maps as P5 graymaps, plus a manifest with the palette."""
    os.makedirs(dirpath, exist_ok=True)
    lines = ["shapes.v1"]
    for cid, color in enumerate(spec.palette):
        lines.append("class %d %.6f %.6f %.6f" % (cid, *color))
    for i, (img, cmap) in enumerate(pairs):
        img_name = f"img_{i:05d}.ppm"
        map_name = f"map_{i:05d}.pgm"
        pnm.write_ppm(os.path.join(dirpath, img_name), img)
        pnm.write_pgm(os.path.join(dirpath, map_name), cmap)
        lines.append(f"pair {img_name} {map_name}")
    with open(os.path.join(dirpath, MANIFEST_NAME), "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_dataset(dirpath):
    """Returns (palette array, list of (image, map) pairs)."""
    path = os.path.join(dirpath, MANIFEST_NAME)
    if not os.path.exists(path):
        raise DataError(f"no dataset manifest at {path}")
    palette = []
    pairs = []
    with open(path, encoding="utf-8") as f:
        header = f.readline().strip()
        if header != "shapes.v1":
            raise DataError(f"unsupported dataset manifest {header!r}")
        for line in f:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "class":
                palette.append((float(tok[2]), float(tok[3]), float(tok[4])))
            elif tok[0] == "pair":
                img = pnm.read_ppm(os.path.join(dirpath, tok[1]))
                cmap = pnm.read_pgm(os.path.join(dirpath, tok[2]))
                pairs.append((img, cmap))
            else:
                raise DataError(f"unknown manifest entry {tok[0]!r}")
    return np.asarray(palette, dtype=np.float64), pairs
