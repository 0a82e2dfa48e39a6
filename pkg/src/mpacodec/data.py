"""Seeded synthetic textures with classification and segmentation labels.

Each image is a Voronoi partition into three cells. A cell is flat (seg
class 0), horizontally striped (1) or vertically striped (2). The image
label is 1 when vertical stripes cover more pixels than horizontal ones.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .mpa import ConfigurationError
from .pnm import read_pgm, read_ppm, write_ppm

N_CELLS = 3
CLS_CLASSES = 2
SEG_CLASSES = 3


@dataclass
class Batch:
    images: np.ndarray          # (N, H, W, 3) float32 in [0, 1]
    cls: np.ndarray             # (N,) int
    seg: np.ndarray             # (N, H, W) int

    def __len__(self):
        return len(self.images)

    def subset(self, idx):
        return Batch(self.images[idx], self.cls[idx], self.seg[idx])


def texture(rng, size):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    centres = rng.uniform(0, size, size=(N_CELLS, 2))
    d = (yy[..., None] - centres[:, 0]) ** 2 + (xx[..., None] - centres[:, 1]) ** 2
    region = np.argmin(d, axis=-1)
    seg = rng.integers(0, SEG_CLASSES, size=N_CELLS)[region]
    colours = rng.uniform(0.15, 0.85, size=(N_CELLS, 3))
    tilt = rng.normal(0, 0.1, size=(2, 3))
    period = rng.uniform(3.0, 8.0)
    phase = rng.uniform(0, 2 * np.pi)
    amp = rng.uniform(0.15, 0.35)
    horiz = np.sin(2 * np.pi * yy / period + phase)
    vert = np.sin(2 * np.pi * xx / period + phase)
    tex = np.where(seg == 1, horiz, np.where(seg == 2, vert, 0.0))
    img = (colours[region]
           + (yy / size - 0.5)[..., None] * tilt[0] + (xx / size - 0.5)[..., None] * tilt[1]
           + amp * tex[..., None] * rng.uniform(0.6, 1.0, size=3)
           + rng.normal(0, 0.02, size=(size, size, 3)))
    label = int((seg == 2).sum() > (seg == 1).sum())
    return np.clip(img, 0, 1).astype(np.float32), label, seg.astype(np.int64)


def synthetic_textures(n, size=32, seed=0):
    rng = np.random.default_rng(seed)
    imgs, cls, seg = zip(*(texture(rng, size) for _ in range(n)))
    return Batch(np.stack(imgs), np.array(cls, np.int64), np.stack(seg))


class TextureStream:
    """Endless seeded batches; the same seed replays the same sequence."""

    def __init__(self, size=32, seed=0):
        self.size = size
        self.rng = np.random.default_rng(seed)

    def next(self, n):
        imgs, cls, seg = zip(*(texture(self.rng, self.size) for _ in range(n)))
        return Batch(np.stack(imgs), np.array(cls, np.int64), np.stack(seg))


# ---------------------------------------------------------------- on-disk toy sets

def write_dataset(directory, batch):
    """PPM images, PGM segmentation maps (class index as grey level) and ``labels.csv``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "labels.csv", "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["image", "cls", "seg"])
        for i in range(len(batch)):
            name = f"img_{i:04d}"
            write_ppm(d / f"{name}.ppm", batch.images[i])
            (d / f"{name}_seg.pgm").write_bytes(
                f"P5\n{batch.seg.shape[2]} {batch.seg.shape[1]}\n255\n".encode()
                + batch.seg[i].astype(np.uint8).tobytes())
            w.writerow([f"{name}.ppm", int(batch.cls[i]), f"{name}_seg.pgm"])


def list_images(directory):
    d = Path(directory)
    if not d.is_dir():
        raise ConfigurationError(f"dataset directory {directory} does not exist")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() == ".ppm")
    if not files:
        raise ConfigurationError(f"no .ppm images in {directory}")
    return files


def read_labels(directory):
    """``{image file name: (cls, seg map)}``; raises if ``labels.csv`` is missing."""
    path = Path(directory) / "labels.csv"
    if not path.exists():
        raise ConfigurationError(f"labels file {path} is required for cls/seg tasks")
    out = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            seg = read_pgm(Path(directory) / row["seg"]).astype(np.int64) if row.get("seg") else None
            out[row["image"]] = (int(row["cls"]), seg)
    return out


def load_dataset(directory):
    """All images of a toy directory as a :class:`Batch` (same-size images only)."""
    files = list_images(directory)
    imgs = np.stack([read_ppm(p) for p in files])
    labels = read_labels(directory) if (Path(directory) / "labels.csv").exists() else {}
    cls = np.array([labels.get(p.name, (-1, None))[0] for p in files], np.int64)
    seg = np.stack([labels[p.name][1] if p.name in labels and labels[p.name][1] is not None
                    else np.full(imgs.shape[1:3], -1) for p in files])
    return Batch(imgs, cls, seg)

