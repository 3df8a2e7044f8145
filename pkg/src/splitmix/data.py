"""Desk-scale datasets and image IO.

The synthetic generator produces class-conditional sinusoidal gratings
(distinct orientation/frequency per class) plus pixel noise, balanced
within one image per class and separable by a linear probe on raw pixels.

A flat binary loader accepts real downscaled datasets:
[count u32][height u32][width u32][channels u32] little-endian, then
count*H*W*C raw bytes scaled by 1/255; labels come from a sibling file of
count single-byte class ids. Grayscale exports use binary PGM (P5).
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError
from .numeric import SeededRng


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # [count, H, W, C], values in [0, 1]
    labels: np.ndarray  # [count] integer class ids
    classes: int
    train_count: int

    def __post_init__(self):
        if self.images.ndim != 4:
            raise ShapeError(f"images must be 4-D [count,H,W,C], got {self.images.shape}")
        if len(self.labels) != len(self.images):
            raise ShapeError("labels and images lengths differ")
        if not 0 < self.train_count <= len(self.images):
            raise ParameterError(f"train_count {self.train_count} out of range")

    @property
    def train_images(self):
        return self.images[:self.train_count]

    @property
    def train_labels(self):
        return self.labels[:self.train_count]

    @property
    def test_images(self):
        return self.images[self.train_count:]

    @property
    def test_labels(self):
        return self.labels[self.train_count:]


def _class_template(label: int, classes: int, height: int, width: int) -> np.ndarray:
    angle = np.pi * label / classes
    freq = 2.0 + (label % 2)
    yy, xx = np.meshgrid(np.arange(height), np.arange(width), indexing="ij")
    phase = 2.0 * np.pi * freq * (np.cos(angle) * xx + np.sin(angle) * yy) / max(height, width)
    return np.sin(phase)


def generate_synthetic(rng: SeededRng, classes: int, count: int, height: int, width: int,
                       channels: int = 1, noise: float = 0.1,
                       train_fraction: float = 0.8) -> Dataset:
    """Balanced grating dataset with a deterministic shuffled train/test split."""
    if count < classes:
        raise ParameterError(f"count {count} must be at least classes {classes}")
    if classes < 2:
        raise ParameterError("need at least two classes")
    gen = rng.generator()
    labels = np.array([k for k in range(classes)
                       for _ in range(count // classes + (1 if k < count % classes else 0))])
    templates = np.stack([_class_template(k, classes, height, width) for k in range(classes)])
    amplitudes = gen.uniform(0.25, 0.45, size=count)
    images = np.empty((count, height, width, channels))
    for i, lab in enumerate(labels):
        base = 0.5 + amplitudes[i] * templates[lab]
        img = base[:, :, None] + gen.normal(0.0, noise, (height, width, channels))
        images[i] = np.clip(img, 0.0, 1.0)
    order = gen.permutation(count)
    images, labels = images[order], labels[order]
    train_count = int(round(count * train_fraction))
    if not 0 < train_count < count:
        raise ParameterError(f"train_fraction {train_fraction} leaves an empty split")
    return Dataset(images=images, labels=labels, classes=classes, train_count=train_count)


def load_binary(images_path, labels_path, rng: SeededRng, classes: int = None,
                train_fraction: float = 0.8) -> Dataset:
    """Read the flat binary image format plus its one-byte-per-image label file."""
    with open(images_path, "rb") as fh:
        header = fh.read(16)
        if len(header) != 16:
            raise ParameterError(f"{images_path}: truncated header")
        count, height, width, chans = struct.unpack("<IIII", header)
        raw = fh.read(count * height * width * chans)
    if len(raw) != count * height * width * chans:
        raise ParameterError(f"{images_path}: expected {count*height*width*chans} data bytes")
    images = np.frombuffer(raw, dtype=np.uint8).astype(np.float64) / 255.0
    images = images.reshape(count, height, width, chans)
    with open(labels_path, "rb") as fh:
        lab_raw = fh.read()
    if len(lab_raw) != count:
        raise ParameterError(f"{labels_path}: expected {count} label bytes")
    labels = np.frombuffer(lab_raw, dtype=np.uint8).astype(np.int64)
    if classes is None:
        classes = int(labels.max()) + 1
    order = rng.generator().permutation(count)
    train_count = int(round(count * train_fraction))
    if not 0 < train_count < count:
        raise ParameterError(f"train_fraction {train_fraction} leaves an empty split")
    return Dataset(images=np.ascontiguousarray(images[order]),
                   labels=np.ascontiguousarray(labels[order]),
                   classes=classes, train_count=train_count)


def build_dataset(spec: dict, rng: SeededRng) -> Dataset:
    spec = dict(spec)
    kind = spec.pop("type", "synthetic")
    if kind == "synthetic":
        return generate_synthetic(rng, classes=spec["classes"], count=spec["count"],
                                  height=spec["height"], width=spec["width"],
                                  channels=spec.get("channels", 1),
                                  noise=spec.get("noise", 0.1),
                                  train_fraction=spec.get("train_fraction", 0.8))
    if kind == "binary":
        return load_binary(spec["images"], spec["labels"], rng,
                           classes=spec.get("classes"),
                           train_fraction=spec.get("train_fraction", 0.8))
    raise ParameterError(f"unknown dataset type {kind!r}")


def render_patch_grid(patches: np.ndarray, upscale: int = 1) -> np.ndarray:
    """Channel-average each patch, lay the means out on the square patch grid,
    and nearest-neighbor upscale for visibility."""
    n = patches.shape[0]
    side = int(np.sqrt(n))
    if side * side != n:
        raise ParameterError(f"patch count {n} is not a square grid")
    cells = patches.mean(axis=1).reshape(side, side)
    return np.repeat(np.repeat(cells, upscale, axis=0), upscale, axis=1)


def write_pgm(path, image: np.ndarray) -> None:
    """Min-max normalize a 2-D array into 0..255 and write it as binary PGM."""
    if image.ndim != 2:
        raise ShapeError(f"PGM export needs a 2-D array, got shape {image.shape}")
    lo, hi = float(image.min()), float(image.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    data = np.round((image - lo) * scale).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{image.shape[1]} {image.shape[0]}\n255\n".encode("ascii"))
        fh.write(data.tobytes())
