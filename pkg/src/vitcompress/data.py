"""Desk-scale datasets: procedural stripe images and a flat binary manifest.

Manifest layout (one file)::

    VITDATA 1\\n
    <json header, one line>\\n
    images  n*3*img*img little-endian f32
    labels  n little-endian int32
    splits  n uint8 (0 = train, 1 = test)

The header carries n, img, classes, channels, per-channel mean/std, the split
names and a sha256 of the payload bytes.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"VITDATA 1\n"
SPLITS = ("train", "test")


class IngestionError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # [n, 3, img, img] float32 in [0, 1]
    labels: np.ndarray  # [n] int64
    splits: np.ndarray  # [n] uint8 index into SPLITS
    classes: int

    def __post_init__(self):
        n = len(self.labels)
        if self.images.shape[0] != n or self.splits.shape[0] != n:
            raise IngestionError("images/labels/splits disagree on sample count")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise IngestionError(f"labels must lie in [0, {self.classes})")

    def __len__(self):
        return len(self.labels)

    @property
    def img(self) -> int:
        return int(self.images.shape[-1])

    def split(self, name: str) -> "Dataset":
        sel = self.splits == SPLITS.index(name)
        return Dataset(self.images[sel], self.labels[sel], self.splits[sel], self.classes)

    def stats(self) -> tuple[list[float], list[float]]:
        if not len(self):
            return [0.0] * 3, [0.0] * 3
        x = self.images.astype(np.float64)
        return x.mean(axis=(0, 2, 3)).tolist(), x.std(axis=(0, 2, 3)).tolist()

    def batches(self, batch_size: int, rng: np.random.Generator | None = None, hflip: bool = False):
        """Yield (images, labels); shuffled and optionally flipped when `rng` is given."""
        n = len(self)
        order = rng.permutation(n) if rng is not None else np.arange(n)
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            x = self.images[idx]
            if hflip and rng is not None:
                flip = rng.random(len(idx)) < 0.5
                x = x.copy()
                x[flip] = x[flip][..., ::-1]
            yield x, self.labels[idx]


def synth_generate(seed: int, n: int, img: int = 32, classes: int = 10, test_fraction: float = 0.2,
                   noise: float = 0.15) -> Dataset:
    """Oriented sinusoidal stripes; orientation, frequency, phase and tint depend on the class."""
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, classes, size=n)
    yy, xx = np.meshgrid(np.arange(img), np.arange(img), indexing="ij")
    theta = np.pi * np.arange(classes) / classes
    freq = 2.0 + 1.5 * (np.arange(classes) % 3)
    phase = 2 * np.pi * ((np.arange(classes) * 0.37) % 1.0)
    tint = np.stack([0.5 + 0.4 * np.cos(2 * np.pi * (np.arange(classes) / classes + t / 3)) for t in range(3)], 1)
    images = np.empty((n, 3, img, img), dtype=np.float32)
    for i, y in enumerate(labels):
        th = theta[y] + rng.normal(0, 0.05)
        f = freq[y] * (1 + rng.normal(0, 0.03))
        ph = phase[y] + rng.normal(0, 0.3)
        u = (np.cos(th) * xx + np.sin(th) * yy) / img
        wave = 0.5 + 0.5 * np.sin(2 * np.pi * f * u + ph)
        x = tint[y][:, None, None] * wave[None] + rng.normal(0, noise, (3, img, img))
        images[i] = np.clip(x, 0.0, 1.0)
    n_test = int(math.floor(n * test_fraction))
    splits = np.zeros(n, dtype=np.uint8)
    splits[n - n_test:] = 1
    return Dataset(images, labels.astype(np.int64), splits, classes)


def _payload(ds: Dataset) -> bytes:
    return (np.ascontiguousarray(ds.images, dtype="<f4").tobytes()
            + np.ascontiguousarray(ds.labels, dtype="<i4").tobytes()
            + np.ascontiguousarray(ds.splits, dtype=np.uint8).tobytes())


def save_dataset(ds: Dataset, path) -> None:
    payload = _payload(ds)
    mean, std = ds.stats()
    header = {"n": len(ds), "img": ds.img, "channels": 3, "classes": ds.classes,
              "mean": mean, "std": std, "splits": list(SPLITS),
              "sha256": hashlib.sha256(payload).hexdigest()}
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        f.write(payload)


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise IngestionError(f"{path}: not a dataset manifest")
    end = raw.index(b"\n", len(MAGIC))
    try:
        hdr = json.loads(raw[len(MAGIC):end])
    except json.JSONDecodeError as e:
        raise IngestionError(f"{path}: corrupt header ({e})") from None
    n, img, ch = int(hdr["n"]), int(hdr["img"]), int(hdr["channels"])
    payload = raw[end + 1:]
    n_img = n * ch * img * img * 4
    expected = n_img + 4 * n + n
    if len(payload) != expected:
        raise IngestionError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    if hashlib.sha256(payload).hexdigest() != hdr["sha256"]:
        raise IngestionError(f"{path}: checksum mismatch")
    images = np.frombuffer(payload, dtype="<f4", count=n * ch * img * img).reshape(n, ch, img, img)
    labels = np.frombuffer(payload, dtype="<i4", count=n, offset=n_img).astype(np.int64)
    splits = np.frombuffer(payload, dtype=np.uint8, count=n, offset=n_img + 4 * n).copy()
    return Dataset(images.astype(np.float32), labels, splits, int(hdr["classes"]))
