"""Datasets: CIFAR-10 binary I/O, a synthetic generator, augmentation and
per-channel standardization."""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from . import rng
from .errors import ConfigError

RECORD_BYTES = 1 + 3 * 32 * 32


class FormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (n, c, h, w) float64
    labels: np.ndarray  # (n,) int64
    num_classes: int = 10
    channel_mean: np.ndarray | None = None
    channel_std: np.ndarray | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.images) != len(self.labels):
            raise ConfigError("images and labels differ in length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ConfigError("label outside class range")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return replace(self, images=self.images[idx], labels=self.labels[idx])


def read_cifar_binary(path, num_classes: int = 10) -> Dataset:
    """Read the CIFAR-10 binary layout: per record one label byte and 3072
    pixel bytes (R, G, B planes, each 32x32 row-major).  Pixels map to
    [0, 1] by division by 255."""
    raw = np.fromfile(path, dtype=np.uint8)
    if raw.size % RECORD_BYTES:
        raise FormatError(f"{path}: size {raw.size} is not a multiple of {RECORD_BYTES}")
    recs = raw.reshape(-1, RECORD_BYTES)
    labels = recs[:, 0].astype(np.int64)
    if labels.size and labels.max() >= num_classes:
        raise FormatError(f"{path}: label {labels.max()} out of range")
    images = recs[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0
    return Dataset(images, labels, num_classes)


def read_cifar_files(paths, num_classes: int = 10) -> Dataset:
    parts = [read_cifar_binary(p, num_classes) for p in paths]
    return Dataset(np.concatenate([p.images for p in parts]),
                   np.concatenate([p.labels for p in parts]), num_classes)


def to_bytes(images: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(images * 255.0), 0, 255).astype(np.uint8)


def write_cifar_binary(path, ds: Dataset):
    """Write ``ds`` (pixels in [0, 1], shape (n, 3, 32, 32)) as CIFAR binary."""
    if ds.images.shape[1:] != (3, 32, 32):
        raise FormatError("CIFAR binary layout needs 3x32x32 images")
    if len(ds) and ds.labels.max() > 255:
        raise FormatError("labels must fit in one byte")
    recs = np.empty((len(ds), RECORD_BYTES), dtype=np.uint8)
    recs[:, 0] = ds.labels
    recs[:, 1:] = to_bytes(ds.images).reshape(len(ds), -1)
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    recs.tofile(path)


def synth_dataset(n: int, classes: int = 10, seed: int = 0, size: int = 32,
                  channels: int = 3, snr: float = 4.0, noise: float = 0.15,
                  label_noise: float = 0.0) -> Dataset:
    """Class-conditional Gaussian-blob images.

    Each class owns a template: a few Gaussian bumps with class-specific
    centres and per-channel amplitudes.  An image is ``0.5 + template *
    snr * noise / 2 + N(0, noise)``, clipped to [0, 1] and quantized to
    1/255 steps so it round-trips through the CIFAR layout.  A fraction
    ``label_noise`` of labels is replaced by uniform random classes.
    The class templates depend only on ``(classes, size, channels)``.
    """
    tpl_gen = rng.keyed(rng.DATA, 0, classes, size, channels)
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    templates = np.zeros((classes, channels, size, size))
    for k in range(classes):
        for _ in range(3):
            cy, cx = tpl_gen.uniform(0.1, 0.9, 2)
            width = tpl_gen.uniform(0.08, 0.2)
            amp = tpl_gen.normal(0.0, 1.0, channels)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width ** 2))
            templates[k] += amp[:, None, None] * bump
        templates[k] /= np.abs(templates[k]).max()
    if n == 0:
        return Dataset(np.zeros((0, channels, size, size)), np.zeros(0, np.int64), classes)
    gen = rng.keyed(rng.DATA, 1, seed)
    labels = gen.integers(0, classes, n)
    images = 0.5 + templates[labels] * (snr * noise / 2) + gen.normal(0.0, noise, (n, channels, size, size))
    images = to_bytes(np.clip(images, 0.0, 1.0)) / 255.0
    if label_noise > 0:
        flip = gen.random(n) < label_noise
        labels = np.where(flip, gen.integers(0, classes, n), labels)
    return Dataset(images, labels, classes)


@dataclass(frozen=True)
class AugmentPolicy:
    enabled: bool = True
    pad: int = 4
    crop: int | None = None
    hflip_prob: float = 0.5

    def __post_init__(self):
        if self.pad < 0 or not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError("invalid augmentation policy")


def augment_draws(policy: AugmentPolicy, seed: int, epoch: int, n: int):
    """Crop offsets ``(n, 2)`` uniform on ``[0, 2*pad]`` and flip flags ``(n,)``.

    Entry ``i`` is the draw for dataset index ``i`` in that epoch.
    """
    # Separate streams so the draws for index i do not depend on n.
    offsets = rng.keyed(rng.AUGMENT, seed, epoch, 0).integers(0, 2 * policy.pad + 1, (n, 2))
    flips = rng.keyed(rng.AUGMENT, seed, epoch, 1).random(n) < policy.hflip_prob
    return offsets, flips


def augment_one(image: np.ndarray, policy: AugmentPolicy, offset=None, flip=False):
    """Pad, crop at ``offset`` and optionally mirror one ``(c, h, w)`` image."""
    if not policy.enabled:
        return image.copy()
    c, h, w = image.shape
    ch = policy.crop or h
    cw = policy.crop or w
    if ch > h + 2 * policy.pad or cw > w + 2 * policy.pad:
        raise ConfigError("crop larger than padded image")
    p = policy.pad
    padded = np.zeros((c, h + 2 * p, w + 2 * p), dtype=image.dtype)
    padded[:, p:p + h, p:p + w] = image
    oy, ox = (p, p) if offset is None else offset
    out = padded[:, oy:oy + ch, ox:ox + cw]
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def augment(image: np.ndarray, policy: AugmentPolicy, draw_id) -> np.ndarray:
    """Augment dataset item ``index`` for ``draw_id = (seed, epoch, index)``."""
    if not policy.enabled:
        return image.copy()
    seed, epoch, index = draw_id
    offsets, flips = augment_draws(policy, seed, epoch, index + 1)
    return augment_one(image, policy, offsets[index], bool(flips[index]))


def augment_batch(images: np.ndarray, indices: np.ndarray, policy: AugmentPolicy,
                  seed: int, epoch: int, n_total: int) -> np.ndarray:
    """Vectorized :func:`augment` for a batch of dataset items."""
    if not policy.enabled:
        return images
    n, c, h, w = images.shape
    p = policy.pad
    ch = policy.crop or h
    cw = policy.crop or w
    offsets, flips = augment_draws(policy, seed, epoch, n_total)
    offsets, flips = offsets[indices], flips[indices]
    padded = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=images.dtype)
    padded[:, :, p:p + h, p:p + w] = images
    rows = offsets[:, 0, None] + np.arange(ch)  # (n, ch)
    cols = offsets[:, 1, None] + np.arange(cw)
    cols = np.where(flips[:, None], cols[:, ::-1], cols)
    out = padded[np.arange(n)[:, None, None, None], np.arange(c)[None, :, None, None],
                 rows[:, None, :, None], cols[:, None, None, :]]
    return out


def channel_stats(ds: Dataset):
    mean = ds.images.mean(axis=(0, 2, 3))
    std = ds.images.std(axis=(0, 2, 3))
    if np.any(std <= 0):
        raise ConfigError("zero standard deviation in a channel; cannot standardize")
    return mean, std


def standardize(train: Dataset, *others: Dataset, mode: str = "channel"):
    """Standardize every split with statistics of ``train``.

    ``mode="channel"`` applies ``(x - mean_c) / std_c``; ``mode="scale"``
    leaves the [0, 1] pixels as they are (pixels were already divided by
    255 on load).  Returns the transformed splits as a tuple.
    """
    if mode == "scale":
        return (train, *others)
    if mode != "channel":
        raise ConfigError(f"unknown standardization mode {mode!r}")
    mean, std = channel_stats(train)
    out = []
    for ds in (train, *others):
        imgs = (ds.images - mean[None, :, None, None]) / std[None, :, None, None]
        out.append(replace(ds, images=imgs, channel_mean=mean, channel_std=std))
    return tuple(out)
