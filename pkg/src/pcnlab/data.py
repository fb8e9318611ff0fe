"""Dataset ingestion: CIFAR-10 binary batches plus a synthetic generator.

CIFAR-10 binary records are 3073 bytes: one label byte then 3072 pixel
bytes as full R, G, B planes, each a row-major 32x32 grid. Pixels scale
to [0, 1] and normalise per channel with the conventional CIFAR-10
statistics (pinned below so runs are self-describing). Record order is
preserved; evaluation always takes the leading test records in file order.

The synthetic generator renders class-conditional Gaussian blobs into the
same 3x32x32 geometry, deterministic in the seed, and can also be written
out in the CIFAR binary format for end-to-end runs without the real data.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .rng import RngStream

RECORD_BYTES = 3073
IMAGE_BYTES = 3072
N_CLASSES = 10

CIFAR10_MEAN = np.array([0.4914, 0.4822, 0.4465], dtype=np.float32)
CIFAR10_STD = np.array([0.2470, 0.2435, 0.2616], dtype=np.float32)

TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
TEST_FILES = ["test_batch.bin"]

# default blob noise, calibrated so the generator's Bayes accuracy is ~0.85
SYNTH_NOISE = 0.52


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray   # (N, 3, 32, 32) float32, normalised
    labels: np.ndarray   # (N,) int64 in [0, 10)
    split: str           # "train" | "test"
    provenance: str      # "cifar10" | "synthetic"

    def __len__(self):
        return len(self.labels)

    def take(self, n: int) -> "Dataset":
        if n > len(self):
            raise ValueError(f"requested {n} records, dataset has {len(self)}")
        return Dataset(self.images[:n], self.labels[:n], self.split, self.provenance)


def normalize(pixels01: np.ndarray) -> np.ndarray:
    """Per-channel normalisation of [0, 1] pixels, (N, 3, 32, 32)."""
    return ((pixels01 - CIFAR10_MEAN.reshape(1, 3, 1, 1))
            / CIFAR10_STD.reshape(1, 3, 1, 1)).astype(np.float32)


def denormalize_to_bytes(images: np.ndarray) -> np.ndarray:
    """Invert normalisation back to uint8 pixels (round to nearest)."""
    pix = images.astype(np.float64) * CIFAR10_STD.reshape(1, 3, 1, 1) \
        + CIFAR10_MEAN.reshape(1, 3, 1, 1)
    return np.rint(np.clip(pix * 255.0, 0.0, 255.0)).astype(np.uint8)


def parse_records(raw: bytes, origin: str = "<bytes>"):
    """Parse concatenated 3073-byte records into (labels, uint8 pixels)."""
    if len(raw) % RECORD_BYTES != 0:
        offset = len(raw) - (len(raw) % RECORD_BYTES)
        raise DataFormatError(
            f"{origin}: size {len(raw)} is not a multiple of {RECORD_BYTES}; "
            f"trailing partial record starts at byte offset {offset}")
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, RECORD_BYTES)
    labels = arr[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise DataFormatError(f"{origin}: label byte {labels[bad[0]]} > 9 at record {bad[0]}")
    pixels = arr[:, 1:].reshape(-1, 3, 32, 32)
    return labels, pixels


def serialize_records(labels: np.ndarray, pixels: np.ndarray) -> bytes:
    """Inverse of parse_records (byte-identical round trip)."""
    n = len(labels)
    out = np.empty((n, RECORD_BYTES), dtype=np.uint8)
    out[:, 0] = labels
    out[:, 1:] = pixels.reshape(n, IMAGE_BYTES)
    return out.tobytes()


def load_cifar10(path: str, split: str, subset: int | None = None) -> Dataset:
    """Load CIFAR-10 binary batches from a directory.

    Train reads data_batch_1..5.bin in order (later files may be absent if
    the requested subset is already covered); test reads test_batch.bin.
    """
    names = TRAIN_FILES if split == "train" else TEST_FILES
    labels_parts, pixel_parts = [], []
    total = 0
    for name in names:
        fpath = os.path.join(path, name)
        if not os.path.exists(fpath):
            if subset is not None and total >= subset:
                break
            raise DataFormatError(f"missing CIFAR-10 batch file: {fpath}")
        with open(fpath, "rb") as fh:
            labels, pixels = parse_records(fh.read(), origin=fpath)
        labels_parts.append(labels)
        pixel_parts.append(pixels)
        total += len(labels)
        if subset is not None and total >= subset:
            break
    labels = np.concatenate(labels_parts)
    pixels = np.concatenate(pixel_parts)
    if subset is not None:
        if subset > len(labels):
            raise DataFormatError(
                f"requested subset {subset} but only {len(labels)} records available")
        labels = labels[:subset]
        pixels = pixels[:subset]
    images = normalize(pixels.astype(np.float32) / 255.0)
    return Dataset(images=images, labels=labels, split=split, provenance="cifar10")


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

def synth_patterns(k: int, seed: int) -> np.ndarray:
    """Per-class mean patterns: low-frequency blobs in [0.25, 0.75]."""
    rng = RngStream(seed).child("patterns")
    low = rng.uniform(0.25, 0.75, (k, 3, 4, 4), dtype=np.float32)
    return np.repeat(np.repeat(low, 8, axis=2), 8, axis=3)


def synth_pixels(k: int, n: int, seed: int, noise: float, split: str):
    """Class-balanced noisy blob images as [0, 1] pixel arrays."""
    if k > N_CLASSES:
        raise ValueError(f"at most {N_CLASSES} classes, got {k}")
    if n % k != 0:
        raise ValueError(f"count {n} not divisible by class count {k} (balance required)")
    patterns = synth_patterns(k, seed)
    base = RngStream(seed)
    labels = np.tile(np.arange(k, dtype=np.int64), n // k)
    labels = labels[base.child("order", split).permutation(n)]
    pix = patterns[labels]
    if noise > 0:
        pix = pix + noise * base.child("noise", split).normal(pix.shape)
    return np.clip(pix, 0.0, 1.0), labels


def synth_dataset(k: int, n: int, seed: int, noise: float = SYNTH_NOISE,
                  split: str = "train") -> Dataset:
    """Deterministic synthetic classification set in CIFAR geometry.

    The class patterns depend only on (k, seed); the split tag selects an
    independent noise/order stream so train and test share classes but not
    samples.
    """
    pix, labels = synth_pixels(k, n, seed, noise, split)
    return Dataset(images=normalize(pix), labels=labels, split=split,
                   provenance="synthetic")


def synth_bayes_accuracy(k: int, n: int, seed: int, noise: float = SYNTH_NOISE) -> float:
    """Accuracy of the true-generator classifier (nearest class pattern)
    on a fresh sample: the Bayes rate of the blob generator, up to pixel
    clipping."""
    pix, labels = synth_pixels(k, n, seed, noise, split="bayes-probe")
    patterns = synth_patterns(k, seed).reshape(k, -1)
    flat = pix.reshape(n, -1)
    d2 = ((flat[:, None, :] - patterns[None]) ** 2).sum(axis=2)
    return float((d2.argmin(axis=1) == labels).mean())


def write_cifar10_format(root: str, k: int = N_CLASSES, n_train: int = 10000,
                         n_test: int = 10000, seed: int = 42,
                         noise: float = SYNTH_NOISE) -> None:
    """Write a synthetic dataset as standard CIFAR-10 binary batch files.

    Emits data_batch_1..ceil(n_train/10000).bin plus test_batch.bin so the
    binary loader path can run end to end without the real dataset.
    """
    os.makedirs(root, exist_ok=True)
    pix, labels = synth_pixels(k, n_train, seed, noise, split="train")
    raw = np.rint(pix * 255.0).astype(np.uint8)
    for i in range(0, n_train, 10000):
        chunk = serialize_records(labels[i:i + 10000], raw[i:i + 10000])
        with open(os.path.join(root, f"data_batch_{i // 10000 + 1}.bin"), "wb") as fh:
            fh.write(chunk)
    pix, labels = synth_pixels(k, n_test, seed, noise, split="test")
    raw = np.rint(pix * 255.0).astype(np.uint8)
    with open(os.path.join(root, "test_batch.bin"), "wb") as fh:
        fh.write(serialize_records(labels, raw))
