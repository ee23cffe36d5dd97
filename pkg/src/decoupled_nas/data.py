"""Seeded toy datasets standing in for the image and language tasks."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass
class Split:
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)


@dataclass
class Dataset:
    train: Split
    valid: Split
    num_classes: int


def gaussian_blobs(n: int, num_classes: int = 2, dim: int = 2, spread: float = 0.5, seed: int = 0) -> Split:
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, 3.0, size=(num_classes, dim))
    y = rng.integers(num_classes, size=n)
    x = centers[y] + rng.normal(0.0, spread, size=(n, dim))
    return Split(x, y)


def blobs_to_csv(split: Split, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow([f"x{i}" for i in range(split.x.shape[1])] + ["label"])
        for row, label in zip(split.x, split.y):
            w.writerow([repr(float(v)) for v in row] + [int(label)])


def blobs_from_csv(path) -> Split:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    body = rows[1:]
    x = np.array([[float(v) for v in r[:-1]] for r in body])
    y = np.array([int(r[-1]) for r in body])
    return Split(x, y)


def textured_images(n: int, num_classes: int = 4, size: int = 8, channels: int = 3,
                    noise: float = 0.3, seed: int = 0) -> Split:
    """Each class is a sinusoidal stripe pattern with its own orientation and frequency."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    angles = np.linspace(0, np.pi, num_classes, endpoint=False)
    freqs = 0.6 + 0.5 * (np.arange(num_classes) % 3)
    y = rng.integers(num_classes, size=n)
    phase = rng.uniform(0, 2 * np.pi, size=n)
    x = np.empty((n, channels, size, size))
    for i in range(n):
        a, f = angles[y[i]], freqs[y[i]]
        pattern = np.sin(f * (np.cos(a) * xx + np.sin(a) * yy) + phase[i])
        x[i] = pattern[None] + noise * rng.normal(size=(channels, size, size))
    return Split(x, y)


TOY_TEXT = (
    "the cat sat on the mat and the dog sat on the log . "
    "a bird sang in the tree while the sun rose over the hill . "
    "the rain fell on the roof and the wind blew through the grass . "
    "she read a book by the fire as the night grew cold and still . "
)


@dataclass
class Corpus:
    train: np.ndarray
    valid: np.ndarray
    vocab: list[str]


def char_corpus(text: str = TOY_TEXT, repeats: int = 8, valid_fraction: float = 0.2) -> Corpus:
    vocab = sorted(set(text))
    index = {c: i for i, c in enumerate(vocab)}
    ids = np.array([index[c] for c in text * repeats], dtype=np.int64)
    cut = int(len(ids) * (1 - valid_fraction))
    return Corpus(ids[:cut], ids[cut:], vocab)


def load_corpus(path) -> Corpus:
    return char_corpus(Path(path).read_text(), repeats=1)


def batchify(ids: np.ndarray, batch_size: int, seq_len: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Cut a token stream into (input, target) windows of shape (B, T)."""
    per_row = (len(ids) - 1) // batch_size
    rows_x = ids[: per_row * batch_size].reshape(batch_size, per_row)
    rows_y = ids[1: per_row * batch_size + 1].reshape(batch_size, per_row)
    return [
        (rows_x[:, s:s + seq_len], rows_y[:, s:s + seq_len])
        for s in range(0, per_row - seq_len + 1, seq_len)
    ]


def minibatches(split: Split, batch_size: int, rng: np.random.Generator | None = None):
    order = np.arange(len(split)) if rng is None else rng.permutation(len(split))
    for s in range(0, len(order) - batch_size + 1, batch_size):
        idx = order[s:s + batch_size]
        yield split.x[idx], split.y[idx]
