"""Datasets (CIFAR-10 binary batches, synthetic shapes) and byte-exact file emission."""
from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .tensor import RngStream

CIFAR_RECORD = 1 + 3 * 32 * 32


class DataFormatError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        super().__init__(message if offset is None else f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Dataset:
    images: torch.Tensor  # (N, C, H, W) in [0, 1]
    labels: torch.Tensor  # (N,) int64
    num_classes: int
    name: str = ""

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be (N, C, H, W) with one label per image")
        if len(self.labels) < 1:
            raise ValueError("dataset must hold at least one sample")
        if int(self.labels.min()) < 0 or int(self.labels.max()) >= self.num_classes:
            raise ValueError("label out of range")

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, indices: Sequence[int] | np.ndarray) -> "Dataset":
        idx = torch.as_tensor(np.asarray(indices, dtype=np.int64))
        return Dataset(self.images[idx], self.labels[idx], self.num_classes, self.name)

    def split(self, n_test: int) -> tuple["Dataset", "Dataset"]:
        """Last ``n_test`` samples become the held-out split."""
        n = len(self)
        if not 0 < n_test < n:
            raise ValueError(f"cannot hold out {n_test} of {n} samples")
        return self.subset(range(n - n_test)), self.subset(range(n - n_test, n))


def load_cifar10(path: str | os.PathLike, files: Iterable[str] | None = None) -> Dataset:
    """Read CIFAR-10 binary batches.

    ``path`` may be a single batch file or a directory holding
    ``data_batch_*.bin`` / ``test_batch.bin``. Each record is one label byte
    followed by 3072 pixel bytes (1024 R, 1024 G, 1024 B, row-major).
    """
    path = Path(path)
    if path.is_dir():
        names = list(files) if files is not None else sorted(p.name for p in path.glob("*_batch*.bin"))
        paths = [path / n for n in names]
        if not paths:
            raise DataFormatError(f"no CIFAR-10 batch files in {path}")
    else:
        paths = [path]
    images, labels = [], []
    for p in paths:
        if not p.exists():
            raise DataFormatError(f"missing CIFAR-10 batch file {p}")
        raw = p.read_bytes()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD:
            offset = (len(raw) // CIFAR_RECORD) * CIFAR_RECORD
            raise DataFormatError(f"truncated record in {p}", offset=offset)
        rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        if rec[:, 0].max() > 9:
            bad = int(np.argmax(rec[:, 0] > 9))
            raise DataFormatError(f"label byte > 9 in {p}", offset=bad * CIFAR_RECORD)
        labels.append(rec[:, 0].astype(np.int64))
        images.append(rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float64) / 255.0)
    return Dataset(
        torch.from_numpy(np.concatenate(images)),
        torch.from_numpy(np.concatenate(labels)),
        10,
        "cifar10",
    )


@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    samples_per_class: int = 50
    image_size: int = 16
    noise: float = 0.1
    seed: int = 0


def _class_template(c: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Coloured geometric template: class c gets its own hue and shape."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    shape_id = c % 4
    if shape_id == 0:
        m = ((xx - 0.5) ** 2 + (yy - 0.5) ** 2) < 0.09  # disk
    elif shape_id == 1:
        m = (np.abs(xx - 0.5) < 0.3) & (np.abs(yy - 0.5) < 0.12)  # horizontal bar
    elif shape_id == 2:
        m = (np.abs(xx - 0.5) < 0.12) & (np.abs(yy - 0.5) < 0.3)  # vertical bar
    else:
        m = np.abs(xx - yy) < 0.15  # diagonal
    hue = rng.uniform(0.3, 1.0, size=3)
    hue[c % 3] = 1.0
    bg = 0.5 * (1 - hue)
    img = np.where(m[None], hue[:, None, None], bg[:, None, None])
    return img


def make_synthetic(spec: SyntheticSpec) -> Dataset:
    """Balanced, shuffled dataset of per-class coloured shapes plus Gaussian pixel noise."""
    rng = RngStream(spec.seed, purpose="synthetic").generator()
    templates = [_class_template(c, spec.image_size, rng) for c in range(spec.num_classes)]
    n = spec.num_classes * spec.samples_per_class
    labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
    order = rng.permutation(n)
    labels = labels[order]
    imgs = np.stack([templates[c] for c in labels])
    imgs = np.clip(imgs + spec.noise * rng.standard_normal(imgs.shape), 0.0, 1.0)
    return Dataset(torch.from_numpy(imgs), torch.from_numpy(labels.astype(np.int64)), spec.num_classes, "synthetic")


def quantize(image: np.ndarray | torch.Tensor, scale: float = 1.0) -> np.ndarray:
    """Map values in [0, scale] to uint8, rounding half away from zero."""
    a = np.asarray(image, dtype=np.float64) * (255.0 / scale)
    a = np.clip(a, 0.0, 255.0)
    return np.floor(a + 0.5).astype(np.uint8)


def write_image(path: str | os.PathLike, image, fmt: str = "ppm", scale: float = 1.0) -> None:
    """Write a PGM (P5, ``(H, W)``) or PPM (P6, ``(3, H, W)``) file.

    ``scale`` is the value that maps to 255 (1.0 for model space, 255.0 for
    metric space).
    """
    q = quantize(image, scale)
    if fmt == "pgm":
        if q.ndim == 3 and q.shape[0] == 1:
            q = q[0]
        if q.ndim != 2:
            raise ValueError(f"PGM needs an (H, W) image, got {q.shape}")
        h, w = q.shape
        payload, magic = q.tobytes(), b"P5"
    elif fmt == "ppm":
        if q.ndim != 3 or q.shape[0] != 3:
            raise ValueError(f"PPM needs a (3, H, W) image, got {q.shape}")
        _, h, w = q.shape
        payload, magic = np.ascontiguousarray(q.transpose(1, 2, 0)).tobytes(), b"P6"
    else:
        raise ValueError(f"unknown image format {fmt!r}")
    Path(path).write_bytes(magic + b"\n" + f"{w} {h}\n255\n".encode() + payload)


def read_image(path: str | os.PathLike) -> np.ndarray:
    """Inverse of :func:`write_image` for files it produced; returns uint8 ``(H, W)`` or ``(3, H, W)``."""
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if len(parts) != 4 or parts[0] not in (b"P5", b"P6") or parts[2] != b"255":
        raise DataFormatError(f"{path} is not a binary PGM/PPM written by this package")
    w, h = map(int, parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8)
    if parts[0] == b"P5":
        return data.reshape(h, w).copy()
    return data.reshape(h, w, 3).transpose(2, 0, 1).copy()


def format_csv(rows: Iterable[Sequence], header: Sequence[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    writer.writerow(header)
    for row in rows:
        writer.writerow([_csv_field(v) for v in row])
    return buf.getvalue()


def _csv_field(v) -> str:
    if isinstance(v, float):
        if v == float("inf"):
            return "inf"
        return repr(v)
    return str(v)


def write_csv(path: str | os.PathLike, rows: Iterable[Sequence], header: Sequence[str]) -> None:
    Path(path).write_text(format_csv(rows, header), newline="")


def read_csv(path: str | os.PathLike) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
