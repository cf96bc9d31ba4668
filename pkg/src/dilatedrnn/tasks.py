"""Data generators for the sequence-classification experiments.

Every generator is a pure function of its configuration and seed.
"""
from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import ConfigurationError, FormatError
from .numeric import DTYPE, Rng

COPY_SYMBOLS = 10
COPY_DATA_LENGTH = 10
COPY_DATA_ALPHABET = 8
BLANK = 8
MARKER = 9

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MNIST_SIDE = 28
MNIST_PIXELS = MNIST_SIDE * MNIST_SIDE


@dataclass
class TaskBatch:
    """Inputs ``(batch, T, dim)``, targets and loss mask ``(batch, T)``.

    Targets outside the mask are 0 and never read.
    """

    inputs: np.ndarray
    targets: np.ndarray
    loss_mask: np.ndarray
    num_classes: int

    def __post_init__(self):
        b, t = self.targets.shape
        if self.inputs.shape[:2] != (b, t) or self.loss_mask.shape != (b, t):
            raise ValueError("inputs, targets and mask disagree in (batch, T)")
        if not self.loss_mask.any(axis=1).all():
            raise ValueError("every example needs at least one scored timestep")

    @property
    def batch_size(self) -> int:
        return self.targets.shape[0]

    @property
    def length(self) -> int:
        return self.targets.shape[1]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[2]


# -- copy memory ------------------------------------------------------------


@dataclass(frozen=True)
class CopyMemoryConfig:
    T: int
    batch: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ConfigurationError("copy-memory T must be at least 1")
        if self.batch < 1:
            raise ConfigurationError("batch must be at least 1")


def copy_memory_symbols(cfg: CopyMemoryConfig, rng: Rng | None = None) -> np.ndarray:
    """Symbol sequences ``(batch, T + 20)``: 10 data symbols, ``T-1`` blanks, 11 markers."""
    rng = Rng(cfg.seed) if rng is None else rng
    data = rng.integers(0, COPY_DATA_ALPHABET, (cfg.batch, COPY_DATA_LENGTH))
    seq = np.empty((cfg.batch, cfg.T + 20), dtype=np.int64)
    seq[:, :COPY_DATA_LENGTH] = data
    seq[:, COPY_DATA_LENGTH : COPY_DATA_LENGTH + cfg.T - 1] = BLANK
    seq[:, COPY_DATA_LENGTH + cfg.T - 1 :] = MARKER
    return seq


def gen_copy_memory(cfg: CopyMemoryConfig, rng: Rng | None = None) -> TaskBatch:
    """One-hot copy-memory batch scored on the last 10 timesteps."""
    seq = copy_memory_symbols(cfg, rng)
    B, L = seq.shape
    inputs = np.zeros((B, L, COPY_SYMBOLS), dtype=DTYPE)
    np.put_along_axis(inputs, seq[:, :, None], 1.0, axis=2)
    targets = np.zeros((B, L), dtype=np.int64)
    targets[:, -COPY_DATA_LENGTH:] = seq[:, :COPY_DATA_LENGTH]
    mask = np.zeros((B, L), dtype=bool)
    mask[:, -COPY_DATA_LENGTH:] = True
    return TaskBatch(inputs, targets, mask, COPY_SYMBOLS)


# -- MNIST ------------------------------------------------------------------


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> tuple[tuple[int, ...], int]:
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise FormatError(f"{what}: truncated header", offset=len(raw))
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise FormatError(f"{what}: magic 0x{found:08x}, expected 0x{magic:08x}", offset=0)
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = header + int(np.prod(dims, dtype=np.int64))
    if len(raw) < need:
        raise FormatError(f"{what}: {len(raw)} bytes, header promises {need}", offset=len(raw))
    if len(raw) > need:
        raise FormatError(f"{what}: {len(raw) - need} trailing bytes", offset=need)
    return dims, header


def load_mnist_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """Read IDX image/label files (optionally gzipped).

    Returns images ``(N, rows, cols)`` scaled to ``[0, 1]`` and integer
    labels ``(N,)``.
    """
    raw_img = _read_bytes(images_path)
    raw_lab = _read_bytes(labels_path)
    (n, rows, cols), off = _parse_idx(raw_img, IMAGE_MAGIC, 3, str(images_path))
    (n_lab,), off_lab = _parse_idx(raw_lab, LABEL_MAGIC, 1, str(labels_path))
    if n != n_lab:
        raise FormatError(f"{n} images but {n_lab} labels", offset=4)
    pixels = np.frombuffer(raw_img, dtype=np.uint8, offset=off).reshape(n, rows, cols)
    labels = np.frombuffer(raw_lab, dtype=np.uint8, offset=off_lab).astype(np.int64)
    return pixels.astype(DTYPE) / 255.0, labels


def write_mnist_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray):
    """Write uint8 images ``(N, rows, cols)`` and labels ``(N,)`` as IDX files."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", LABEL_MAGIC, len(labels)) + labels.tobytes())


@dataclass(frozen=True)
class PixelSequenceConfig:
    permutation_seed: Optional[int] = None
    pad_to_T: Optional[int] = None
    noise_seed: int = 0

    def __post_init__(self):
        if self.pad_to_T is not None and self.pad_to_T < MNIST_PIXELS:
            raise ConfigurationError(f"pad_to_T must be at least {MNIST_PIXELS}")

    @property
    def length(self) -> int:
        return MNIST_PIXELS if self.pad_to_T is None else self.pad_to_T


def fixed_permutation(seed: int) -> np.ndarray:
    return Rng(seed).permutation(MNIST_PIXELS)


def make_pixel_sequence(
    image: np.ndarray,
    cfg: PixelSequenceConfig,
    rng: Rng,
    label: int = 0,
    permutation: np.ndarray | None = None,
) -> TaskBatch:
    """Serialise one 28x28 image into a single-example batch of length ``cfg.length``.

    Pixels are read row-major, optionally permuted, then padded with
    uniform noise; only the final timestep is scored.
    """
    image = np.asarray(image, dtype=DTYPE)
    if image.shape != (MNIST_SIDE, MNIST_SIDE):
        raise ConfigurationError(f"expected a {MNIST_SIDE}x{MNIST_SIDE} image, got {image.shape}")
    seq = image.reshape(-1)
    if cfg.permutation_seed is not None:
        perm = fixed_permutation(cfg.permutation_seed) if permutation is None else permutation
        seq = seq[perm]
    if cfg.pad_to_T is not None and cfg.pad_to_T > MNIST_PIXELS:
        seq = np.concatenate([seq, rng.uniform(cfg.pad_to_T - MNIST_PIXELS)])
    T = seq.size
    targets = np.zeros((1, T), dtype=np.int64)
    targets[0, -1] = label
    mask = np.zeros((1, T), dtype=bool)
    mask[0, -1] = True
    return TaskBatch(seq.reshape(1, T, 1), targets, mask, 10)


def pixel_batch(images, labels, cfg: PixelSequenceConfig, rng: Rng) -> TaskBatch:
    """Stack :func:`make_pixel_sequence` rows sharing one permutation."""
    perm = None if cfg.permutation_seed is None else fixed_permutation(cfg.permutation_seed)
    rows = [make_pixel_sequence(img, cfg, rng, int(lab), perm) for img, lab in zip(images, labels)]
    return TaskBatch(
        np.concatenate([r.inputs for r in rows]),
        np.concatenate([r.targets for r in rows]),
        np.concatenate([r.loss_mask for r in rows]),
        10,
    )


# -- text dump --------------------------------------------------------------


def dump_batch(batch: TaskBatch, path, *, T: int, seed: int) -> Path:
    """Write a batch as JSON lines: a header, then one record per example.

    Floats are written with ``repr`` precision, so :func:`load_batch` gives
    back identical arrays.
    """
    path = Path(path)
    header = {
        "format": "dilatedrnn-taskbatch",
        "version": 1,
        "T": T,
        "batch": batch.batch_size,
        "num_classes": batch.num_classes,
        "seed": seed,
        "length": batch.length,
        "input_dim": batch.input_dim,
    }
    with open(path, "w") as fh:
        fh.write(json.dumps(header) + "\n")
        for k in range(batch.batch_size):
            rec = {
                "inputs": batch.inputs[k].tolist(),
                "targets": batch.targets[k].tolist(),
                "mask": batch.loss_mask[k].astype(int).tolist(),
            }
            fh.write(json.dumps(rec) + "\n")
    return path


def load_batch(path) -> tuple[TaskBatch, dict]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty batch file", offset=0)
    header = json.loads(lines[0])
    if header.get("format") != "dilatedrnn-taskbatch":
        raise FormatError(f"{path}: not a task batch dump", offset=0)
    recs = [json.loads(line) for line in lines[1:]]
    if len(recs) != header["batch"]:
        raise FormatError(f"{path}: header says {header['batch']} examples, found {len(recs)}")
    batch = TaskBatch(
        np.array([r["inputs"] for r in recs], dtype=DTYPE),
        np.array([r["targets"] for r in recs], dtype=np.int64),
        np.array([r["mask"] for r in recs], dtype=bool),
        header["num_classes"],
    )
    return batch, header
