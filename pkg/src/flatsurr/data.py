"""Datasets: synthetic generators, IDX / CIFAR-10 binary readers, FSDS cache."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

KINDS = ("blobs", "spirals", "patterned-images")


class DatasetFormatError(ValueError):
    pass


class BadMagic(DatasetFormatError):
    pass


class Truncated(DatasetFormatError):
    pass


class LabelOutOfRange(DatasetFormatError):
    pass


class ConstructionWeak(ValueError):
    """Too few relabelled examples survived; ``dataset`` holds what was kept."""

    def __init__(self, fraction: float, dataset: "Dataset | None" = None):
        super().__init__(f"only {fraction:.3f} of the examples reached their target class")
        self.fraction = fraction
        self.dataset = dataset


class InsufficientCorrect(ValueError):
    def __init__(self, count: int, needed: int):
        super().__init__(f"only {count} examples are correct on every target, need {needed}")
        self.count = count
        self.needed = needed


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    num_classes: int
    split: str = "train"
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs and labels differ in length")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise LabelOutOfRange("label outside [0, num_classes)")
        if self.inputs.size and (self.inputs.min() < 0 or self.inputs.max() > 1):
            raise ValueError("inputs must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    @property
    def pair(self):
        return self.inputs, self.labels

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        prov = dict(self.provenance, subset_of=self.split, subset_size=int(len(idx)))
        return Dataset(self.inputs[idx], self.labels[idx], self.num_classes,
                       split or self.split, prov)


def _balanced_labels(n: int, classes: int, rng) -> np.ndarray:
    return rng.permutation(np.arange(n) % classes)


def gen_synthetic(kind: str, n: int, classes: int, noise: float = 0.1, seed: int = 0,
                  dim: int = 2, image_shape: Sequence[int] = (1, 16, 16),
                  label_noise: float = 0.0, split: str = "train",
                  amplitude: float = 0.3, texture: float = 0.0,
                  texture_tile: int = 4, texture_seed: int = 12345) -> Dataset:
    """Seeded synthetic classification data with inputs in [0, 1].

    ``patterned-images`` draws oriented sinusoidal gratings whose orientation
    and frequency depend on the class, with random phase and contrast, plus
    pixel noise; ``amplitude`` scales the grating. ``texture`` adds a faint
    class-specific ±1 tile pattern (period ``texture_tile``), drawn from
    ``texture_seed`` so that every split shares it: a predictive feature
    that a perturbation of that size can erase. ``label_noise`` replaces
    that fraction of labels by uniform random classes.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    if n < classes:
        raise ValueError("need at least one example per class")
    rng = np.random.default_rng(seed)
    y = _balanced_labels(n, classes, rng)
    if kind == "blobs":
        if dim == 2:
            ang = 2 * np.pi * np.arange(classes) / classes
            centers = 0.5 + 0.3 * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        else:
            centers = rng.uniform(0.2, 0.8, size=(classes, dim))
        x = centers[y] + noise * rng.standard_normal((n, centers.shape[1]))
    elif kind == "spirals":
        t = rng.uniform(0, 1, n)
        r = 0.05 + 0.4 * t
        a = 2 * np.pi * y / classes + 3 * np.pi * t
        x = 0.5 + np.stack([r * np.cos(a), r * np.sin(a)], axis=1)
        x = x + noise * rng.standard_normal(x.shape)
    else:
        C, H, W = image_shape
        ii, jj = np.meshgrid(np.arange(H) / H, np.arange(W) / W, indexing="ij")
        theta = np.pi * y / classes
        freq = 2.0 + (y % 3)
        phase = rng.uniform(0, 2 * np.pi, n)
        contrast = rng.uniform(0.5, 1.0, n)
        proj = (np.cos(theta)[:, None, None] * ii + np.sin(theta)[:, None, None] * jj)
        wave = np.sin(2 * np.pi * freq[:, None, None] * proj + phase[:, None, None])
        base = 0.5 + amplitude * contrast[:, None, None] * wave
        x = np.repeat(base[:, None], C, axis=1)
        if texture:
            trng = np.random.default_rng(texture_seed)
            tiles = trng.choice([-1.0, 1.0], size=(classes, C, texture_tile, texture_tile))
            reps = (1, 1, -(-H // texture_tile), -(-W // texture_tile))
            pattern = np.tile(tiles, reps)[:, :, :H, :W]
            x = x + texture * pattern[y]
        x = x + noise * rng.standard_normal(x.shape)
    x = np.clip(x, 0.0, 1.0).astype(np.float32)
    prov = {"generator": kind, "n": n, "classes": classes, "noise": noise, "seed": seed}
    if kind == "patterned-images":
        prov.update(image_shape=list(image_shape), amplitude=amplitude, texture=texture,
                    texture_tile=texture_tile, texture_seed=texture_seed)
    if label_noise > 0:
        flip = rng.random(n) < label_noise
        prov["label_noise"] = label_noise
        prov["flipped"] = int(flip.sum())
        y = np.where(flip, rng.integers(0, classes, n), y)
    return Dataset(x, y, classes, split, prov)


def gen_splits(kind: str, sizes: dict, classes: int, noise: float, seed: int,
               label_noise: float = 0.0, **kw) -> dict[str, Dataset]:
    """Independent draws for each named split; label noise only in ``train``."""
    out = {}
    for i, (split, n) in enumerate(sizes.items()):
        out[split] = gen_synthetic(kind, n, classes, noise, seed * 1000 + i, split=split,
                                   label_noise=label_noise if split == "train" else 0.0, **kw)
    return out


# ---------------------------------------------------------------------------
# IDX (MNIST) files

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801


def _read_idx(buf: bytes, expected_rank: int) -> np.ndarray:
    if len(buf) < 4:
        raise Truncated("IDX header shorter than 4 bytes")
    if buf[0] != 0 or buf[1] != 0 or buf[2] != 0x08:
        raise BadMagic(f"bad IDX magic {buf[:4].hex()}")
    rank = buf[3]
    if rank != expected_rank:
        raise BadMagic(f"IDX rank {rank}, expected {expected_rank}")
    if len(buf) < 4 + 4 * rank:
        raise Truncated("IDX dimension header truncated")
    dims = struct.unpack(f">{rank}I", buf[4:4 + 4 * rank])
    size = math.prod(dims)
    payload = buf[4 + 4 * rank:]
    if len(payload) != size:
        raise Truncated(f"IDX payload has {len(payload)} bytes, expected {size}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10, split: str = "train") -> Dataset:
    img = _read_idx(Path(images_path).read_bytes(), 3)
    lab = _read_idx(Path(labels_path).read_bytes(), 1)
    if len(img) != len(lab):
        raise Truncated(f"{len(img)} images but {len(lab)} labels")
    if lab.size and lab.max() >= num_classes:
        raise LabelOutOfRange(f"label {lab.max()} >= {num_classes}")
    x = (img.astype(np.float32) / 255.0)[:, None]
    return Dataset(x, lab.astype(np.int64), num_classes, split,
                   {"source": [str(images_path), str(labels_path)], "format": "idx"})


def write_idx(images_path, labels_path, images_u8: np.ndarray, labels_u8: np.ndarray):
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    labels_u8 = np.asarray(labels_u8, dtype=np.uint8)
    Path(images_path).write_bytes(struct.pack(">I", IDX_IMAGES)
                                  + struct.pack(">3I", *images_u8.shape) + images_u8.tobytes())
    Path(labels_path).write_bytes(struct.pack(">I", IDX_LABELS)
                                  + struct.pack(">I", len(labels_u8)) + labels_u8.tobytes())


# ---------------------------------------------------------------------------
# CIFAR-10 binary batches

CIFAR_RECORD = 1 + 3 * 32 * 32


def load_cifar_binary(paths: Sequence, num_classes: int = 10, split: str = "train") -> Dataset:
    xs, ys = [], []
    for p in paths:
        buf = Path(p).read_bytes()
        if len(buf) % CIFAR_RECORD:
            raise Truncated(f"{p}: {len(buf)} bytes is not a multiple of {CIFAR_RECORD}")
        rec = np.frombuffer(buf, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        ys.append(rec[:, 0])
        xs.append(rec[:, 1:].reshape(-1, 3, 32, 32))
    y = np.concatenate(ys) if ys else np.zeros(0, np.uint8)
    if y.size and y.max() >= num_classes:
        raise LabelOutOfRange(f"label {y.max()} >= {num_classes}")
    x = np.concatenate(xs).astype(np.float32) / 255.0 if xs else np.zeros((0, 3, 32, 32), np.float32)
    return Dataset(x, y.astype(np.int64), num_classes, split,
                   {"source": [str(p) for p in paths], "format": "cifar-binary"})


def write_cifar_binary(path, images_u8: np.ndarray, labels: np.ndarray):
    images_u8 = np.asarray(images_u8, dtype=np.uint8).reshape(len(labels), -1)
    rec = np.concatenate([np.asarray(labels, dtype=np.uint8)[:, None], images_u8], axis=1)
    Path(path).write_bytes(rec.tobytes())


# ---------------------------------------------------------------------------
# FSDS native cache

FSDS_MAGIC = b"FSDS"
FSDS_VERSION = 1


def save_dataset(path, ds: Dataset):
    from .models import atomic_write

    meta = {"num_classes": ds.num_classes, "split": ds.split, "provenance": ds.provenance,
            "input_shape": list(ds.inputs.shape), "n": len(ds)}
    mb = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    atomic_write(path, FSDS_MAGIC + struct.pack("<II", FSDS_VERSION, len(mb)) + mb
                 + np.ascontiguousarray(ds.inputs, dtype="<f4").tobytes()
                 + np.ascontiguousarray(ds.labels, dtype="<f4").tobytes())


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if buf[:4] != FSDS_MAGIC:
        raise BadMagic("not an FSDS dataset file")
    version, mlen = struct.unpack_from("<II", buf, 4)
    if version != FSDS_VERSION:
        raise DatasetFormatError(f"unsupported FSDS version {version}")
    meta = json.loads(buf[12:12 + mlen])
    shape = tuple(meta["input_shape"])
    off = 12 + mlen
    size = math.prod(shape)
    if len(buf) != off + 4 * size + 4 * meta["n"]:
        raise Truncated("FSDS payload size mismatch")
    x = np.frombuffer(buf, "<f4", size, off).reshape(shape).astype(np.float32)
    y = np.frombuffer(buf, "<f4", meta["n"], off + 4 * size).astype(np.int64)
    return Dataset(x, y, meta["num_classes"], meta["split"], meta["provenance"])


# ---------------------------------------------------------------------------
# evaluation-set selection


def correct_mask(targets, inputs, labels) -> np.ndarray:
    from .models import predict

    mask = np.ones(len(labels), dtype=bool)
    for graph, params in targets:
        mask &= predict(graph, params, inputs).argmax(axis=1) == labels
    return mask


def select_eval_set(targets, dataset: Dataset, n: int, seed: int) -> np.ndarray:
    """Sorted indices of ``n`` examples every target classifies correctly."""
    if n < 1:
        raise ValueError("n must be >= 1")
    ok = np.flatnonzero(correct_mask(targets, dataset.inputs, dataset.labels))
    if len(ok) < n:
        raise InsufficientCorrect(len(ok), n)
    return np.sort(np.random.default_rng(seed).choice(ok, size=n, replace=False))


def with_labels(ds: Dataset, labels, **prov) -> Dataset:
    return replace(ds, labels=np.asarray(labels), provenance=dict(ds.provenance, **prov))


# ---------------------------------------------------------------------------
# relabel-by-attack construction


def shifted_targets(labels: np.ndarray, num_classes: int) -> np.ndarray:
    return (np.asarray(labels) + 1) % num_classes


def build_nonrobust_dataset(graph, params, dataset: Dataset, mode: str = "det",
                            epsilon: float = 0.5, steps: int = 100, seed: int = 0,
                            batch_size: int = 512, min_kept: float = 0.5):
    """Relabel each example by a targeted attack on ``(graph, params)``.

    The target is ``(y + 1) mod C`` (``det``) or a uniform random class
    (``rand``). Only pairs ``(x_adv, t)`` the model classifies as ``t`` are
    kept. Returns ``(dataset, kept_fraction)``; raises ``ConstructionWeak``
    when the kept fraction is below ``min_kept``.
    """
    from .attacks import AttackSpec, bim
    from .models import predict

    if mode not in ("det", "rand"):
        raise ValueError("mode must be 'det' or 'rand'")
    C = dataset.num_classes
    rng = np.random.default_rng(seed)
    if mode == "det":
        t = shifted_targets(dataset.labels, C)
    else:
        t = rng.integers(0, C, len(dataset))
    if epsilon > 0:
        spec = AttackSpec(epsilon, iterations=steps, targeted=True)
        xs = []
        for i in range(0, len(dataset), batch_size):
            sl = slice(i, i + batch_size)
            xs.append(bim((graph, params), dataset.inputs[sl], dataset.labels[sl], spec,
                          seed=seed + i, targets=t[sl]).adversarials)
        x_adv = np.concatenate(xs) if xs else dataset.inputs[:0]
    else:
        x_adv = dataset.inputs.copy()
    keep = predict(graph, params, x_adv).argmax(axis=1) == t
    frac = float(keep.mean()) if len(keep) else 0.0
    prov = {"constructed_from": dataset.provenance, "mode": mode, "epsilon": epsilon,
            "steps": steps, "seed": seed, "kept_fraction": frac}
    out = Dataset(x_adv[keep], t[keep], C, f"{dataset.split}-{mode}", prov)
    if frac < min_kept:
        raise ConstructionWeak(frac, out)
    return out, frac
