"""Labeled datasets: file formats, contamination protocol, normalization, synthetic data.

File formats
------------
static    CSV with a header row; the last column is the class label, the rest numeric.
sequence  one JSON object per line: ``{"id": ..., "label": ..., "steps": [[...], ...]}``.
image     binary ``DSBT`` container: magic ``b"DSBT"``, a version byte, then item
          count, channels, height and width as little-endian uint32; each item is
          a uint32 label followed by ``C*H*W`` little-endian float64 values.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import DTYPE, RngStream

DSBT_MAGIC = b"DSBT"
DSBT_VERSION = 1
KINDS = ("static", "sequence", "image")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass
class LabeledDataset:
    kind: str
    items: object  # (n, d) or (n, C, H, W) array, or list of (T, d) arrays
    labels: np.ndarray
    ids: list[str]
    split: np.ndarray = None
    inlier_classes: frozenset = frozenset()
    rho: float | None = None
    stats: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise DataError(f"unknown dataset kind {self.kind!r}")
        self.labels = np.asarray(self.labels, dtype=object).astype(str)
        if self.split is None:
            self.split = np.full(len(self.labels), "", dtype=object)
        if not (len(self.items) == len(self.labels) == len(self.ids) == len(self.split)):
            raise DataError("items, labels, ids and split must have equal length")
        if not self.stats and len(self):
            self.stats = feature_stats(self.items)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def is_outlier(self) -> np.ndarray:
        if not self.inlier_classes:
            raise DataError("inlier classes are not set")
        return np.array([lab not in self.inlier_classes for lab in self.labels])

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=int)
        items = [self.items[i] for i in idx] if self.kind == "sequence" else self.items[idx]
        return replace(self, items=items, labels=self.labels[idx], ids=[self.ids[i] for i in idx],
                       split=self.split[idx], stats={})

    def part(self, name: str) -> "LabeledDataset":
        return self.subset(np.flatnonzero(self.split == name))

    def with_inliers(self, classes) -> "LabeledDataset":
        return replace(self, inlier_classes=frozenset(str(c) for c in classes))


def feature_stats(items) -> dict:
    if isinstance(items, list):
        flat = np.concatenate(items)
        return {"mean": flat.mean(axis=0), "std": flat.std(axis=0)}
    return {"mean": items.mean(axis=0), "std": items.std(axis=0)}


@dataclass
class Normalizer:
    """Per-feature affine map ``(x - mean) / std``, fit on training data only."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, items) -> "Normalizer":
        stats = feature_stats(items)
        std = np.where(stats["std"] > 1e-12, stats["std"], 1.0)
        return cls(np.asarray(stats["mean"], dtype=DTYPE), std.astype(DTYPE))

    @classmethod
    def identity(cls, items) -> "Normalizer":
        shape = items[0].shape[-1:] if isinstance(items, list) else np.shape(items)[1:]
        return cls(np.zeros(shape), np.ones(shape))

    def apply(self, items):
        if isinstance(items, list):
            return [(np.asarray(s, dtype=DTYPE) - self.mean) / self.std for s in items]
        return (np.asarray(items, dtype=DTYPE) - self.mean) / self.std


# ---------------------------------------------------------------- loaders

def _finite_row(values, where):
    arr = np.asarray(values, dtype=DTYPE)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{where}: non-finite value")
    return arr


def load_static(path) -> LabeledDataset:
    path = Path(path)
    rows, labels = [], []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or len(header) < 2:
            raise DataError(f"{path}: missing header or label column")
        width = len(header)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != width:
                raise DataError(f"{path}:{lineno}: expected {width} columns, got {len(row)}")
            try:
                values = [float(v) for v in row[:-1]]
            except ValueError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            rows.append(_finite_row(values, f"{path}:{lineno}"))
            labels.append(row[-1].strip())
    if not rows:
        raise DataError(f"{path}: no data rows")
    return LabeledDataset("static", np.array(rows), labels, [str(i) for i in range(len(rows))])


def load_sequences(path) -> LabeledDataset:
    path = Path(path)
    seqs, labels, ids = [], [], []
    dim = None
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}"
            try:
                rec = json.loads(line)
                steps = rec["steps"]
                label = rec["label"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise DataError(f"{where}: bad record ({exc})") from None
            try:
                arr = np.array(steps, dtype=DTYPE)
            except (ValueError, TypeError):
                raise DataError(f"{where}: steps are not a rectangular numeric array") from None
            if arr.ndim != 2 or arr.shape[0] < 1:
                raise DataError(f"{where}: steps must be a non-empty list of vectors")
            if dim is None:
                dim = arr.shape[1]
            elif arr.shape[1] != dim:
                raise DataError(f"{where}: step dimension {arr.shape[1]} != {dim}")
            seqs.append(_finite_row(arr, where))
            labels.append(str(label))
            ids.append(str(rec.get("id", len(ids))))
    if not seqs:
        raise DataError(f"{path}: no records")
    return LabeledDataset("sequence", seqs, labels, ids)


def load_images(path) -> LabeledDataset:
    path = Path(path)
    raw = path.read_bytes()
    head = 4 + 1 + 16
    if len(raw) < head or raw[:4] != DSBT_MAGIC:
        raise DataError(f"{path}: not a DSBT image container")
    if raw[4] != DSBT_VERSION:
        raise DataError(f"{path}: unsupported DSBT version {raw[4]}")
    count, c, h, w = struct.unpack_from("<4I", raw, 5)
    per_item = c * h * w
    if per_item == 0:
        raise DataError(f"{path}: zero-sized image shape {(c, h, w)}")
    record = 4 + 8 * per_item
    body = len(raw) - head
    if body != count * record:
        raise DataError(
            f"{path}: payload is {body} bytes, expected {count} items of shape "
            f"{(c, h, w)} ({count * record} bytes)"
        )
    items = np.empty((count, c, h, w))
    labels = []
    off = head
    for i in range(count):
        (label,) = struct.unpack_from("<I", raw, off)
        items[i] = np.frombuffer(raw, dtype="<f8", count=per_item, offset=off + 4).reshape(c, h, w)
        if not np.all(np.isfinite(items[i])):
            raise DataError(f"{path}: item {i}: non-finite value")
        labels.append(str(label))
        off += record
    if count == 0:
        raise DataError(f"{path}: no items")
    return LabeledDataset("image", items, labels, [str(i) for i in range(count)])


def load_dataset(path) -> LabeledDataset:
    """Dispatch on file extension: .csv, .jsonl, otherwise DSBT."""
    suffix = Path(path).suffix.lower()
    if suffix == ".csv":
        return load_static(path)
    if suffix in (".jsonl", ".json"):
        return load_sequences(path)
    return load_images(path)


# ---------------------------------------------------------------- writers

def save_static(ds: LabeledDataset, path) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        d = ds.items.shape[1]
        writer.writerow([f"x{i}" for i in range(d)] + ["label"])
        for row, label in zip(ds.items, ds.labels):
            writer.writerow([repr(float(v)) for v in row] + [label])


def save_sequences(ds: LabeledDataset, path) -> None:
    with Path(path).open("w") as fh:
        for sid, label, seq in zip(ds.ids, ds.labels, ds.items):
            fh.write(json.dumps({"id": sid, "label": label, "steps": seq.tolist()}) + "\n")


def save_images(ds: LabeledDataset, path) -> None:
    items = np.asarray(ds.items, dtype="<f8")
    n, c, h, w = items.shape
    parts = [DSBT_MAGIC, bytes([DSBT_VERSION]), struct.pack("<4I", n, c, h, w)]
    for label, img in zip(ds.labels, items):
        parts.append(struct.pack("<I", int(label)))
        parts.append(np.ascontiguousarray(img).tobytes())
    Path(path).write_bytes(b"".join(parts))


def save_dataset(ds: LabeledDataset, path) -> None:
    {"static": save_static, "sequence": save_sequences, "image": save_images}[ds.kind](ds, path)


# ---------------------------------------------------------------- protocol

def outlier_count(n_test_inliers: int, rho: float) -> int:
    """Outliers needed so they make up ``rho`` of the test set, rounded up."""
    if rho == 0:
        return 0
    return math.ceil(rho * n_test_inliers / (1.0 - rho) - 1e-9)


def make_contaminated(dataset: LabeledDataset, inlier_classes, rho: float,
                      split_ratio: float = 0.5, seed: int = 0) -> LabeledDataset:
    """Train split of inliers only; test split of held-out inliers plus planted outliers.

    ``split_ratio`` is the fraction of inliers used for training (0.5 for a 1:1
    split, 2/3 for 2:1).
    """
    classes = frozenset(str(c) for c in inlier_classes)
    if not classes:
        raise DataError("inlier classes must be non-empty")
    if not 0 <= rho < 1:
        raise DataError("rho must lie in [0, 1)")
    if not 0 < split_ratio < 1:
        raise DataError("split_ratio must lie in (0, 1)")
    rng = RngStream(seed)
    inlier_mask = np.array([lab in classes for lab in dataset.labels])
    inliers = np.flatnonzero(inlier_mask)
    pool = np.flatnonzero(~inlier_mask)
    if len(inliers) < 2:
        raise DataError("need at least two inlier samples")
    inliers = inliers[rng.permutation(len(inliers))]
    n_train = int(round(split_ratio * len(inliers)))
    n_train = min(max(n_train, 1), len(inliers) - 1)
    train_idx, test_in = inliers[:n_train], inliers[n_train:]
    n_out = outlier_count(len(test_in), rho)
    if n_out > len(pool):
        raise DataError(f"need {n_out} outliers for rho={rho} but only {len(pool)} available")
    test_out = np.sort(pool[rng.choice(len(pool), n_out)]) if n_out else np.array([], dtype=int)
    idx = np.concatenate([np.sort(train_idx), np.sort(test_in), test_out]).astype(int)
    out = dataset.subset(idx)
    out.split = np.array(["train"] * n_train + ["test"] * (len(test_in) + n_out), dtype=object)
    out.inlier_classes = classes
    out.rho = rho
    out.stats = feature_stats(out.part("train").items)
    return out


# ---------------------------------------------------------------- synthetic data

def synth_gaussians(n: int, d: int, separation: float, seed: int = 0) -> LabeledDataset:
    """``n`` inliers (class "0") and ``n`` outlier candidates (class "1").

    Inliers are an equal mixture of two unit-variance Gaussians centered at
    ``+-1.5`` along the first axis. Outliers are the same mixture shifted by
    ``separation`` along the second axis (first axis when ``d == 1``), so
    ``separation=0`` makes the classes indistinguishable.
    """
    if n < 10:
        raise DataError("n must be at least 10")
    rng = RngStream(seed)
    centers = np.zeros((2, d))
    centers[:, 0] = [-1.5, 1.5]
    shift = np.zeros(d)
    shift[1 if d > 1 else 0] = separation

    def mixture():
        comp = (rng.uniform(size=n) < 0.5).astype(int)
        return centers[comp] + rng.normal(size=(n, d))

    items = np.concatenate([mixture(), mixture() + shift])
    labels = ["0"] * n + ["1"] * n
    return LabeledDataset("static", items, labels, [str(i) for i in range(2 * n)])


def synth_bimodal_1d(n: int, seed: int = 0, modes=(-4.0, 4.0), width: float = 0.5,
                     background: float = 10.0) -> LabeledDataset:
    """Two narrow inlier modes (class "0") and a uniform background of outliers (class "1")."""
    if n < 10:
        raise DataError("n must be at least 10")
    rng = RngStream(seed)
    comp = (rng.uniform(size=n) < 0.5).astype(int)
    inliers = np.asarray(modes)[comp] + width * rng.normal(size=n)
    outliers = rng.uniform(-background, background, n)
    items = np.concatenate([inliers, outliers])[:, None]
    return LabeledDataset("static", items, ["0"] * n + ["1"] * n, [str(i) for i in range(2 * n)])


def synth_sequences(n: int, d: int = 2, length=(6, 10), separation: float = 2.0,
                    seed: int = 0) -> LabeledDataset:
    """Noisy sinusoid trajectories; outliers (class "1") run at a different frequency."""
    rng = RngStream(seed)
    seqs, labels = [], []
    for cls, freq in (("0", 0.6), ("1", 0.6 + 0.3 * separation)):
        for _ in range(n):
            T = int(length[0] + rng.choice(length[1] - length[0] + 1, 1)[0])
            phase = rng.uniform(0, 2 * np.pi)
            t = np.arange(T)[:, None]
            offsets = np.arange(d)[None, :] * np.pi / max(d, 1)
            seqs.append(np.sin(freq * t + phase + offsets) + 0.1 * rng.normal(size=(T, d)))
            labels.append(cls)
    return LabeledDataset("sequence", seqs, labels, [str(i) for i in range(len(seqs))])


def synth_images(n: int, side: int = 8, separation: float = 1.0, seed: int = 0) -> LabeledDataset:
    """Single-channel bar images; inliers horizontal (class "0"), outliers vertical (class "1")."""
    rng = RngStream(seed)
    imgs, labels = [], []
    for cls in ("0", "1"):
        for _ in range(n):
            img = 0.1 * rng.normal(size=(side, side))
            pos = int(rng.choice(side, 1)[0])
            if cls == "0":
                img[pos, :] += 1.0
            else:
                img[pos, :] += 1.0 - min(separation, 1.0)
                img[:, pos] += min(separation, 1.0)
            imgs.append(img[None])
            labels.append(cls)
    return LabeledDataset("image", np.array(imgs), labels, [str(i) for i in range(len(imgs))])
