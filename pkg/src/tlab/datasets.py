"""Patch datasets: flow-CSV ingestion, synthetic fixtures, splits, file I/O.

A patch is one input_side x input_side grayscale image with a binary label.
CSV rows become patches by per-column min-max quantization to 0-255, laid
out row-major and zero-padded. The synthetic generator draws Gaussian
textures whose class means differ by `separation` noise standard deviations
along a fixed smooth random direction, which keeps the two classes linearly
separable (in expectation) for separation >= 3 while still looking like
texture to a conv net.
"""

from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .errors import CapacityError, DataError, FormatError, ParseError

SPLITS = ("train", "val", "test")
_SPLIT_TAGS = {name: i for i, name in enumerate(SPLITS)}
DATASET_MAGIC = b"TLDS"
DATASET_VERSION = 1


@dataclass
class Patch:
    pixels: np.ndarray  # (side, side) uint8
    label: int
    source_id: str = ""


@dataclass
class Dataset:
    pixels: np.ndarray          # (N, side, side) uint8
    labels: np.ndarray          # (N,) uint8 in {0,1}
    splits: np.ndarray          # (N,) uint8 tags indexing SPLITS
    source_ids: list = field(default_factory=list)
    schema_meta: dict = field(default_factory=dict)
    dataset_id: str = ""

    def __len__(self) -> int:
        return len(self.pixels)

    @property
    def input_side(self) -> int:
        return self.pixels.shape[1]

    def patch(self, i: int) -> Patch:
        sid = self.source_ids[i] if i < len(self.source_ids) else ""
        return Patch(self.pixels[i], int(self.labels[i]), sid)

    def split_indices(self, split: str) -> np.ndarray:
        return np.flatnonzero(self.splits == _SPLIT_TAGS[split])

    def split_arrays(self, split: str):
        idx = self.split_indices(split)
        return self.pixels[idx], self.labels[idx].astype(np.int64)


def _allocate(n: int, fractions) -> list:
    """Largest-remainder allocation of n items across the split fractions."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise DataError(f"split fractions must be 3 nonnegative values summing to 1, got {fractions}")
    raw = [f * n for f in fractions]
    counts = [int(r) for r in raw]
    remainder = n - sum(counts)
    order = sorted(range(3), key=lambda i: raw[i] - counts[i], reverse=True)
    for i in range(remainder):
        counts[order[i % 3]] += 1
    return counts


def _stratified_splits(labels: np.ndarray, fractions, rng: np.random.Generator) -> np.ndarray:
    splits = np.zeros(len(labels), dtype=np.uint8)
    for cls in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == cls))
        n_tr, n_va, _ = _allocate(len(idx), fractions)
        splits[idx[:n_tr]] = _SPLIT_TAGS["train"]
        splits[idx[n_tr:n_tr + n_va]] = _SPLIT_TAGS["val"]
        splits[idx[n_tr + n_va:]] = _SPLIT_TAGS["test"]
    return splits


def quantize_columns(values: np.ndarray):
    """Min-max quantize each column to 0-255, round half up; constant -> 0."""
    mins = values.min(axis=0)
    maxs = values.max(axis=0)
    span = maxs - mins
    scaled = np.zeros_like(values, dtype=np.float64)
    nonconst = span > 0
    scaled[:, nonconst] = (values[:, nonconst] - mins[nonconst]) / span[nonconst] * 255.0
    pixels = np.floor(scaled + 0.5).astype(np.uint8)
    return pixels, mins, maxs


def ingest_flows(csv_path, label_column: str, split_fractions=(0.6, 0.2, 0.2),
                 seed: int = 0, input_side: int = 64) -> Dataset:
    """Turn a flow-record CSV into a labeled patch dataset."""
    path = Path(csv_path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty CSV") from None
        if label_column not in header:
            raise DataError(f"{path}: no column named {label_column!r}")
        label_idx = header.index(label_column)
        feature_names = [h for i, h in enumerate(header) if i != label_idx]
        if len(feature_names) > input_side * input_side:
            raise CapacityError(
                f"{len(feature_names)} features exceed {input_side}x{input_side} patch capacity")

        rows, raw_labels = [], []
        for row_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"{path}:{row_no}: expected {len(header)} cells, got {len(row)}")
            feats = []
            for col_no, cell in enumerate(row):
                if col_no == label_idx:
                    continue
                try:
                    feats.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}:{row_no}: non-numeric value {cell!r} in column "
                        f"{header[col_no]!r}") from None
            rows.append(feats)
            raw_labels.append(row[label_idx])

    if not rows:
        raise DataError(f"{path}: no data rows")
    distinct = sorted(set(raw_labels))
    if len(distinct) != 2:
        raise DataError(f"{path}: label column has {len(distinct)} distinct values, need exactly 2")
    labels = np.array([distinct.index(v) for v in raw_labels], dtype=np.uint8)

    values = np.asarray(rows, dtype=np.float64)
    quantized, mins, maxs = quantize_columns(values)
    n = len(rows)
    pixels = np.zeros((n, input_side * input_side), dtype=np.uint8)
    pixels[:, :quantized.shape[1]] = quantized
    pixels = pixels.reshape(n, input_side, input_side)

    rng = np.random.default_rng(seed)
    splits = _stratified_splits(labels, split_fractions, rng)
    meta = {"feature_names": feature_names,
            "mins": mins.tolist(), "maxs": maxs.tolist()}
    source_ids = [f"{path.name}:{i + 2}" for i in range(n)]
    return Dataset(pixels, labels, splits, source_ids, meta, dataset_id=path.name)


def synth_dataset(seed: int, n_per_class: int, separation: float,
                  input_side: int = 64, split_fractions=(0.6, 0.2, 0.2)) -> Dataset:
    """Seeded Gaussian-texture dataset with a class offset of `separation` sigmas."""
    if separation < 0:
        raise DataError("separation must be nonnegative")
    rng = np.random.default_rng(seed)
    sigma = 28.0
    base = 118.0

    # Smooth zero-sum unit-norm direction: smooth so pooling/conv layers do
    # not wash it out, zero-sum so the class offset is orthogonal to the
    # constant brightness component.
    field_ = gaussian_filter(rng.standard_normal((input_side, input_side)), sigma=4.0)
    field_ -= field_.mean()
    direction = field_ / np.linalg.norm(field_)
    offset = separation * sigma * direction

    n = 2 * n_per_class
    labels = np.repeat(np.array([0, 1], dtype=np.uint8), n_per_class)
    noise = rng.standard_normal((n, input_side, input_side)) * sigma
    raw = base + noise + labels[:, None, None] * offset
    pixels = np.clip(np.floor(raw + 0.5), 0, 255).astype(np.uint8)

    splits = _stratified_splits(labels, split_fractions, rng)
    meta = {"generator": "synth", "separation": separation, "sigma": sigma, "seed": seed}
    ids = [f"synth:{seed}:{i}" for i in range(n)]
    return Dataset(pixels, labels, splits, ids, meta,
                   dataset_id=f"synth-{seed}-{n_per_class}-{separation}")


def split_counts(dataset: Dataset) -> dict:
    """{split: {class: count}} over the whole dataset."""
    out = {}
    for name, tag in _SPLIT_TAGS.items():
        mask = dataset.splits == tag
        out[name] = {int(c): int((dataset.labels[mask] == c).sum())
                     for c in np.unique(dataset.labels)}
    return out


# ---------------------------------------------------------------------------
# dataset file format
# ---------------------------------------------------------------------------

def save_dataset(dataset: Dataset, path) -> None:
    side = dataset.input_side
    buf = bytearray()
    buf += DATASET_MAGIC
    buf += struct.pack("<III", DATASET_VERSION, side, len(dataset))
    for i in range(len(dataset)):
        buf += struct.pack("<BB", int(dataset.labels[i]), int(dataset.splits[i]))
        buf += dataset.pixels[i].tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


def load_dataset(path) -> Dataset:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError("dataset file truncated before header", offset=len(raw))
    if raw[:4] != DATASET_MAGIC:
        raise FormatError(f"bad magic {raw[:4]!r}, expected {DATASET_MAGIC!r}", offset=0)
    version, side, count = struct.unpack_from("<III", raw, 4)
    if version != DATASET_VERSION:
        raise FormatError("unsupported dataset version", offset=4)
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != struct.unpack_from("<I", raw, len(raw) - 4)[0]:
        raise FormatError("CRC mismatch", offset=len(raw) - 4)
    rec = 2 + side * side
    if len(raw) != 16 + count * rec + 4:
        raise FormatError("record data length disagrees with patch count", offset=16)

    pixels = np.empty((count, side, side), dtype=np.uint8)
    labels = np.empty(count, dtype=np.uint8)
    splits = np.empty(count, dtype=np.uint8)
    off = 16
    for i in range(count):
        labels[i], splits[i] = raw[off], raw[off + 1]
        if labels[i] > 1 or splits[i] > 2:
            raise FormatError(f"invalid label/split tag in record {i}", offset=off)
        pixels[i] = np.frombuffer(raw, dtype=np.uint8, count=side * side,
                                  offset=off + 2).reshape(side, side)
        off += rec
    return Dataset(pixels, labels, splits, dataset_id=Path(path).name)
