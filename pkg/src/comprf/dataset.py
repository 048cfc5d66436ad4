"""Data model, file ingestion, splits, and seeded subsampling."""

from __future__ import annotations

import csv
import gzip
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, TaskMismatchError
from . import rng as _rng

MAX_CLASSES = 1 << 16

CLASSIFY = "classify"
REGRESS = "regress"


@dataclass
class LabeledDataset:
    """Immutable-by-convention container for one dataset.

    Feature vectors are optional (distance-matrix workflows carry none).
    For supervised tasks exactly one of `class_labels` / `targets` is set.
    The fingerprint hashes the parsed numeric content, so two files that
    format the same numbers differently produce equal fingerprints.
    `label_map` records the raw-token coding when one was needed, so a
    second file can be loaded under the same codes.
    """

    features: np.ndarray | None = None
    class_labels: np.ndarray | None = None
    targets: np.ndarray | None = None
    class_count: int | None = None
    label_map: dict | None = None
    fingerprint: str = field(init=False, default="")

    def __post_init__(self):
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.ndim != 2:
                raise DataError(f"features must be 2-D, got shape {self.features.shape}")
        if self.class_labels is not None and self.targets is not None:
            raise DataError("a dataset carries class labels or targets, not both")
        if self.class_labels is not None:
            self.class_labels = np.asarray(self.class_labels, dtype=np.int64)
            if self.class_labels.size and self.class_labels.min() < 0:
                raise DataError("class labels must be non-negative integer codes")
            if self.class_count is None:
                self.class_count = int(self.class_labels.max()) + 1 if self.class_labels.size else 0
            if self.class_labels.size and self.class_labels.max() >= self.class_count:
                raise DataError(
                    f"label {int(self.class_labels.max())} out of range for "
                    f"class_count={self.class_count}"
                )
            if self.class_count > MAX_CLASSES:
                raise DataError(f"class_count {self.class_count} exceeds {MAX_CLASSES}")
        if self.targets is not None:
            self.targets = np.asarray(self.targets, dtype=np.float64)
            self.class_count = None
        lengths = {
            arr.shape[0]
            for arr in (self.features, self.class_labels, self.targets)
            if arr is not None
        }
        if len(lengths) > 1:
            raise DataError(f"row counts disagree: {sorted(lengths)}")
        if not lengths or not lengths.pop():
            raise DataError("dataset is empty")
        self.fingerprint = self._fingerprint()

    def _fingerprint(self) -> str:
        h = hashlib.sha256(b"comprf-dataset-1")
        for tag, arr in (
            (b"F", self.features),
            (b"C", self.class_labels),
            (b"T", self.targets),
        ):
            h.update(tag)
            if arr is None:
                h.update(struct.pack("<q", -1))
            else:
                h.update(struct.pack("<q", arr.ndim))
                h.update(struct.pack(f"<{arr.ndim}q", *arr.shape))
                h.update(np.ascontiguousarray(arr).astype("<f8" if arr.dtype.kind == "f" else "<i8").tobytes())
        h.update(struct.pack("<q", -1 if self.class_count is None else self.class_count))
        return h.hexdigest()

    @property
    def n(self) -> int:
        for arr in (self.features, self.class_labels, self.targets):
            if arr is not None:
                return arr.shape[0]
        raise DataError("dataset is empty")

    @property
    def d(self):
        return None if self.features is None else self.features.shape[1]

    @property
    def task(self):
        if self.class_labels is not None:
            return CLASSIFY
        if self.targets is not None:
            return REGRESS
        return None

    @property
    def y(self) -> np.ndarray:
        if self.class_labels is not None:
            return self.class_labels
        if self.targets is not None:
            return self.targets
        raise DataError("dataset is unlabeled")

    def select(self, indices) -> "LabeledDataset":
        """Row-subset copy (fingerprint reflects the new content)."""
        idx = np.asarray(indices, dtype=np.intp)
        return LabeledDataset(
            features=None if self.features is None else self.features[idx],
            class_labels=None if self.class_labels is None else self.class_labels[idx],
            targets=None if self.targets is None else self.targets[idx],
            class_count=self.class_count,
            label_map=self.label_map,
        )


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float
    seed: int
    stratified: bool = False

    def __post_init__(self):
        if not 0 < self.train_fraction <= 1:
            raise ConfigError(f"train_fraction must be in (0, 1], got {self.train_fraction}")


def _open_text(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rt", newline="")
    return open(path, "rt", newline="")


def _encode_labels(raw: list[str], task: str, path, label_map=None):
    """Returns (class_labels, targets, label_map)."""
    if task == REGRESS:
        try:
            return None, np.array([float(v) for v in raw], dtype=np.float64), None
        except ValueError:
            bad = next(i for i, v in enumerate(raw) if not _is_float(v))
            raise DataError(f"{path}: row {bad}: target {raw[bad]!r} is not a number") from None
    if task != CLASSIFY:
        raise ConfigError(f"unknown task {task!r} (expected {CLASSIFY!r} or {REGRESS!r})")
    if label_map is None:
        try:
            codes = [int(v) for v in raw]
            if min(codes) >= 0:
                return np.array(codes, dtype=np.int64), None, None
        except ValueError:
            pass
    # dense codes in first-appearance order, possibly continuing a given map
    mapping: dict[str, int] = dict(label_map) if label_map else {}
    codes = [mapping.setdefault(v, len(mapping)) for v in raw]
    return np.array(codes, dtype=np.int64), None, mapping


def _is_float(v: str) -> bool:
    try:
        float(v)
        return True
    except ValueError:
        return False


def load_csv(path, task: str, label_column=-1, label_map=None) -> LabeledDataset:
    """Load a CSV with one label column (by header name or index).

    A header row is detected by failing to parse as numbers and is skipped;
    gzip input is detected by the `.gz` suffix. Classification labels may
    be arbitrary strings and are coded by first appearance; non-negative
    integer labels are taken as codes directly.
    """
    with _open_text(path) as fh:
        rows = [r for r in csv.reader(fh) if r]
    if not rows:
        raise DataError(f"{path}: empty file")
    if isinstance(label_column, str):
        header, rows = rows[0], rows[1:]
        if label_column not in header:
            raise DataError(f"{path}: no column named {label_column!r}")
        col = header.index(label_column)
    else:
        col = int(label_column)
        if col < 0:
            col += len(rows[0])
        if not 0 <= col < len(rows[0]):
            raise DataError(f"{path}: label column {label_column} out of range")
        # a header row is one whose feature cells are not numbers
        if any(not _is_float(c) for j, c in enumerate(rows[0]) if j != col):
            rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: header but no data rows")
    width = len(rows[0])
    feats, raw_labels = [], []
    for i, row in enumerate(rows):
        if len(row) != width:
            raise DataError(f"{path}: row {i}: {len(row)} columns, expected {width}")
        raw_labels.append(row[col])
        vals = []
        for j, cell in enumerate(row):
            if j == col:
                continue
            try:
                vals.append(float(cell))
            except ValueError:
                raise DataError(f"{path}: row {i}, column {j}: {cell!r} is not a number") from None
        feats.append(vals)
    labels, targets, used_map = _encode_labels(raw_labels, task, path, label_map)
    return LabeledDataset(
        features=np.array(feats, dtype=np.float64),
        class_labels=labels,
        targets=targets,
        label_map=used_map,
    )


def load_libsvm(path, task: str, label_map=None) -> LabeledDataset:
    """Load sparse "label idx:val" lines (1-based indices) into dense rows."""
    raw_labels: list[str] = []
    entries: list[list[tuple[int, float]]] = []
    d = 0
    with _open_text(path) as fh:
        for i, line in enumerate(fh):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            raw_labels.append(parts[0])
            row = []
            prev = 0
            for tok in parts[1:]:
                try:
                    idx_s, val_s = tok.split(":", 1)
                    idx, val = int(idx_s), float(val_s)
                except ValueError:
                    raise DataError(f"{path}: row {i}: malformed pair {tok!r}") from None
                if idx <= prev:
                    raise DataError(
                        f"{path}: row {i}: index {idx} not increasing (after {prev})"
                    )
                prev = idx
                row.append((idx, val))
            d = max(d, prev)
            entries.append(row)
    if not entries:
        raise DataError(f"{path}: empty file")
    x = np.zeros((len(entries), d), dtype=np.float64)
    for i, row in enumerate(entries):
        for idx, val in row:
            x[i, idx - 1] = val
    labels, targets, used_map = _encode_labels(raw_labels, task, path, label_map)
    return LabeledDataset(features=x, class_labels=labels, targets=targets, label_map=used_map)


def split(dataset: LabeledDataset, spec: SplitSpec):
    """Seeded train/test partition of {0..n-1}; returns (train, test) indices.

    The stratified variant keeps per-class train proportions within one
    item of the global fraction, allocating leftover slots by largest
    remainder (ties to the smaller class code).
    """
    n = dataset.n
    gen = _rng.generator(_rng.derive(spec.seed, _rng.SPLIT))
    n_train = int(np.floor(spec.train_fraction * n))
    if not spec.stratified:
        perm = gen.permutation(n)
        return perm[:n_train].copy(), perm[n_train:].copy()
    if dataset.class_labels is None:
        raise TaskMismatchError("stratified split requires class labels")
    labels = dataset.class_labels
    classes = np.unique(labels)
    want = {}
    remainders = []
    total = 0
    for c in classes:
        nc = int((labels == c).sum())
        base = int(np.floor(spec.train_fraction * nc))
        want[int(c)] = base
        total += base
        remainders.append((-(spec.train_fraction * nc - base), int(c)))
    for _, c in sorted(remainders):
        if total >= n_train:
            break
        want[c] += 1
        total += 1
    train_parts, test_parts = [], []
    for c in classes:
        members = np.flatnonzero(labels == c)
        perm = members[gen.permutation(len(members))]
        k = want[int(c)]
        train_parts.append(perm[:k])
        test_parts.append(perm[k:])
    train = np.concatenate(train_parts)
    test = np.concatenate(test_parts)
    return train[gen.permutation(len(train))], test[gen.permutation(len(test))]


def subsample(indices, ratio: float, seed: int) -> np.ndarray:
    """floor(ratio * len) distinct entries of `indices`, without replacement.

    ratio = 1 returns the input unchanged (and consumes no randomness),
    so unsubsampled runs cost nothing and stay reproducible.
    """
    if not 0 < ratio <= 1:
        raise ConfigError(f"subsample ratio must be in (0, 1], got {ratio}")
    idx = np.asarray(indices)
    if ratio == 1:
        return idx
    k = int(np.floor(ratio * len(idx)))
    if k == 0:
        raise ConfigError(
            f"subsample of {len(idx)} items at ratio {ratio} would be empty"
        )
    gen = _rng.generator(_rng.derive(seed, _rng.SUBSAMPLE))
    return idx[gen.permutation(len(idx))[:k]]


def to_csv(dataset: LabeledDataset, path) -> None:
    """Write features plus a final label column; inverse of `load_csv`."""
    if dataset.features is None:
        raise DataError("dataset has no feature vectors to write")
    y = dataset.y
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wt", newline="") as fh:
        w = csv.writer(fh)
        for row, label in zip(dataset.features, y):
            out = [repr(float(v)) for v in row]
            out.append(str(int(label)) if dataset.task == CLASSIFY else repr(float(label)))
            w.writerow(out)
