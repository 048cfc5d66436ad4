"""Forests of comparison trees: training, pooled prediction, model files.

Prediction pools the leaf members a query reaches across all M trees and
votes (classification) or averages (regression) over the pool. The pool
is a multiset by default: an item reached through two trees counts twice.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import comptree, rng
from .dataset import subsample
from .errors import (
    ConfigError,
    FingerprintMismatchError,
    ModelFormatError,
    TaskMismatchError,
)
from .oracle import TripletOracle

TASKS = ("classify", "regress")
MULTICLASS_RULES = ("one_vs_one", "plurality")
POOLING = ("multiset", "set")
AGGREGATION = ("pooled", "per_tree")

_MAGIC = b"COMPRFv1"
_VERSION = 1


@dataclass(frozen=True)
class ForestParams:
    M: int
    n0: int
    seed: int
    policy: comptree.PivotPolicy
    task: str
    r: float = 1.0
    multiclass_rule: str = "one_vs_one"
    pooling: str = "multiset"
    aggregation: str = "pooled"

    def __post_init__(self):
        if self.M < 1:
            raise ConfigError(f"M must be >= 1, got {self.M}")
        if self.n0 < 1:
            raise ConfigError(f"n0 must be >= 1, got {self.n0}")
        if not 0 < self.r <= 1:
            raise ConfigError(f"subsampling ratio must be in (0, 1], got {self.r}")
        if self.task not in TASKS:
            raise ConfigError(f"unknown task {self.task!r}")
        if self.multiclass_rule not in MULTICLASS_RULES:
            raise ConfigError(f"unknown multiclass rule {self.multiclass_rule!r}")
        if self.pooling not in POOLING:
            raise ConfigError(f"unknown pooling {self.pooling!r}")
        if self.aggregation not in AGGREGATION:
            raise ConfigError(f"unknown aggregation {self.aggregation!r}")
        if self.task == "regress" and self.policy.kind == comptree.SUPERVISED:
            raise ConfigError(
                "regression has no class labels to split on; use the unsupervised policy"
            )


@dataclass
class Prediction:
    value: float | int
    pooled_size: int
    triplet_queries: int
    per_tree_leaf_sizes: list


@dataclass(eq=False)
class Forest:
    trees: list
    subsamples: list
    params: ForestParams
    fingerprint: str
    train_ids: np.ndarray
    train_values: np.ndarray
    class_count: int | None = None
    _dense: np.ndarray | None = field(default=None, repr=False)

    @property
    def M(self) -> int:
        return len(self.trees)

    def _values_by_id(self) -> np.ndarray:
        if self._dense is None:
            dense = np.zeros(int(self.train_ids.max()) + 1, dtype=np.float64)
            dense[self.train_ids] = self.train_values
            self._dense = dense
        return self._dense

    def predict(self, query: int, oracle: TripletOracle) -> Prediction:
        return self.predict_batch([query], oracle)[0]

    def predict_batch(self, queries, oracle: TripletOracle, engine: str = "auto"):
        """Element-wise predictions for many queries; order-preserving."""
        q = np.asarray(queries, dtype=np.int64)
        k = len(q)
        if k == 0:
            return []
        classify = self.params.task == "classify"
        values = self._values_by_id()
        n_classes = self.class_count if classify else 0
        per_tree_sizes = np.empty((self.M, k), dtype=np.int64)
        queries_used = np.zeros(k, dtype=np.int64)
        if self.params.aggregation == "per_tree":
            tree_votes = np.empty((self.M, k), dtype=np.float64)
        if classify:
            counts = np.zeros((k, n_classes), dtype=np.int64)
        else:
            sums = np.zeros(k, dtype=np.float64)
        pool_sets = [set() for _ in range(k)] if self.params.pooling == "set" else None
        for j, tree in enumerate(self.trees):
            leaves, depths = tree.traverse_batch(q, oracle, engine=engine)
            queries_used += depths
            starts = tree.leaf_start[leaves]
            sizes = tree.leaf_size[leaves]
            per_tree_sizes[j] = sizes
            offsets = np.concatenate(([0], np.cumsum(sizes)))
            flat = np.arange(offsets[-1]) - np.repeat(offsets[:-1], sizes)
            members = tree.members[flat + np.repeat(starts, sizes)]
            qidx = np.repeat(np.arange(k), sizes)
            vals = values[members]
            if pool_sets is not None:
                for pos, m in zip(qidx, members):
                    pool_sets[pos].add(int(m))
            if self.params.aggregation == "per_tree":
                for pos in range(k):
                    seg = vals[offsets[pos] : offsets[pos + 1]]
                    if classify:
                        c = np.bincount(seg.astype(np.int64), minlength=n_classes)
                        tree_votes[j, pos] = _decide(c, self.params.multiclass_rule)
                    else:
                        tree_votes[j, pos] = seg.mean()
            elif classify:
                slot = qidx * n_classes + vals.astype(np.int64)
                counts += np.bincount(slot, minlength=k * n_classes).reshape(k, n_classes)
            else:
                sums += np.bincount(qidx, weights=vals, minlength=k)
        out = []
        for pos in range(k):
            sizes = per_tree_sizes[:, pos]
            if self.params.aggregation == "per_tree":
                if classify:
                    votes = np.bincount(
                        tree_votes[:, pos].astype(np.int64), minlength=n_classes
                    )
                    value = _decide(votes, self.params.multiclass_rule)
                else:
                    value = float(tree_votes[:, pos].mean())
                pooled = int(sizes.sum())
            elif pool_sets is not None:
                ids = np.sort(
                    np.fromiter(pool_sets[pos], dtype=np.int64, count=len(pool_sets[pos]))
                )
                vals = values[ids]
                pooled = len(ids)
                if classify:
                    value = _decide(
                        np.bincount(vals.astype(np.int64), minlength=n_classes),
                        self.params.multiclass_rule,
                    )
                else:
                    value = float(vals.mean())
            else:
                pooled = int(sizes.sum())
                if classify:
                    value = _decide(counts[pos], self.params.multiclass_rule)
                else:
                    value = float(sums[pos] / pooled)
            out.append(
                Prediction(
                    value=value,
                    pooled_size=pooled,
                    triplet_queries=int(queries_used[pos]),
                    per_tree_leaf_sizes=[int(v) for v in sizes],
                )
            )
        return out

    def predict_values(self, queries, oracle: TripletOracle, engine: str = "auto") -> np.ndarray:
        preds = self.predict_batch(queries, oracle, engine=engine)
        dtype = np.int64 if self.params.task == "classify" else np.float64
        return np.array([p.value for p in preds], dtype=dtype)


def _decide(counts: np.ndarray, rule: str) -> int:
    """Class decision from pooled per-class counts; ties favor smaller codes."""
    if rule == "plurality":
        return int(np.argmax(counts))
    present = np.flatnonzero(counts > 0)
    if len(present) == 0:
        return 0
    if len(present) == 1:
        return int(present[0])
    # pairwise wins among present classes only; every present class beats
    # every absent one and absent classes cannot win, so the result equals
    # the full tournament over all codes
    wins = np.zeros(len(present))
    for a in range(len(present)):
        for b in range(a + 1, len(present)):
            ca, cb = counts[present[a]], counts[present[b]]
            if ca > cb:
                wins[a] += 1.0
            elif cb > ca:
                wins[b] += 1.0
            else:
                wins[a] += 0.5
                wins[b] += 0.5
    best = np.flatnonzero(wins == wins.max())
    if len(best) > 1:
        tallies = counts[present[best]]
        best = best[tallies == tallies.max()]
    return int(present[best[0]])


def fit(train, oracle: TripletOracle, y, params: ForestParams,
        fingerprint: str = "", engine: str = "auto") -> Forest:
    """Train M comparison trees, tree j on an independent subsample.

    Per-tree seeds come from a fixed mixing chain over (params.seed, j),
    so growing M never changes the earlier trees. `y` holds class codes
    or regression targets for (at least) every index in `train`.
    """
    train = np.asarray(train, dtype=np.int64)
    if len(train) == 0:
        raise ConfigError("cannot fit a forest on an empty train set")
    y = np.asarray(y)
    if params.task == "classify":
        if y.dtype.kind not in "iu":
            raise TaskMismatchError(
                "classification needs integer class codes, got "
                f"dtype {y.dtype}"
            )
        y = y.astype(np.int64)
        class_count = int(y[train].max()) + 1
        if y[train].min() < 0:
            raise TaskMismatchError("negative class codes")
    else:
        if y.dtype.kind not in "iuf":
            raise TaskMismatchError(f"regression needs numeric targets, got dtype {y.dtype}")
        y = y.astype(np.float64)
        class_count = None
    tree_seed_root = rng.derive(params.seed, rng.TREE)
    labels = y if params.policy.kind == comptree.SUPERVISED else None
    trees = []
    subsamples = []
    for j in range(params.M):
        seed_j = rng.derive(tree_seed_root, j)
        sub = subsample(train, params.r, seed_j)
        build_params = comptree.BuildParams(n0=params.n0, seed=seed_j, policy=params.policy)
        trees.append(comptree.build(sub, oracle, labels, build_params, engine=engine))
        subsamples.append(sub)
    return Forest(
        trees=trees,
        subsamples=subsamples,
        params=params,
        fingerprint=fingerprint,
        train_ids=train,
        train_values=y[train].astype(np.float64),
        class_count=class_count,
    )


def _write_block(fh, data: bytes):
    fh.write(struct.pack("<Q", len(data)))
    fh.write(data)


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ModelFormatError(f"truncated model file (wanted {n} bytes, got {len(data)})")
    return data


def _read_block(fh) -> bytes:
    (n,) = struct.unpack("<Q", _read_exact(fh, 8))
    return _read_exact(fh, n)


def _write_arr(fh, arr, dtype: str):
    a = np.ascontiguousarray(arr, dtype=dtype)
    _write_block(fh, struct.pack("<q", a.shape[0]) + a.tobytes())


def _read_arr(fh, dtype: str) -> np.ndarray:
    raw = _read_block(fh)
    (n,) = struct.unpack("<q", raw[:8])
    body = raw[8:]
    if len(body) != n * np.dtype(dtype).itemsize:
        raise ModelFormatError("array block length mismatch")
    return np.frombuffer(body, dtype=dtype).copy()


_TREE_FIELDS = (
    "left_pivot", "right_pivot", "left_child", "right_child",
    "leaf_start", "leaf_size", "members",
)


def save(forest: Forest, path) -> None:
    """Write the model; fixed little-endian layout, byte-stable per seed."""
    p = forest.params
    meta = {
        "M": p.M,
        "n0": p.n0,
        "seed": p.seed,
        "r": p.r,
        "policy": p.policy.kind,
        "pair_scheme": p.policy.pair_scheme,
        "task": p.task,
        "multiclass_rule": p.multiclass_rule,
        "pooling": p.pooling,
        "aggregation": p.aggregation,
        "class_count": forest.class_count,
        "shared_subsample": p.r == 1.0,
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        _write_block(fh, json.dumps(meta, sort_keys=True, separators=(",", ":")).encode())
        _write_block(fh, forest.fingerprint.encode())
        _write_arr(fh, forest.train_ids, "<i8")
        _write_arr(fh, forest.train_values, "<f8")
        for j, tree in enumerate(forest.trees):
            if not meta["shared_subsample"]:
                _write_arr(fh, forest.subsamples[j], "<i8")
            for name in _TREE_FIELDS:
                _write_arr(fh, getattr(tree, name), "<i8")
            _write_block(fh, struct.pack("<qq", tree.n0, tree.build_queries))


def load(path, expect_fingerprint: str | None = None) -> Forest:
    """Read a model written by `save`.

    When `expect_fingerprint` is given (usually a freshly loaded dataset's
    fingerprint) it must equal the stored one; a mismatch means the model
    was trained on different data.
    """
    with open(path, "rb") as fh:
        if _read_exact(fh, len(_MAGIC)) != _MAGIC:
            raise ModelFormatError(f"{path}: not a comprf model file")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != _VERSION:
            raise ModelFormatError(
                f"{path}: model format version {version}, expected {_VERSION}"
            )
        try:
            meta = json.loads(_read_block(fh).decode())
        except ValueError as e:
            raise ModelFormatError(f"{path}: bad params block: {e}") from None
        fingerprint = _read_block(fh).decode()
        if expect_fingerprint is not None and fingerprint != expect_fingerprint:
            raise FingerprintMismatchError(
                f"{path}: model was trained on different data "
                f"(stored {fingerprint[:12]}.., dataset {expect_fingerprint[:12]}..)"
            )
        params = ForestParams(
            M=meta["M"],
            n0=meta["n0"],
            seed=meta["seed"],
            r=meta["r"],
            policy=comptree.PivotPolicy(meta["policy"], meta["pair_scheme"]),
            task=meta["task"],
            multiclass_rule=meta["multiclass_rule"],
            pooling=meta["pooling"],
            aggregation=meta["aggregation"],
        )
        train_ids = _read_arr(fh, "<i8")
        train_values = _read_arr(fh, "<f8")
        trees = []
        subsamples = []
        for _ in range(meta["M"]):
            sub = train_ids if meta["shared_subsample"] else _read_arr(fh, "<i8")
            arrays = {name: _read_arr(fh, "<i8") for name in _TREE_FIELDS}
            n0, build_queries = struct.unpack("<qq", _read_block(fh))
            trees.append(
                comptree.CompTree(n0=int(n0), build_queries=int(build_queries), **arrays)
            )
            subsamples.append(sub)
    return Forest(
        trees=trees,
        subsamples=subsamples,
        params=params,
        fingerprint=fingerprint,
        train_ids=train_ids,
        train_values=train_values,
        class_count=meta["class_count"],
    )
