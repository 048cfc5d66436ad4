"""Evaluation harness: metrics, cross-validation, repeated experiments.

`cross_validate` scores a grid of (n0, M) cells with K-fold CV. Because
per-tree seeds depend only on the fold seed and the tree index, the M_max
trees grown for a fold are shared across every M in the grid: scoring a
smaller M uses the first M trees and gives bit-identical results to an
independently trained forest of that size.

`run_experiment` drives a full benchmark run from a flat key=value config:
load data, split (or use a fixed train/test pair), optionally pick (n0, M)
by CV per repeat, train, predict, and aggregate the metric over repeats.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from . import dataset as ds_mod
from . import forest as forest_mod
from . import rng
from .comptree import SUPERVISED, UNSUPERVISED, PAIR_SCHEMES, PivotPolicy
from .dataset import CLASSIFY, REGRESS, LabeledDataset, SplitSpec
from .errors import ConfigError, DataError, TaskMismatchError
from .oracle import (
    DistanceMatrixOracle,
    euclidean_oracle,
    gram_oracle,
    read_square_matrix,
)

FORMATS = ("csv", "libsvm", "distmatrix", "gram")
_MATRIX_FORMATS = ("distmatrix", "gram")


def error_rate(y_true, y_pred) -> float:
    """Fraction of mismatched labels."""
    t = np.asarray(y_true)
    p = np.asarray(y_pred)
    if t.shape != p.shape:
        raise DataError(f"label/prediction length mismatch: {t.shape} vs {p.shape}")
    if t.size == 0:
        raise DataError("cannot score an empty prediction set")
    return float(np.mean(t != p))


def rmse(y_true, y_pred) -> float:
    t = np.asarray(y_true, dtype=np.float64)
    p = np.asarray(y_pred, dtype=np.float64)
    if t.shape != p.shape:
        raise DataError(f"target/prediction length mismatch: {t.shape} vs {p.shape}")
    if t.size == 0:
        raise DataError("cannot score an empty prediction set")
    return float(np.sqrt(np.mean((t - p) ** 2)))


def fold_indices(n: int, folds: int, seed: int, labels=None) -> np.ndarray:
    """Assign each of n items to one of `folds` folds; returns fold ids.

    Plain folds chop a seeded permutation into contiguous blocks whose
    sizes differ by at most one. With `labels`, items are dealt per class
    round-robin (ascending class code, carrying the fold offset across
    classes) so both class mix and fold sizes stay balanced.
    """
    if folds < 2:
        raise ConfigError(f"need at least 2 folds, got {folds}")
    if folds > n:
        raise ConfigError(f"cannot split {n} items into {folds} folds")
    gen = rng.generator(rng.derive(seed, rng.FOLD))
    out = np.empty(n, dtype=np.int64)
    if labels is None:
        perm = gen.permutation(n)
        sizes = np.full(folds, n // folds, dtype=np.int64)
        sizes[: n % folds] += 1
        stop = np.cumsum(sizes)
        for f in range(folds):
            out[perm[stop[f] - sizes[f] : stop[f]]] = f
    else:
        labels = np.asarray(labels)
        if labels.shape != (n,):
            raise ConfigError(f"need one label per item, got shape {labels.shape}")
        offset = 0
        for c in np.unique(labels):
            pos = np.flatnonzero(labels == c)
            pos = pos[gen.permutation(pos.size)]
            out[pos] = (offset + np.arange(pos.size)) % folds
            offset = (offset + pos.size) % folds
    return out


@dataclass(frozen=True)
class GridSpec:
    """Search grid for cross-validation; values are deduplicated and sorted."""

    n0_values: tuple
    m_values: tuple
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        for name in ("n0_values", "m_values"):
            raw = getattr(self, name)
            try:
                vals = tuple(sorted({int(v) for v in raw}))
            except (TypeError, ValueError):
                raise ConfigError(f"{name} must be a sequence of integers, got {raw!r}") from None
            if not vals:
                raise ConfigError(f"{name} must not be empty")
            if vals[0] < 1:
                raise ConfigError(f"{name} entries must be >= 1, got {vals[0]}")
            object.__setattr__(self, name, vals)
        if self.folds < 2:
            raise ConfigError(f"need at least 2 folds, got {self.folds}")


@dataclass(frozen=True)
class CVResult:
    grid: GridSpec
    metric: str
    fold_metrics: np.ndarray  # (folds, |n0 values|, |M values|)
    means: np.ndarray  # (|n0 values|, |M values|)
    best_n0: int
    best_m: int
    best_mean: float
    triplet_queries: int


def cross_validate(train, oracle, y, grid: GridSpec, policy: PivotPolicy,
                   task: str, r: float = 1.0, stratified: bool = False,
                   engine: str = "auto") -> CVResult:
    """K-fold grid search over (n0, M); ties prefer smaller n0, then smaller M.

    For each (fold, n0) cell one forest of max(M) trees is grown and every
    M checkpoint is scored from its first M trees. The per-tree count (or
    sum) accumulation mirrors pooled prediction exactly, so each cell's
    score equals what a fresh forest of that size would produce.
    """
    train = np.asarray(train, dtype=np.int64)
    y = np.asarray(y)
    if task not in forest_mod.TASKS:
        raise ConfigError(f"unknown task {task!r}")
    if train.size == 0:
        raise ConfigError("cannot cross-validate an empty train set")
    if grid.folds > train.size:
        raise ConfigError(
            f"{grid.folds}-fold split needs at least {grid.folds} training items, got {train.size}"
        )
    classify = task == CLASSIFY
    labels = None
    if stratified:
        if not classify:
            raise ConfigError("stratified folds need class labels")
        labels = y[train]
    fold_of = fold_indices(train.size, grid.folds, grid.seed, labels=labels)
    fold_root = rng.derive(grid.seed, rng.FOLD)
    n0_values, m_values = grid.n0_values, grid.m_values
    m_max = m_values[-1]
    col_of = {m: b for b, m in enumerate(m_values)}
    fm = np.zeros((grid.folds, len(n0_values), len(m_values)))
    total_q = 0
    for f in range(grid.folds):
        fit_ids = train[fold_of != f]
        val_ids = train[fold_of == f]
        y_val = y[val_ids]
        seed_f = rng.derive(fold_root, f)
        k = val_ids.size
        for a, n0 in enumerate(n0_values):
            params = forest_mod.ForestParams(
                M=m_max, n0=n0, seed=seed_f, policy=policy, task=task, r=r
            )
            fo = forest_mod.fit(fit_ids, oracle, y, params, engine=engine)
            total_q += sum(t.build_queries for t in fo.trees)
            values = fo._values_by_id()
            if classify:
                counts = np.zeros((k, fo.class_count), dtype=np.int64)
            else:
                sums = np.zeros(k)
            sizes_total = np.zeros(k, dtype=np.int64)
            for j, tree in enumerate(fo.trees):
                leaves, depths = tree.traverse_batch(val_ids, oracle, engine=engine)
                total_q += int(depths.sum())
                starts = tree.leaf_start[leaves]
                sizes = tree.leaf_size[leaves]
                sizes_total += sizes
                offsets = np.concatenate(([0], np.cumsum(sizes)))
                flat = np.arange(offsets[-1]) - np.repeat(offsets[:-1], sizes)
                members = tree.members[flat + np.repeat(starts, sizes)]
                vals = values[members]
                qidx = np.repeat(np.arange(k), sizes)
                if classify:
                    slot = qidx * fo.class_count + vals.astype(np.int64)
                    counts += np.bincount(slot, minlength=k * fo.class_count).reshape(
                        k, fo.class_count
                    )
                else:
                    sums += np.bincount(qidx, weights=vals, minlength=k)
                b = col_of.get(j + 1)
                if b is None:
                    continue
                if classify:
                    # argmax equals the pooled class decision for both
                    # multiclass rules (pairwise wins are monotone in counts)
                    fm[f, a, b] = error_rate(y_val, np.argmax(counts, axis=1))
                else:
                    fm[f, a, b] = rmse(y_val, sums / sizes_total)
    means = fm.mean(axis=0)
    best = None
    for a, n0 in enumerate(n0_values):
        for b, m in enumerate(m_values):
            if best is None or means[a, b] < best[0]:
                best = (means[a, b], n0, m)
    return CVResult(
        grid=grid,
        metric="error_rate" if classify else "rmse",
        fold_metrics=fm,
        means=means,
        best_n0=best[1],
        best_m=best[2],
        best_mean=float(best[0]),
        triplet_queries=total_q,
    )


def knn_predict(train, queries, oracle, y, k: int) -> np.ndarray:
    """k-nearest-neighbor class votes using the oracle's raw distance rows.

    Distance ties keep the earlier entry of `train` (stable sort); vote
    ties go to the smaller class code.
    """
    train = np.asarray(train, dtype=np.int64)
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if k > train.size:
        raise ConfigError(f"k={k} but the train set has only {train.size} items")
    y_tr = np.asarray(y)[train].astype(np.int64)
    q = np.asarray(queries, dtype=np.int64)
    out = np.empty(q.size, dtype=np.int64)
    for i, qid in enumerate(q):
        row = oracle.distances_from(int(qid))[train]
        nearest = np.argsort(row, kind="stable")[:k]
        out[i] = int(np.argmax(np.bincount(y_tr[nearest])))
    return out


def knn_baseline(train, test, oracle, y, k: int) -> "EvalReport":
    """Score KNN on a train/test split; classification only."""
    t0 = time.perf_counter()
    y = np.asarray(y)
    if y.dtype.kind not in "iu":
        raise TaskMismatchError(
            "the KNN baseline votes over integer class codes; regression targets are not supported"
        )
    test = np.asarray(test, dtype=np.int64)
    preds = knn_predict(train, test, oracle, y, k)
    err = error_rate(y[test], preds)
    return EvalReport(
        metric="error_rate",
        estimate=err,
        std=0.0,
        per_repeat=(err,),
        triplet_queries=0,
        wall_seconds=time.perf_counter() - t0,
        params={"method": "knn", "k": int(k)},
        rows=(),
    )


@dataclass(frozen=True)
class EvalReport:
    """Aggregated result of an experiment: metric mean/std over repeats.

    `std` uses the population convention (a single repeat reports 0).
    `triplet_queries` counts every comparison issued: model selection,
    training, and prediction. `rows` holds one dict per repeat and feeds
    the per-repeat CSV, which excludes timing so reruns are byte-identical.
    """

    metric: str
    estimate: float
    std: float
    per_repeat: tuple
    triplet_queries: int
    wall_seconds: float
    params: dict
    rows: tuple = ()

    def to_dict(self) -> dict:
        return {
            "metric": self.metric,
            "estimate": self.estimate,
            "std": self.std,
            "per_repeat": list(self.per_repeat),
            "triplet_queries": self.triplet_queries,
            "wall_seconds": self.wall_seconds,
            "params": self.params,
            "repeats": [dict(r) for r in self.rows],
        }


_ROW_FIELDS = (
    "repeat", "seed", "value", "n0", "trees",
    "train_size", "test_size", "build_queries", "predict_queries", "cv_queries",
)


def write_report(report: EvalReport, out_dir) -> None:
    """Write report.json (full summary) and repeats.csv (per-repeat rows)."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "report.json"), "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(out_dir, "repeats.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_ROW_FIELDS)
        for r in report.rows:
            w.writerow([r[k] for k in _ROW_FIELDS])


def parse_config(text: str) -> dict:
    """Flat `key = value` lines; '#' comments and blank lines are skipped."""
    out: dict = {}
    for ln, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if not s or s.startswith("#"):
            continue
        if "=" not in s:
            raise ConfigError(f"config line {ln}: expected key = value, got {line!r}")
        key, _, value = s.partition("=")
        key = key.strip()
        value = value.strip()
        if not key:
            raise ConfigError(f"config line {ln}: empty key")
        if key in out:
            raise ConfigError(f"config line {ln}: duplicate key {key!r}")
        out[key] = value
    return out


def parse_grid(text) -> dict:
    """Grid syntax: `n0=1,5,10;trees=32,128` (both parts required)."""
    out = {}
    for part in str(text).split(";"):
        part = part.strip()
        if not part:
            continue
        name, sep, values = part.partition("=")
        name = name.strip()
        if not sep or name not in ("n0", "trees"):
            raise ConfigError(
                f"bad grid component {part!r}; expected n0=... and trees=... separated by ';'"
            )
        if name in out:
            raise ConfigError(f"grid lists {name!r} twice")
        try:
            out[name] = tuple(int(v) for v in values.split(","))
        except ValueError:
            raise ConfigError(f"bad grid values for {name!r}: {values!r}") from None
    for name in ("n0", "trees"):
        if name not in out:
            raise ConfigError(f"grid is missing {name!r} (syntax: n0=1,5;trees=32,128)")
    return out


def _as_int(cfg, key, default=None, minimum=None):
    if key not in cfg:
        if default is None:
            raise ConfigError(f"config is missing required key {key!r}")
        return default
    try:
        v = int(cfg[key])
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r} must be an integer, got {cfg[key]!r}") from None
    if minimum is not None and v < minimum:
        raise ConfigError(f"config key {key!r} must be >= {minimum}, got {v}")
    return v


def _as_float(cfg, key, default):
    if key not in cfg:
        return default
    try:
        return float(cfg[key])
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r} must be a number, got {cfg[key]!r}") from None


def _as_bool(cfg, key, default=False):
    if key not in cfg:
        return default
    v = cfg[key]
    if isinstance(v, bool):
        return v
    s = str(v).strip().lower()
    if s in ("true", "yes", "1", "on"):
        return True
    if s in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"config key {key!r} must be a boolean, got {v!r}")


def _as_choice(cfg, key, choices, default=None):
    if key not in cfg:
        if default is None:
            raise ConfigError(f"config is missing required key {key!r}")
        return default
    v = str(cfg[key])
    if v not in choices:
        raise ConfigError(f"config key {key!r} must be one of {choices}, got {v!r}")
    return v


def _read_label_file(path, task: str) -> LabeledDataset:
    """One label (or target) per line; used by the matrix-backed formats."""
    raw = []
    with ds_mod._open_text(path) as fh:
        for line in fh:
            s = line.strip()
            if not s or s.startswith("#"):
                continue
            raw.append(s)
    if not raw:
        raise DataError(f"{path}: no labels found")
    class_labels, targets, label_map = ds_mod._encode_labels(raw, task, path)
    return LabeledDataset(class_labels=class_labels, targets=targets, label_map=label_map)


def _matrix_fingerprint(matrix: np.ndarray, labels: LabeledDataset) -> str:
    h = hashlib.sha256(b"comprf-matrix-1")
    h.update(np.int64(matrix.shape[0]).tobytes())
    h.update(np.ascontiguousarray(matrix, dtype="<f8").tobytes())
    h.update(labels.fingerprint.encode())
    return h.hexdigest()


def load_table(path, fmt: str, task: str, label_column=-1, labels_path=None):
    """Load one data file plus its oracle; returns (dataset, oracle, fingerprint).

    For `distmatrix`/`gram` the file holds a square matrix and the labels
    come from a separate one-per-line file; the returned dataset then has
    values but no feature vectors.
    """
    if fmt not in FORMATS:
        raise ConfigError(f"unknown data format {fmt!r}; expected one of {FORMATS}")
    if fmt in _MATRIX_FORMATS:
        if labels_path is None:
            raise ConfigError(f"format {fmt!r} needs a separate labels file")
        matrix = read_square_matrix(path)
        labels = _read_label_file(labels_path, task)
        if labels.n != matrix.shape[0]:
            raise DataError(
                f"{labels_path}: {labels.n} labels for a {matrix.shape[0]}-item matrix"
            )
        if fmt == "gram":
            oracle = gram_oracle(matrix)
        else:
            oracle = DistanceMatrixOracle(matrix)
        return labels, oracle, _matrix_fingerprint(oracle.matrix, labels)
    if fmt == "csv":
        ds = ds_mod.load_csv(path, task, label_column=label_column)
    else:
        ds = ds_mod.load_libsvm(path, task)
    return ds, euclidean_oracle(ds), ds.fingerprint


def _restrict(ds: LabeledDataset, oracle, rows) -> tuple:
    """Row-subset a dataset and rebuild its oracle over the kept rows."""
    rows = np.asarray(rows, dtype=np.intp)
    sub = ds.select(rows)
    if ds.features is not None:
        return sub, euclidean_oracle(sub)
    m = oracle.matrix[np.ix_(rows, rows)]
    return sub, DistanceMatrixOracle(m, _validate=False)


def _pad_features(ds: LabeledDataset, d: int) -> LabeledDataset:
    # sparse rows leave trailing zeros implicit; widen to the shared width
    if ds.features.shape[1] == d:
        return ds
    feats = np.hstack([ds.features, np.zeros((ds.n, d - ds.features.shape[1]))])
    return LabeledDataset(
        features=feats,
        class_labels=ds.class_labels,
        targets=ds.targets,
        class_count=ds.class_count,
        label_map=ds.label_map,
    )


def _stack_train_test(tr: LabeledDataset, te: LabeledDataset, fmt: str) -> LabeledDataset:
    if tr.features.shape[1] != te.features.shape[1]:
        if fmt != "libsvm":
            raise DataError(
                f"train has {tr.features.shape[1]} feature columns but test has "
                f"{te.features.shape[1]}"
            )
        d = max(tr.features.shape[1], te.features.shape[1])
        tr, te = _pad_features(tr, d), _pad_features(te, d)
    feats = np.vstack([tr.features, te.features])
    if tr.task == CLASSIFY:
        return LabeledDataset(
            features=feats,
            class_labels=np.concatenate([tr.class_labels, te.class_labels]),
            class_count=max(tr.class_count, te.class_count),
            label_map=te.label_map if te.label_map is not None else tr.label_map,
        )
    return LabeledDataset(features=feats, targets=np.concatenate([tr.targets, te.targets]))


_CONFIG_KEYS = frozenset({
    "task", "data", "train_data", "test_data", "format", "label_column",
    "labels", "train_fraction", "stratified", "repeats", "seed", "policy",
    "pair_scheme", "n0", "trees", "ratio", "multiclass_rule", "pooling",
    "aggregation", "subsample", "cv", "grid", "folds",
})


def run_experiment(config: dict, out_dir=None, engine: str = "auto") -> EvalReport:
    """Run a configured experiment end to end and aggregate over repeats.

    Two data modes: a single `data` file split per repeat (seeded with
    base seed + repeat index), or a fixed `train_data`/`test_data` pair
    where only the forest seed varies. With `cv = true`, each repeat
    picks (n0, trees) by cross-validation on its own training part.
    When `out_dir` is given, writes report.json and repeats.csv there.
    """
    t0 = time.perf_counter()
    unknown = set(config) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(sorted(unknown))}")

    task = _as_choice(config, "task", forest_mod.TASKS)
    classify = task == CLASSIFY
    fmt = _as_choice(config, "format", FORMATS, default="csv")
    single = "data" in config
    fixed = "train_data" in config or "test_data" in config
    if single == fixed:
        raise ConfigError("provide either data= (split mode) or train_data= and test_data=")
    if fixed and not ("train_data" in config and "test_data" in config):
        raise ConfigError("fixed-split mode needs both train_data= and test_data=")
    if fixed and fmt in _MATRIX_FORMATS:
        raise ConfigError(
            "fixed train/test mode supports csv and libsvm only; matrix formats "
            "cover one dataset per file"
        )
    if fixed and "train_fraction" in config:
        raise ConfigError("train_fraction only applies to single-file split mode")
    if "labels" in config and fmt not in _MATRIX_FORMATS:
        raise ConfigError("labels= only applies to the matrix formats")
    if "label_column" in config and fmt != "csv":
        raise ConfigError("label_column only applies to csv data")

    label_column = config.get("label_column", -1)
    if not isinstance(label_column, (int, str)):
        raise ConfigError(f"bad label_column {label_column!r}")
    if isinstance(label_column, str):
        try:
            label_column = int(label_column)
        except ValueError:
            pass

    repeats = _as_int(config, "repeats", default=1, minimum=1)
    seed = _as_int(config, "seed", default=0)
    ratio = _as_float(config, "ratio", 1.0)
    train_fraction = _as_float(config, "train_fraction", 0.9)
    stratified = _as_bool(config, "stratified", False)
    if stratified and not classify:
        raise ConfigError("stratified splits need class labels")
    default_policy = SUPERVISED if classify else UNSUPERVISED
    policy_kind = _as_choice(config, "policy", (SUPERVISED, UNSUPERVISED), default=default_policy)
    pair_scheme = _as_choice(config, "pair_scheme", PAIR_SCHEMES, default="pairs")
    policy = PivotPolicy(policy_kind, pair_scheme)
    rule = _as_choice(config, "multiclass_rule", forest_mod.MULTICLASS_RULES, default="one_vs_one")
    pooling = _as_choice(config, "pooling", forest_mod.POOLING, default="multiset")
    aggregation = _as_choice(config, "aggregation", forest_mod.AGGREGATION, default="pooled")

    use_cv = _as_bool(config, "cv", False)
    if use_cv:
        if "n0" in config or "trees" in config:
            raise ConfigError("cv=true picks n0 and trees itself; drop those keys")
        if "grid" not in config:
            raise ConfigError("cv=true needs a grid= entry (n0=...;trees=...)")
        axes = parse_grid(config["grid"])
        folds = _as_int(config, "folds", default=5, minimum=2)
        proto = GridSpec(axes["n0"], axes["trees"], folds=folds)
        grid_n0, grid_m = proto.n0_values, proto.m_values
        n0_fixed = m_fixed = None
    else:
        for key in ("grid", "folds"):
            if key in config:
                raise ConfigError(f"{key}= only applies when cv=true")
        n0_fixed = _as_int(config, "n0", minimum=1)
        m_fixed = _as_int(config, "trees", minimum=1)
        grid_n0 = grid_m = folds = None

    sub_count = _as_int(config, "subsample", default=0, minimum=1) if "subsample" in config else None

    if single:
        data, oracle, fingerprint = load_table(
            config["data"], fmt, task,
            label_column=label_column, labels_path=config.get("labels"),
        )
        if sub_count is not None:
            if sub_count > data.n:
                raise ConfigError(f"subsample={sub_count} but the dataset has {data.n} rows")
            perm = rng.generator(rng.derive(seed, rng.SUBSAMPLE)).permutation(data.n)
            data, oracle = _restrict(data, oracle, np.sort(perm[:sub_count]))
            fingerprint = (
                data.fingerprint if data.features is not None
                else _matrix_fingerprint(oracle.matrix, data)
            )
        tr_ids = te_ids = None
    else:
        loader = ds_mod.load_csv if fmt == "csv" else ds_mod.load_libsvm
        if fmt == "csv":
            tr = loader(config["train_data"], task, label_column=label_column)
            te = loader(config["test_data"], task, label_column=label_column,
                        label_map=tr.label_map)
        else:
            tr = loader(config["train_data"], task)
            te = loader(config["test_data"], task, label_map=tr.label_map)
        if sub_count is not None:
            if sub_count > tr.n:
                raise ConfigError(f"subsample={sub_count} but the train file has {tr.n} rows")
            perm = rng.generator(rng.derive(seed, rng.SUBSAMPLE)).permutation(tr.n)
            tr = tr.select(np.sort(perm[:sub_count]))
        data = _stack_train_test(tr, te, fmt)
        oracle = euclidean_oracle(data)
        fingerprint = data.fingerprint
        tr_ids = np.arange(tr.n, dtype=np.int64)
        te_ids = np.arange(tr.n, tr.n + te.n, dtype=np.int64)

    y = data.y
    rows = []
    per_repeat = []
    total_q = 0
    for i in range(repeats):
        s_i = seed + i
        if single:
            tr_ids, te_ids = ds_mod.split(data, SplitSpec(train_fraction, s_i, stratified))
        cv_q = 0
        if use_cv:
            grid = GridSpec(grid_n0, grid_m, folds=folds, seed=s_i)
            picked = cross_validate(
                tr_ids, oracle, y, grid, policy, task,
                r=ratio, stratified=stratified, engine=engine,
            )
            n0_i, m_i, cv_q = picked.best_n0, picked.best_m, picked.triplet_queries
        else:
            n0_i, m_i = n0_fixed, m_fixed
        params = forest_mod.ForestParams(
            M=m_i, n0=n0_i, seed=s_i, policy=policy, task=task, r=ratio,
            multiclass_rule=rule, pooling=pooling, aggregation=aggregation,
        )
        fo = forest_mod.fit(tr_ids, oracle, y, params, engine=engine)
        build_q = sum(t.build_queries for t in fo.trees)
        preds = fo.predict_batch(te_ids, oracle, engine=engine)
        pred_q = sum(p.triplet_queries for p in preds)
        vals = np.array(
            [p.value for p in preds], dtype=np.int64 if classify else np.float64
        )
        value = error_rate(y[te_ids], vals) if classify else rmse(y[te_ids], vals)
        per_repeat.append(value)
        total_q += cv_q + build_q + pred_q
        rows.append({
            "repeat": i,
            "seed": s_i,
            "value": value,
            "n0": n0_i,
            "trees": m_i,
            "train_size": int(tr_ids.size),
            "test_size": int(te_ids.size),
            "build_queries": build_q,
            "predict_queries": pred_q,
            "cv_queries": cv_q,
        })

    resolved = {
        "task": task,
        "format": fmt,
        "mode": "split" if single else "fixed",
        "metric": "error_rate" if classify else "rmse",
        "repeats": repeats,
        "seed": seed,
        "policy": policy_kind,
        "pair_scheme": pair_scheme,
        "ratio": ratio,
        "stratified": stratified,
        "multiclass_rule": rule,
        "pooling": pooling,
        "aggregation": aggregation,
        "fingerprint": fingerprint,
    }
    if single:
        resolved["data"] = str(config["data"])
        resolved["train_fraction"] = train_fraction
    else:
        resolved["train_data"] = str(config["train_data"])
        resolved["test_data"] = str(config["test_data"])
    if sub_count is not None:
        resolved["subsample"] = sub_count
    if use_cv:
        resolved["cv"] = {"grid_n0": list(grid_n0), "grid_trees": list(grid_m), "folds": folds}
    else:
        resolved["n0"] = n0_fixed
        resolved["trees"] = m_fixed

    arr = np.array(per_repeat)
    report = EvalReport(
        metric=resolved["metric"],
        estimate=float(arr.mean()),
        std=float(arr.std()),
        per_repeat=tuple(float(v) for v in per_repeat),
        triplet_queries=total_q,
        wall_seconds=time.perf_counter() - t0,
        params=resolved,
        rows=tuple(rows),
    )
    if out_dir is not None:
        write_report(report, out_dir)
    return report
