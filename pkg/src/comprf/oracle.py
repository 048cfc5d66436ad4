"""Triplet-comparison oracles.

Every distance access in the package goes through a :class:`TripletOracle`,
which answers the single question "is item `anchor` closer to item `left`
or to item `right`?". Backends wrap feature matrices, distance matrices,
or Gram matrices; wrappers add query counting and caching.

Conventions shared by all backends:

* answers are ``True`` when ``d(anchor, left) <= d(anchor, right)`` —
  exact ties go left, with no epsilon,
* items are integer indices ``0..n_items-1``; out-of-dataset query items
  occupy appended slots created by :meth:`TripletOracle.with_queries`.
"""

from __future__ import annotations

import csv
import gzip
import struct
import threading
from dataclasses import dataclass

import numpy as np

from .errors import OracleError

_TOL = 1e-9


@dataclass(frozen=True)
class OracleStats:
    """Snapshot of wrapper counters. Both counters only ever grow."""

    query_count: int = 0
    cache_hits: int = 0


class TripletOracle:
    """Interface answering triplet comparisons over an indexed item set."""

    @property
    def n_items(self) -> int:
        raise NotImplementedError

    def compare_many(self, anchors, lefts, rights) -> np.ndarray:
        """Vectorized comparison; `lefts`/`rights` broadcast against `anchors`.

        Returns a boolean array: ``True`` where the anchor is at least as
        close to the left item as to the right item.
        """
        raise NotImplementedError

    def compare(self, anchor: int, left: int, right: int) -> bool:
        """Single comparison; routed through `compare_many` so that both
        entry points agree bit-for-bit."""
        return bool(self.compare_many(np.asarray([anchor]), left, right)[0])

    def with_queries(self, payload) -> "TripletOracle":
        """Return an oracle extended with out-of-dataset query items.

        The new items occupy indices ``n_items .. n_items+q-1`` of the
        returned oracle and may only be used as anchors. Backends that
        cannot place new items raise :class:`OracleError`.
        """
        raise OracleError(
            f"{type(self).__name__} cannot answer queries for items outside "
            "the dataset it was built on"
        )

    def distances_from(self, anchor: int) -> np.ndarray:
        """Raw distance row to all base items, for callers (like the KNN
        baseline) that need more than comparisons. Not available from a
        pure triplet backend."""
        raise OracleError(f"{type(self).__name__} does not expose raw distances")


class EuclideanOracle(TripletOracle):
    """Backend over explicit feature vectors.

    Comparisons use squared Euclidean distances (order-preserving, no
    square roots), computed as the sum of squared coordinate differences.
    """

    kind = "euclidean"

    def __init__(self, features):
        x = np.asarray(features, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 1:
            raise OracleError(
                "feature backend needs a rectangular item-by-dimension matrix, "
                f"got shape {x.shape}"
            )
        self._x = x
        self._x.setflags(write=False)

    @property
    def n_items(self) -> int:
        return self._x.shape[0]

    @property
    def features(self) -> np.ndarray:
        return self._x

    def compare_many(self, anchors, lefts, rights):
        a = self._x[np.asarray(anchors, dtype=np.intp)]
        lv = self._x[lefts]
        rv = self._x[rights]
        # accumulate dimension by dimension: the same left-to-right float
        # addition order as the compiled tree kernels, so both agree to the bit
        dl = np.zeros(a.shape[0])
        dr = np.zeros(a.shape[0])
        for t in range(self._x.shape[1]):
            dl += (a[..., t] - lv[..., t]) ** 2
            dr += (a[..., t] - rv[..., t]) ** 2
        return dl <= dr

    def with_queries(self, payload) -> "EuclideanOracle":
        q = np.asarray(payload, dtype=np.float64)
        if q.ndim == 1:
            q = q[None, :]
        if q.ndim != 2 or q.shape[1] != self._x.shape[1]:
            raise OracleError(
                f"query items must have dimension {self._x.shape[1]}, "
                f"got shape {q.shape}"
            )
        return EuclideanOracle(np.vstack([self._x, q]))

    def distances_from(self, anchor: int) -> np.ndarray:
        # squared distances; ranking-equivalent to true distances
        return ((self._x - self._x[anchor]) ** 2).sum(axis=-1)


class DistanceMatrixOracle(TripletOracle):
    """Backend over a precomputed square distance matrix.

    Out-of-dataset queries need an explicit row of distances to every base
    item (see `with_queries`); pivots must always be base items.
    """

    kind = "matrix"

    def __init__(self, matrix, _query_rows=None, _validate=True):
        d = np.asarray(matrix, dtype=np.float64)
        if _validate:
            _validate_distance_matrix(d)
        self._d = d
        self._d.setflags(write=False)
        self._q = _query_rows

    @property
    def n_items(self) -> int:
        n = self._d.shape[0]
        return n if self._q is None else n + self._q.shape[0]

    @property
    def n_base(self) -> int:
        return self._d.shape[0]

    @property
    def matrix(self) -> np.ndarray:
        return self._d

    @property
    def query_rows(self):
        return self._q

    def _row_values(self, anchors, cols):
        a = np.asarray(anchors, dtype=np.intp)
        cols = np.broadcast_to(np.asarray(cols, dtype=np.intp), a.shape)
        if cols.size and cols.max(initial=0) >= self.n_base:
            raise OracleError("pivot items must belong to the base dataset")
        if a.size == 0:
            return np.empty(0)
        if a.max() < self.n_base:
            return self._d[a, cols]
        if self._q is None:
            raise OracleError(
                "query item used as anchor but this matrix backend has no "
                "query distance rows; supply them via with_queries()"
            )
        out = np.empty(a.shape)
        base = a < self.n_base
        out[base] = self._d[a[base], cols[base]]
        out[~base] = self._q[a[~base] - self.n_base, cols[~base]]
        return out

    def compare_many(self, anchors, lefts, rights):
        return self._row_values(anchors, lefts) <= self._row_values(anchors, rights)

    def with_queries(self, payload) -> "DistanceMatrixOracle":
        if self._q is not None:
            raise OracleError("backend already carries query rows")
        rows = np.asarray(payload, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[None, :]
        if rows.ndim != 2 or rows.shape[1] != self.n_base:
            raise OracleError(
                f"query distance rows must have {self.n_base} columns, "
                f"got shape {rows.shape}"
            )
        if np.min(rows, initial=0.0) < 0:
            raise OracleError("query distance rows must be non-negative")
        out = DistanceMatrixOracle(self._d, _query_rows=rows.copy(), _validate=False)
        out._q.setflags(write=False)
        return out

    def distances_from(self, anchor: int) -> np.ndarray:
        if anchor < self.n_base:
            return self._d[anchor].copy()
        if self._q is None:
            raise OracleError("no query rows for out-of-dataset anchor")
        return self._q[anchor - self.n_base].copy()


def _validate_distance_matrix(d: np.ndarray) -> None:
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise OracleError(f"distance matrix must be square, got shape {d.shape}")
    if not np.all(np.isfinite(d)):
        raise OracleError("distance matrix contains non-finite entries")
    if np.min(d) < 0:
        i, j = np.unravel_index(int(np.argmin(d)), d.shape)
        raise OracleError(f"negative distance at ({i}, {j}): {d[i, j]}")
    asym = np.abs(d - d.T)
    if asym.max(initial=0.0) > _TOL:
        i, j = np.unravel_index(int(np.argmax(asym)), d.shape)
        raise OracleError(
            f"distance matrix asymmetric at ({i}, {j}): "
            f"{d[i, j]} vs {d[j, i]}"
        )
    diag = np.abs(np.diagonal(d))
    if diag.max(initial=0.0) > _TOL:
        i = int(np.argmax(diag))
        raise OracleError(f"distance matrix diagonal not zero at ({i}, {i}): {d[i, i]}")


def euclidean_oracle(dataset) -> EuclideanOracle:
    """Oracle over a dataset's feature vectors (or a plain (n, d) array)."""
    features = getattr(dataset, "features", dataset)
    if features is None:
        raise OracleError("dataset has no feature vectors")
    return EuclideanOracle(features)


def distance_matrix_oracle(matrix) -> DistanceMatrixOracle:
    """Oracle over an explicit distance matrix (square, symmetric, zero diagonal)."""
    return DistanceMatrixOracle(matrix)


def gram_oracle(gram) -> DistanceMatrixOracle:
    """Oracle over a Gram (kernel) matrix.

    The kernel is converted to squared distances the standard way,
    ``d2(i, j) = K(i,i) + K(j,j) - 2 K(i,j)``, and the result behaves
    exactly like `distance_matrix_oracle` on those values.
    """
    k = np.asarray(gram, dtype=np.float64)
    if k.ndim != 2 or k.shape[0] != k.shape[1]:
        raise OracleError(f"Gram matrix must be square, got shape {k.shape}")
    asym = np.abs(k - k.T)
    if asym.max(initial=0.0) > _TOL:
        i, j = np.unravel_index(int(np.argmax(asym)), k.shape)
        raise OracleError(
            f"Gram matrix asymmetric at ({i}, {j}): {k[i, j]} vs {k[j, i]}"
        )
    # exact symmetrization so the induced matrix is symmetric to the bit
    k = (k + k.T) / 2.0
    diag = np.diagonal(k)
    d2 = diag[:, None] + diag[None, :] - 2.0 * k
    neg = d2 < -_TOL
    if np.any(neg):
        i, j = np.unravel_index(int(np.argmin(d2)), d2.shape)
        raise OracleError(
            f"Gram matrix induces negative squared distance at ({i}, {j}): "
            f"{d2[i, j]}; not a valid kernel"
        )
    np.clip(d2, 0.0, None, out=d2)
    np.fill_diagonal(d2, 0.0)
    return DistanceMatrixOracle(d2, _validate=False)


def gram_query_rows(gram, cross, self_kernel) -> np.ndarray:
    """Squared-distance rows for query items given their kernel values.

    `cross` is (q, n) with ``cross[t, i] = K(query_t, item_i)`` and
    `self_kernel` is (q,) with ``K(query_t, query_t)``. The result feeds
    ``gram_oracle(gram).with_queries(...)``.
    """
    k = np.asarray(gram, dtype=np.float64)
    cross = np.atleast_2d(np.asarray(cross, dtype=np.float64))
    self_k = np.atleast_1d(np.asarray(self_kernel, dtype=np.float64))
    rows = self_k[:, None] + np.diagonal(k)[None, :] - 2.0 * cross
    if rows.min(initial=0.0) < -_TOL:
        raise OracleError("query kernel values induce negative squared distances")
    return np.clip(rows, 0.0, None)


class CountingOracle(TripletOracle):
    """Delegates every query and counts it. Thread-safe."""

    def __init__(self, inner: TripletOracle):
        self.inner = inner
        self._lock = threading.Lock()
        self._count = 0

    @property
    def n_items(self) -> int:
        return self.inner.n_items

    @property
    def stats(self) -> OracleStats:
        with self._lock:
            return OracleStats(query_count=self._count)

    def compare_many(self, anchors, lefts, rights):
        out = self.inner.compare_many(anchors, lefts, rights)
        with self._lock:
            self._count += len(np.atleast_1d(out))
        return out

    def with_queries(self, payload) -> "CountingOracle":
        # the extended view shares this wrapper's counter
        return _SharedCountView(self, self.inner.with_queries(payload))

    def distances_from(self, anchor: int) -> np.ndarray:
        # raw-distance access is not a triplet query; not counted
        return self.inner.distances_from(anchor)


class _SharedCountView(CountingOracle):
    """Counting view over an extended backend, sharing the parent counter."""

    def __init__(self, parent: CountingOracle, inner: TripletOracle):
        self.inner = inner
        self._parent = parent

    @property
    def stats(self) -> OracleStats:
        return self._parent.stats

    def compare_many(self, anchors, lefts, rights):
        out = self.inner.compare_many(anchors, lefts, rights)
        with self._parent._lock:
            self._parent._count += len(np.atleast_1d(out))
        return out


class CachingOracle(TripletOracle):
    """Memoizes answers of a deterministic inner oracle.

    Keys are the full (anchor, left, right) triple. Both orientations of
    a pair are stored independently: the negation identity
    ``query(a, l, r) == not query(a, r, l)`` fails on ties, which answer
    True both ways under the <= convention, so no negation shortcut is
    applied.
    """

    def __init__(self, inner: TripletOracle):
        self.inner = inner
        self._lock = threading.Lock()
        self._cache: dict[tuple[int, int, int], bool] = {}
        self._count = 0
        self._hits = 0

    @property
    def n_items(self) -> int:
        return self.inner.n_items

    @property
    def stats(self) -> OracleStats:
        with self._lock:
            return OracleStats(query_count=self._count, cache_hits=self._hits)

    def compare_many(self, anchors, lefts, rights):
        a = np.atleast_1d(np.asarray(anchors))
        l = np.broadcast_to(np.asarray(lefts), a.shape)
        r = np.broadcast_to(np.asarray(rights), a.shape)
        out = np.empty(a.shape, dtype=bool)
        for i in range(len(a)):
            key = (int(a[i]), int(l[i]), int(r[i]))
            with self._lock:
                self._count += 1
                cached = self._cache.get(key)
                if cached is not None:
                    self._hits += 1
                    out[i] = cached
                    continue
            val = bool(self.inner.compare_many(a[i : i + 1], l[i], r[i])[0])
            with self._lock:
                self._cache[key] = val
            out[i] = val
        return out

    def distances_from(self, anchor: int) -> np.ndarray:
        return self.inner.distances_from(anchor)


def counting(inner: TripletOracle) -> CountingOracle:
    """Wrap an oracle so every query is counted."""
    return CountingOracle(inner)


def caching(inner: TripletOracle) -> CachingOracle:
    """Wrap a deterministic oracle with a per-triple answer cache."""
    return CachingOracle(inner)


def read_square_matrix(path) -> np.ndarray:
    """Load a distance or Gram matrix from disk.

    Two formats, picked by extension: ``.csv`` (header-free, comma-separated
    decimals, optionally ``.csv.gz``) and ``.bin`` (8-byte little-endian
    row count followed by row-major little-endian float64 values).
    """
    p = str(path)
    gz = p.endswith(".gz")
    stem = p[:-3] if gz else p
    if stem.endswith(".csv"):
        opener = gzip.open if gz else open
        rows = []
        with opener(p, "rt", newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh)):
                if not row:
                    continue
                try:
                    rows.append([float(c) for c in row])
                except ValueError as e:
                    raise OracleError(f"{p}: row {lineno}: {e}") from None
        if not rows:
            raise OracleError(f"{p}: empty matrix file")
        width = len(rows[0])
        for lineno, row in enumerate(rows):
            if len(row) != width:
                raise OracleError(
                    f"{p}: row {lineno} has {len(row)} columns, expected {width}"
                )
        return np.asarray(rows, dtype=np.float64)
    if stem.endswith(".bin"):
        opener = gzip.open if gz else open
        with opener(p, "rb") as fh:
            head = fh.read(8)
            if len(head) != 8:
                raise OracleError(f"{p}: truncated header")
            (n,) = struct.unpack("<q", head)
            if n <= 0:
                raise OracleError(f"{p}: bad row count {n}")
            body = fh.read(8 * n * n)
            if len(body) != 8 * n * n:
                raise OracleError(f"{p}: truncated body, expected {n}x{n} float64")
            return np.frombuffer(body, dtype="<f8").reshape(n, n).astype(np.float64)
    raise OracleError(f"{p}: unknown matrix format (expected .csv[.gz] or .bin[.gz])")


def write_square_matrix(matrix, path) -> None:
    """Inverse of `read_square_matrix`, same two formats."""
    d = np.asarray(matrix, dtype=np.float64)
    p = str(path)
    gz = p.endswith(".gz")
    stem = p[:-3] if gz else p
    if stem.endswith(".csv"):
        opener = gzip.open if gz else open
        with opener(p, "wt", newline="") as fh:
            w = csv.writer(fh)
            for row in d:
                w.writerow([repr(float(v)) for v in row])
        return
    if stem.endswith(".bin"):
        opener = gzip.open if gz else open
        with opener(p, "wb") as fh:
            fh.write(struct.pack("<q", d.shape[0]))
            fh.write(np.ascontiguousarray(d, dtype="<f8").tobytes())
        return
    raise OracleError(f"{p}: unknown matrix format (expected .csv[.gz] or .bin[.gz])")
