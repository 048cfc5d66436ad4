"""Single comparison tree: build and traversal.

A tree partitions its build set by repeatedly picking two pivot items and
sending every other item to the side of the pivot it is closer to, asking
the oracle one triplet query per item. Internal nodes store the two pivot
item ids; leaves store contiguous slices of a member pool.

Two engines produce bit-identical trees from the same seed: a compiled
one reading feature or distance matrices directly (`_kernels`), and a
generic one that routes every comparison through the oracle object so
wrappers (counting, caching) and custom backends keep working.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .errors import ConfigError
from .oracle import DistanceMatrixOracle, EuclideanOracle, TripletOracle
from .rng import generator

SUPERVISED = "supervised"
UNSUPERVISED = "unsupervised"
PAIR_SCHEMES = ("pairs", "uniform_first")


@dataclass(frozen=True)
class PivotPolicy:
    kind: str
    pair_scheme: str = "pairs"

    def __post_init__(self):
        if self.kind not in (SUPERVISED, UNSUPERVISED):
            raise ConfigError(f"unknown pivot policy {self.kind!r}")
        if self.pair_scheme not in PAIR_SCHEMES:
            raise ConfigError(f"unknown pair scheme {self.pair_scheme!r}")


@dataclass(frozen=True)
class BuildParams:
    n0: int
    seed: int
    policy: PivotPolicy

    def __post_init__(self):
        if int(self.n0) < 1:
            raise ConfigError(f"n0 must be >= 1, got {self.n0}")


@dataclass(eq=False)
class CompTree:
    """Flat tree arrays; node 0 is the root, children follow in preorder.

    Pivot entries hold item ids; child and leaf entries are -1 where not
    applicable. `members` is the build set reordered so every leaf owns
    the contiguous slice [leaf_start, leaf_start + leaf_size).
    """

    left_pivot: np.ndarray
    right_pivot: np.ndarray
    left_child: np.ndarray
    right_child: np.ndarray
    leaf_start: np.ndarray
    leaf_size: np.ndarray
    members: np.ndarray
    n0: int
    build_queries: int = 0
    _depths: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_nodes(self) -> int:
        return len(self.left_pivot)

    @property
    def n_leaves(self) -> int:
        return int((self.left_child < 0).sum())

    def is_leaf(self, node: int) -> bool:
        return self.left_child[node] < 0

    def leaf_members(self, node: int) -> np.ndarray:
        start = self.leaf_start[node]
        return self.members[start : start + self.leaf_size[node]]

    def node_depths(self) -> np.ndarray:
        """Depth of every node; memoized. Root is 0."""
        if self._depths is None:
            d = np.zeros(self.n_nodes, dtype=np.int64)
            for node in range(self.n_nodes):
                if self.left_child[node] >= 0:
                    d[self.left_child[node]] = d[node] + 1
                    d[self.right_child[node]] = d[node] + 1
            self._depths = d
        return self._depths

    def traverse(self, query: int, oracle: TripletOracle) -> int:
        """Walk one item to its leaf, one oracle query per internal node."""
        node = 0
        while self.left_child[node] >= 0:
            if oracle.compare(query, int(self.left_pivot[node]), int(self.right_pivot[node])):
                node = int(self.left_child[node])
            else:
                node = int(self.right_child[node])
        return node

    def traverse_batch(self, queries, oracle: TripletOracle, engine: str = "auto"):
        """Leaves reached by many items at once; returns (leaf ids, depths)."""
        anchors = np.asarray(queries, dtype=np.int64)
        mode = _pick_engine(oracle, engine)
        leaf = np.empty(len(anchors), dtype=np.int64)
        depth = np.empty(len(anchors), dtype=np.int64)
        if mode == "euclidean":
            _kernels.traverse_euclidean(
                oracle.features, anchors, self.left_pivot, self.right_pivot,
                self.left_child, self.right_child, leaf, depth,
            )
        elif mode == "matrix":
            qrows = oracle.query_rows
            if qrows is None:
                qrows = np.empty((0, oracle.n_base))
            _kernels.traverse_matrix(
                oracle.matrix, qrows, oracle.n_base, anchors,
                self.left_pivot, self.right_pivot,
                self.left_child, self.right_child, leaf, depth,
            )
        else:
            cur = np.zeros(len(anchors), dtype=np.int64)
            depth[:] = 0
            while True:
                internal = self.left_child[cur] >= 0
                if not internal.any():
                    break
                for nid in np.unique(cur[internal]):
                    sel = np.flatnonzero(cur == nid)
                    ans = oracle.compare_many(
                        anchors[sel], int(self.left_pivot[nid]), int(self.right_pivot[nid])
                    )
                    cur[sel] = np.where(ans, self.left_child[nid], self.right_child[nid])
                    depth[sel] += 1
            leaf[:] = cur
        return leaf, depth

    def validate(self) -> None:
        """Check structural invariants; raises AssertionError on violation."""
        n_nodes = self.n_nodes
        assert n_nodes >= 1
        assert n_nodes <= 2 * len(self.members) - 1 or n_nodes == 1
        size = np.zeros(n_nodes, dtype=np.int64)
        for node in range(n_nodes - 1, -1, -1):
            if self.left_child[node] < 0:
                assert 1 <= self.leaf_size[node] <= self.n0
                size[node] = self.leaf_size[node]
            else:
                lc, rc = int(self.left_child[node]), int(self.right_child[node])
                assert lc > node and rc > node, "children must follow parent in preorder"
                size[node] = size[lc] + size[rc]
        assert size[0] == len(self.members)
        span = np.zeros(n_nodes, dtype=np.int64)
        for node in range(n_nodes):
            lo = span[node]
            if self.left_child[node] < 0:
                assert self.leaf_start[node] == lo
                continue
            lc, rc = int(self.left_child[node]), int(self.right_child[node])
            span[lc] = lo
            span[rc] = lo + size[lc]
            lp, rp = int(self.left_pivot[node]), int(self.right_pivot[node])
            assert lp != rp
            assert lp in self.members[lo : lo + size[lc]], "left pivot outside left subtree"
            assert rp in self.members[lo + size[lc] : lo + size[node]], (
                "right pivot outside right subtree"
            )
        assert len(np.unique(self.members)) == len(self.members)


def select_pivots(members, labels, policy: PivotPolicy, gen: np.random.Generator):
    """Pick the (left, right) pivot pair for one node; returns item ids.

    Supervised selection is uniform over ordered differing-label pairs
    (or the two-stage uniform_first variant); all-equal labels fall back
    to a uniform distinct pair, as does the unsupervised policy.
    """
    members = np.asarray(members, dtype=np.int64)
    if len(members) < 2:
        raise ConfigError(f"cannot pick a pivot pair from {len(members)} item(s)")
    if policy.kind == SUPERVISED and labels is None:
        raise ConfigError("supervised pivot selection needs class labels")
    pi, pj = _select_positions(
        gen, members, labels, policy.kind == SUPERVISED, policy.pair_scheme
    )
    return int(members[pi]), int(members[pj])


def _select_positions(gen, members, labels, supervised: bool, scheme: str):
    # mirrors _kernels._select_pivots draw for draw
    s = len(members)
    if supervised:
        y = np.asarray(labels)[members]
        counts = np.bincount(y)
        opp = s - counts[y]
        total = int(opp.sum())
        if total > 0:
            if scheme == "pairs":
                t = int(gen.integers(0, total))
                cum = np.cumsum(opp)
                pi = int(np.searchsorted(cum, t, side="right"))
                rem = t - (int(cum[pi - 1]) if pi else 0)
                return pi, int(np.flatnonzero(y != y[pi])[rem])
            elig = np.flatnonzero(opp > 0)
            pi = int(elig[gen.integers(0, len(elig))])
            opposites = np.flatnonzero(y != y[pi])
            pj = int(opposites[gen.integers(0, len(opposites))])
            if gen.integers(0, 2) == 1:
                pi, pj = pj, pi
            return pi, pj
    t = int(gen.integers(0, s * (s - 1)))
    i, j = divmod(t, s - 1)
    if j >= i:
        j += 1
    return i, j


def _pick_engine(oracle: TripletOracle, engine: str) -> str:
    if engine not in ("auto", "fast", "generic"):
        raise ConfigError(f"unknown engine {engine!r}")
    if engine == "generic":
        return "generic"
    if type(oracle) is EuclideanOracle:
        return "euclidean"
    if type(oracle) is DistanceMatrixOracle:
        return "matrix"
    if engine == "fast":
        raise ConfigError(
            f"no compiled path for oracle type {type(oracle).__name__}"
        )
    return "generic"


def build(build_set, oracle: TripletOracle, labels, params: BuildParams,
          engine: str = "auto") -> CompTree:
    """Grow one comparison tree over `build_set` (item ids into the oracle).

    Splitting a node of size s costs exactly s - 2 oracle queries; each
    pivot is forced into its own child, so both children are non-empty
    and the recursion terminates even on duplicate items. Deterministic
    given (params.seed, oracle content, build_set order).
    """
    work = np.array(build_set, dtype=np.int64).ravel()
    n = len(work)
    if n == 0:
        raise ConfigError("cannot build a tree on an empty set")
    supervised = params.policy.kind == SUPERVISED
    if supervised and labels is None:
        raise ConfigError("supervised builds need class labels")
    gen = generator(params.seed)
    cap = max(1, 2 * n - 1)
    left_pivot = np.full(cap, -1, dtype=np.int64)
    right_pivot = np.full(cap, -1, dtype=np.int64)
    left_child = np.full(cap, -1, dtype=np.int64)
    right_child = np.full(cap, -1, dtype=np.int64)
    leaf_start = np.full(cap, -1, dtype=np.int64)
    leaf_size = np.zeros(cap, dtype=np.int64)
    mode = _pick_engine(oracle, engine)
    if mode in ("euclidean", "matrix"):
        y = np.asarray(labels, dtype=np.int64) if supervised else np.zeros(1, dtype=np.int64)
        counts = np.zeros(int(y.max()) + 1 if supervised else 1, dtype=np.int64)
        scratch = np.empty(n, dtype=np.int64)
        mask = np.empty(n, dtype=np.bool_)
        scheme = _kernels.PAIRS if params.policy.pair_scheme == "pairs" else _kernels.UNIFORM_FIRST
        kern = _kernels.build_euclidean if mode == "euclidean" else _kernels.build_matrix
        source = oracle.features if mode == "euclidean" else oracle.matrix
        n_nodes, queries = kern(
            source, work, y, params.n0, supervised, scheme, gen,
            left_pivot, right_pivot, left_child, right_child,
            leaf_start, leaf_size, scratch, mask, counts,
        )
    else:
        n_nodes, queries = _build_generic(
            oracle, work, labels, params.n0, supervised, params.policy.pair_scheme, gen,
            left_pivot, right_pivot, left_child, right_child, leaf_start, leaf_size,
        )
    return CompTree(
        left_pivot=left_pivot[:n_nodes].copy(),
        right_pivot=right_pivot[:n_nodes].copy(),
        left_child=left_child[:n_nodes].copy(),
        right_child=right_child[:n_nodes].copy(),
        leaf_start=leaf_start[:n_nodes].copy(),
        leaf_size=leaf_size[:n_nodes].copy(),
        members=work,
        n0=int(params.n0),
        build_queries=int(queries),
    )


def _build_generic(oracle, work, labels, n0, supervised, scheme, gen,
                   left_pivot, right_pivot, left_child, right_child,
                   leaf_start, leaf_size):
    n = len(work)
    stack = [(0, n, -1, 0)]
    n_nodes = 0
    queries = 0
    while stack:
        lo, hi, parent, side = stack.pop()
        node = n_nodes
        n_nodes += 1
        if parent >= 0:
            if side == 0:
                left_child[parent] = node
            else:
                right_child[parent] = node
        s = hi - lo
        if s <= n0:
            leaf_start[node] = lo
            leaf_size[node] = s
            continue
        seg = work[lo:hi]
        pi, pj = _select_positions(gen, seg, labels, supervised, scheme)
        x1, x2 = int(seg[pi]), int(seg[pj])
        left_pivot[node] = x1
        right_pivot[node] = x2
        keep = np.ones(s, dtype=bool)
        keep[pi] = keep[pj] = False
        rest = seg[keep]
        go_left = np.asarray(oracle.compare_many(rest, x1, x2), dtype=bool)
        queries += s - 2
        ordered = np.concatenate(([x1], rest[go_left], [x2], rest[~go_left]))
        work[lo:hi] = ordered
        n_left = 1 + int(go_left.sum())
        stack.append((lo + n_left, hi, node, 1))
        stack.append((lo, lo + n_left, node, 0))
    return n_nodes, queries
