"""Monte-Carlo study of the continuous comparison tree on [0,1]^d.

Cells are intersections of bisector half-spaces ("closer to a than to b")
with the unit cube, never explicit polytopes. Each cell carries a pool of
witness points that are uniform inside it: the root pool is one uniform
cube sample, a split consumes two pool points as the pivots, and the rest
pass to whichever child contains them. Diameters are estimated as the max
pairwise distance over witnesses, which can only underestimate, so decay
statistics derived from them are conservative.

Two experiments are built on top: `diameter_halving_curve` tracks how
quickly cells shrink below half the root diameter, and the toy-problem
`consistency_trend` watches the leaf-majority classifier approach the
noise floor as the sample size grows with the truncation rule depth =
floor(alpha * ln n).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial.distance import pdist
from scipy.stats import linregress

from . import rng
from .errors import ConfigError

ALPHA_BOUND = 1.0 / math.log(2.0)


@dataclass(frozen=True)
class SimConfig:
    d: int
    alpha: float
    n: int
    density: str = "uniform"
    rejection_limit: int = 20000
    witness_count: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError(f"dimension must be >= 1, got {self.d}")
        if not 0 < self.alpha < ALPHA_BOUND:
            raise ConfigError(
                f"alpha must lie in (0, 1/log 2) = (0, {ALPHA_BOUND:.4f}), got {self.alpha}"
            )
        if self.n < 1:
            raise ConfigError(f"n must be >= 1, got {self.n}")
        if self.density != "uniform":
            raise ConfigError(f"only the uniform density is supported, got {self.density!r}")
        if self.rejection_limit < 1:
            raise ConfigError(f"rejection_limit must be >= 1, got {self.rejection_limit}")
        if self.witness_count < 2:
            raise ConfigError(f"witness_count must be >= 2, got {self.witness_count}")

    @property
    def truncation_depth(self) -> int:
        return int(math.floor(self.alpha * math.log(self.n)))


@dataclass
class ContinuousCell:
    """A region of the cube: all points satisfying every bisector constraint.

    `constraints` is a tuple of (a, b) point pairs meaning "closer to a
    than to b" (ties included, matching the closed children of a split).
    `witnesses` are points uniform inside the cell, used both as pivot
    material and for diameter estimates.
    """

    constraints: tuple
    witnesses: np.ndarray
    level: int
    degenerate: bool = False

    def contains(self, points) -> np.ndarray:
        return _satisfies(np.asarray(points, dtype=np.float64), self.constraints)


def _closer_to_first(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    da = ((points - a) ** 2).sum(axis=-1)
    db = ((points - b) ** 2).sum(axis=-1)
    return da <= db


def _satisfies(points: np.ndarray, constraints) -> np.ndarray:
    mask = np.ones(len(points), dtype=bool)
    for a, b in constraints:
        mask &= _closer_to_first(points, a, b)
    return mask


def _rejection_fill(constraints, need: int, gen, d: int, limit: int):
    """Uniform-in-cell points via cube proposals; returns (points, used, ok)."""
    got = []
    have = 0
    used = 0
    while have < need and used < limit:
        chunk = min(max(128, 4 * (need - have)), limit - used)
        pts = gen.random((chunk, d))
        used += chunk
        pts = pts[_satisfies(pts, constraints)]
        if len(pts):
            got.append(pts)
            have += len(pts)
    pts = np.vstack(got)[:need] if got else np.empty((0, d))
    return pts, used, have >= need


def _split_cell(cell: ContinuousCell, gen, config: SimConfig):
    """Draw two pivots uniform in the cell and cut along their bisector.

    Pivots come off the front of the witness pool (topped up by rejection
    sampling when short); the remaining witnesses are handed to whichever
    child they fall in. Returns None and freezes the cell if the rejection
    budget runs out before two pivots exist.
    """
    pool = cell.witnesses
    if len(pool) < 2:
        extra, _, ok = _rejection_fill(
            cell.constraints, 2 - len(pool), gen, config.d, config.rejection_limit
        )
        if not ok:
            cell.degenerate = True
            return None
        pool = np.vstack([pool, extra]) if len(pool) else extra
    x1 = pool[0].copy()
    x2 = pool[1].copy()
    rest = pool[2:]
    mask = _closer_to_first(rest, x1, x2)
    left = ContinuousCell(cell.constraints + ((x1, x2),), rest[mask], cell.level + 1)
    right = ContinuousCell(cell.constraints + ((x2, x1),), rest[~mask], cell.level + 1)
    return left, right


@dataclass
class ContinuousTree:
    """Truncated continuous comparison tree, breadth-first cell storage.

    Frozen (degenerate) cells act as leaves above the truncation depth.
    A child's final constraint records its parent's pivot pair, which is
    all `route` needs to replay the splits.
    """

    config: SimConfig
    cells: list
    parent: np.ndarray
    left: np.ndarray
    right: np.ndarray
    depth: int
    degenerate_count: int

    @property
    def leaf_ids(self) -> np.ndarray:
        return np.flatnonzero(self.left == -1)

    def level_ids(self, k: int, skip_degenerate: bool = True) -> list:
        return [
            i for i, c in enumerate(self.cells)
            if c.level == k and not (skip_degenerate and c.degenerate)
        ]

    def route(self, points) -> np.ndarray:
        """Leaf cell index for each point."""
        pts = np.asarray(points, dtype=np.float64)
        out = np.empty(len(pts), dtype=np.int64)
        stack = [(0, np.arange(len(pts)))]
        while stack:
            ci, idx = stack.pop()
            li = int(self.left[ci])
            if li == -1:
                out[idx] = ci
                continue
            ri = int(self.right[ci])
            a, b = self.cells[li].constraints[-1]
            m = _closer_to_first(pts[idx], a, b)
            stack.append((li, idx[m]))
            stack.append((ri, idx[~m]))
        return out


def grow(config: SimConfig, depth: int | None = None, pool_size: int | None = None,
         gen=None) -> ContinuousTree:
    """Grow the truncated tree by repeated bisector splits.

    `depth` defaults to the truncation rule floor(alpha * ln n). The root
    witness pool is sized so that, in expectation, cells keep enough
    points to supply pivots all the way down without falling back to
    per-cell rejection sampling.
    """
    if depth is None:
        depth = config.truncation_depth
    if depth < 0:
        raise ConfigError(f"depth must be >= 0, got {depth}")
    if gen is None:
        gen = rng.generator(config.seed)
    if pool_size is None:
        pool_size = max(4 << depth, 2 * config.witness_count)
    root = ContinuousCell((), gen.random((pool_size, config.d)), 0)
    cells = [root]
    parent, left, right = [-1], [-1], [-1]
    frontier = [0]
    degenerate = 0
    for _ in range(depth):
        nxt = []
        for ci in frontier:
            out = _split_cell(cells[ci], gen, config)
            if out is None:
                degenerate += 1
                continue
            for child in out:
                cells.append(child)
                parent.append(ci)
                left.append(-1)
                right.append(-1)
            left[ci] = len(cells) - 2
            right[ci] = len(cells) - 1
            nxt += [len(cells) - 2, len(cells) - 1]
        frontier = nxt
    return ContinuousTree(
        config=config,
        cells=cells,
        parent=np.array(parent, dtype=np.int64),
        left=np.array(left, dtype=np.int64),
        right=np.array(right, dtype=np.int64),
        depth=depth,
        degenerate_count=degenerate,
    )


def estimate_diameter(cell: ContinuousCell, config: SimConfig, gen,
                      m: int | None = None) -> float:
    """Max pairwise distance over m fresh in-cell samples plus the witnesses.

    A lower-bound estimator: it converges to the true diameter from below
    as m grows. Returns nan for degenerate cells or when the rejection
    budget cannot produce the samples.
    """
    if m is None:
        m = config.witness_count
    if m < 2:
        raise ConfigError(f"diameter estimation needs m >= 2, got {m}")
    if cell.degenerate:
        return float("nan")
    fresh, _, ok = _rejection_fill(cell.constraints, m, gen, config.d, config.rejection_limit)
    if not ok:
        return float("nan")
    pts = np.vstack([fresh, cell.witnesses]) if len(cell.witnesses) else fresh
    return float(pdist(pts).max())


def _witness_diameter(cell: ContinuousCell, cap: int) -> float:
    """Cheap estimate from the stored pool only; nan when under 2 points."""
    w = cell.witnesses[:cap]
    if len(w) < 2:
        return float("nan")
    return float(pdist(w).max())


@dataclass
class HalvingCurve:
    """P(some depth-k cell still wider than half the root diameter) vs k."""

    d: int
    trials: int
    ks: np.ndarray
    probability: np.ndarray
    se: np.ndarray
    degenerate_cells: int
    thin_cells: int
    slope: float
    slope_stderr: float
    slope_points: int

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "probability", "se"])
            for k, p, s in zip(self.ks, self.probability, self.se):
                w.writerow([int(k), float(p), float(s)])

    def summary(self) -> dict:
        return {
            "d": self.d,
            "trials": self.trials,
            "probability": [float(v) for v in self.probability],
            "se": [float(v) for v in self.se],
            "degenerate_cells": self.degenerate_cells,
            "thin_cells": self.thin_cells,
            "slope": self.slope,
            "slope_stderr": self.slope_stderr,
            "slope_points": self.slope_points,
            "estimator_bias": "witness sampling underestimates diameters, "
                              "so the decay shown here is conservative",
        }


def diameter_halving_curve(config: SimConfig, k_max: int, trials: int) -> HalvingCurve:
    """Empirical check that cell diameters shrink geometrically with depth.

    For each trial a depth-k_max tree is grown; level k counts as "not yet
    halved" when any of its cells has estimated diameter above sqrt(d)/2.
    Diameters use the propagated witness pools (capped at witness_count
    points per cell). Degenerate and under-witnessed cells are excluded
    from the estimates and reported in the result.
    """
    if k_max < 0:
        raise ConfigError(f"k_max must be >= 0, got {k_max}")
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    half = math.sqrt(config.d) / 2.0
    pool = config.witness_count << k_max
    trial_root = rng.derive(config.seed, rng.TRIAL)
    exceeded = np.zeros((trials, k_max + 1), dtype=bool)
    degenerate = 0
    thin = 0
    for t in range(trials):
        gen = rng.generator(rng.derive(trial_root, t))
        tree = grow(config, depth=k_max, pool_size=pool, gen=gen)
        degenerate += tree.degenerate_count
        for k in range(k_max + 1):
            hit = False
            for ci in tree.level_ids(k):
                est = _witness_diameter(tree.cells[ci], config.witness_count)
                if math.isnan(est):
                    thin += 1
                    continue
                if est > half:
                    hit = True
                    break
            exceeded[t, k] = hit
    prob = exceeded.mean(axis=0)
    se = np.sqrt(prob * (1.0 - prob) / trials)
    pos = np.flatnonzero(prob > 0)
    if pos.size >= 3:
        fit = linregress(pos.astype(np.float64), np.log(prob[pos]))
        slope, stderr = float(fit.slope), float(fit.stderr)
    else:
        slope, stderr = float("nan"), float("nan")
    return HalvingCurve(
        d=config.d,
        trials=trials,
        ks=np.arange(k_max + 1),
        probability=prob,
        se=se,
        degenerate_cells=degenerate,
        thin_cells=thin,
        slope=slope,
        slope_stderr=stderr,
        slope_points=int(pos.size),
    )


def toy_labels(points: np.ndarray, eta: float, gen) -> np.ndarray:
    """Box-indicator labels with symmetric flip noise; noise floor is eta."""
    inside = np.all((points >= 0.25) & (points <= 0.75), axis=1)
    labels = inside.astype(np.int64)
    if eta > 0:
        labels ^= gen.random(len(labels)) < eta
    return labels


@dataclass
class TrendPoint:
    n: int
    error: float
    se: float
    depth: int
    leaf_count: float
    leaf_ratio: float
    degenerate_cells: int


@dataclass
class TrendResult:
    eta: float
    d: int
    repeats: int
    points: list

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["n", "error", "se", "depth", "leaf_count", "leaf_ratio",
                        "degenerate_cells"])
            for p in self.points:
                w.writerow([p.n, p.error, p.se, p.depth, p.leaf_count,
                            p.leaf_ratio, p.degenerate_cells])

    def summary(self) -> dict:
        return {
            "eta": self.eta,
            "d": self.d,
            "repeats": self.repeats,
            "n": [p.n for p in self.points],
            "error": [p.error for p in self.points],
            "se": [p.se for p in self.points],
        }


def consistency_trend(config: SimConfig, n_values, eta: float,
                      repeats: int = 8, test_n: int = 20000) -> TrendResult:
    """Leaf-majority error of the truncated tree on the noisy-box problem.

    For each n: grow to depth floor(alpha * ln n), drop n labeled uniform
    samples into the leaves, classify a fresh noisy test set by per-leaf
    majority (empty leaves and ties predict class 0), and average the
    misclassification rate over independent repeats. The error should
    drift down toward the noise floor eta as n grows.
    """
    if not 0 <= eta < 0.5:
        raise ConfigError(f"noise rate must lie in [0, 0.5), got {eta}")
    if repeats < 1:
        raise ConfigError(f"repeats must be >= 1, got {repeats}")
    if test_n < 1:
        raise ConfigError(f"test_n must be >= 1, got {test_n}")
    n_values = sorted(int(n) for n in n_values)
    if not n_values or n_values[0] < 1:
        raise ConfigError(f"bad n sweep {n_values!r}")
    trial_root = rng.derive(config.seed, rng.TRIAL)
    points = []
    for i, n in enumerate(n_values):
        cfg_n = replace(config, n=n)
        errs = np.empty(repeats)
        leaves = np.empty(repeats)
        degenerate = 0
        for rep in range(repeats):
            gen = rng.generator(rng.derive(rng.derive(trial_root, i), rep))
            tree = grow(cfg_n, gen=gen)
            degenerate += tree.degenerate_count
            xtr = gen.random((n, config.d))
            ytr = toy_labels(xtr, eta, gen)
            leaf_of = tree.route(xtr)
            ones = np.bincount(leaf_of, weights=ytr, minlength=len(tree.cells))
            total = np.bincount(leaf_of, minlength=len(tree.cells))
            majority = (2 * ones > total).astype(np.int64)
            xte = gen.random((test_n, config.d))
            yte = toy_labels(xte, eta, gen)
            errs[rep] = np.mean(majority[tree.route(xte)] != yte)
            leaves[rep] = len(tree.leaf_ids)
        points.append(TrendPoint(
            n=n,
            error=float(errs.mean()),
            se=float(errs.std(ddof=1) / math.sqrt(repeats)) if repeats > 1 else 0.0,
            depth=cfg_n.truncation_depth,
            leaf_count=float(leaves.mean()),
            leaf_ratio=float(2 ** cfg_n.truncation_depth) / n,
            degenerate_cells=degenerate,
        ))
    return TrendResult(eta=eta, d=config.d, repeats=repeats, points=points)
