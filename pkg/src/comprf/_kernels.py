"""Compiled hot paths for tree building and traversal.

Each kernel mirrors the generic Python engine in `comptree` exactly:
same node order (preorder via an explicit stack), same rng draws, same
left-to-right float accumulation. Any divergence is a bug; the parity
tests compare serialized trees bit for bit.
"""

import numpy as np
from numba import njit

# pivot pair schemes
PAIRS = 0
UNIFORM_FIRST = 1


@njit(cache=True, inline="always")
def _sqdist(x, a, b):
    acc = 0.0
    for t in range(x.shape[1]):
        diff = x[a, t] - x[b, t]
        acc += diff * diff
    return acc


@njit(cache=True, inline="always")
def _draw_distinct_pair(gen, s):
    # one draw over ordered pairs; orientation comes with it
    t = gen.integers(0, s * (s - 1))
    i = t // (s - 1)
    j = t % (s - 1)
    if j >= i:
        j += 1
    return i, j


@njit(cache=True)
def _select_pivots(gen, work, lo, hi, labels, supervised, scheme, counts):
    """Returns positions (pi, pj) within [lo, hi) of the left/right pivots."""
    s = hi - lo
    if not supervised:
        i, j = _draw_distinct_pair(gen, s)
        return lo + i, lo + j
    for p in range(lo, hi):
        counts[labels[work[p]]] = 0
    for p in range(lo, hi):
        counts[labels[work[p]]] += 1
    total = 0
    for p in range(lo, hi):
        total += s - counts[labels[work[p]]]
    if total == 0:
        # all labels equal: same fallback draw as the unsupervised policy
        i, j = _draw_distinct_pair(gen, s)
        return lo + i, lo + j
    if scheme == PAIRS:
        # one draw, uniform over ordered differing-label pairs
        t = gen.integers(0, total)
        acc = 0
        pi = lo
        rem = 0
        for p in range(lo, hi):
            opp = s - counts[labels[work[p]]]
            if acc + opp > t:
                pi = p
                rem = t - acc
                break
            acc += opp
        y1 = labels[work[pi]]
        seen = 0
        for p in range(lo, hi):
            if labels[work[p]] != y1:
                if seen == rem:
                    return pi, p
                seen += 1
    # uniform_first: x1 uniform over eligible points, then x2, then a coin
    elig = 0
    for p in range(lo, hi):
        if counts[labels[work[p]]] < s:
            elig += 1
    k = gen.integers(0, elig)
    pi = lo
    seen = 0
    for p in range(lo, hi):
        if counts[labels[work[p]]] < s:
            if seen == k:
                pi = p
                break
            seen += 1
    y1 = labels[work[pi]]
    m = gen.integers(0, s - counts[y1])
    pj = lo
    seen = 0
    for p in range(lo, hi):
        if labels[work[p]] != y1:
            if seen == m:
                pj = p
                break
            seen += 1
    if gen.integers(0, 2) == 1:
        return pj, pi
    return pi, pj


@njit(cache=True)
def _build(dist_mode, x, dmat, work, labels, n0, supervised, scheme, gen,
           left_pivot, right_pivot, left_child, right_child,
           leaf_start, leaf_size, scratch, mask, counts):
    """Shared build loop; dist_mode 0 reads features `x`, 1 reads `dmat`."""
    n = len(work)
    stack_lo = np.empty(2 * n + 1, dtype=np.int64)
    stack_hi = np.empty(2 * n + 1, dtype=np.int64)
    stack_parent = np.empty(2 * n + 1, dtype=np.int64)
    stack_side = np.empty(2 * n + 1, dtype=np.int64)
    top = 0
    stack_lo[0] = 0
    stack_hi[0] = n
    stack_parent[0] = -1
    stack_side[0] = 0
    top = 1
    n_nodes = 0
    queries = 0
    while top > 0:
        top -= 1
        lo = stack_lo[top]
        hi = stack_hi[top]
        parent = stack_parent[top]
        side = stack_side[top]
        node = n_nodes
        n_nodes += 1
        if parent >= 0:
            if side == 0:
                left_child[parent] = node
            else:
                right_child[parent] = node
        s = hi - lo
        if s <= n0:
            left_pivot[node] = -1
            right_pivot[node] = -1
            left_child[node] = -1
            right_child[node] = -1
            leaf_start[node] = lo
            leaf_size[node] = s
            continue
        pi, pj = _select_pivots(gen, work, lo, hi, labels, supervised, scheme, counts)
        x1 = work[pi]
        x2 = work[pj]
        left_pivot[node] = x1
        right_pivot[node] = x2
        leaf_start[node] = -1
        leaf_size[node] = 0
        # push members closer to x1 left, preserving relative order
        n_left = 1
        w = 0
        for p in range(lo, hi):
            if p == pi or p == pj:
                continue
            m = work[p]
            if dist_mode == 0:
                go_left = _sqdist(x, m, x1) <= _sqdist(x, m, x2)
            else:
                go_left = dmat[m, x1] <= dmat[m, x2]
            mask[w] = go_left
            scratch[w] = m
            w += 1
            if go_left:
                n_left += 1
        queries += s - 2
        work[lo] = x1
        a = lo + 1
        b = lo + n_left
        work[b] = x2
        b += 1
        for p in range(w):
            if mask[p]:
                work[a] = scratch[p]
                a += 1
            else:
                work[b] = scratch[p]
                b += 1
        # preorder: left child processed next
        stack_lo[top] = lo + n_left
        stack_hi[top] = hi
        stack_parent[top] = node
        stack_side[top] = 1
        top += 1
        stack_lo[top] = lo
        stack_hi[top] = lo + n_left
        stack_parent[top] = node
        stack_side[top] = 0
        top += 1
    return n_nodes, queries


@njit(cache=True)
def build_euclidean(x, work, labels, n0, supervised, scheme, gen,
                    left_pivot, right_pivot, left_child, right_child,
                    leaf_start, leaf_size, scratch, mask, counts):
    return _build(0, x, x[:1, :1], work, labels, n0, supervised, scheme, gen,
                  left_pivot, right_pivot, left_child, right_child,
                  leaf_start, leaf_size, scratch, mask, counts)


@njit(cache=True)
def build_matrix(dmat, work, labels, n0, supervised, scheme, gen,
                 left_pivot, right_pivot, left_child, right_child,
                 leaf_start, leaf_size, scratch, mask, counts):
    dummy = dmat[:1, :1]
    return _build(1, dummy, dmat, work, labels, n0, supervised, scheme, gen,
                  left_pivot, right_pivot, left_child, right_child,
                  leaf_start, leaf_size, scratch, mask, counts)


@njit(cache=True)
def traverse_euclidean(x, anchors, left_pivot, right_pivot,
                       left_child, right_child, out_leaf, out_depth):
    for qi in range(len(anchors)):
        a = anchors[qi]
        node = 0
        depth = 0
        while left_child[node] >= 0:
            dl = _sqdist(x, a, left_pivot[node])
            dr = _sqdist(x, a, right_pivot[node])
            node = left_child[node] if dl <= dr else right_child[node]
            depth += 1
        out_leaf[qi] = node
        out_depth[qi] = depth


@njit(cache=True)
def traverse_matrix(dmat, qrows, n_base, anchors, left_pivot, right_pivot,
                    left_child, right_child, out_leaf, out_depth):
    for qi in range(len(anchors)):
        a = anchors[qi]
        node = 0
        depth = 0
        while left_child[node] >= 0:
            if a < n_base:
                dl = dmat[a, left_pivot[node]]
                dr = dmat[a, right_pivot[node]]
            else:
                dl = qrows[a - n_base, left_pivot[node]]
                dr = qrows[a - n_base, right_pivot[node]]
            node = left_child[node] if dl <= dr else right_child[node]
            depth += 1
        out_leaf[qi] = node
        out_depth[qi] = depth
