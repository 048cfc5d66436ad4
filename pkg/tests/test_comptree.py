import numpy as np
import pytest

from comprf.comptree import (
    BuildParams,
    CompTree,
    PivotPolicy,
    build,
    select_pivots,
)
from comprf.errors import ConfigError
from comprf.oracle import (
    counting,
    distance_matrix_oracle,
    euclidean_oracle,
    gram_oracle,
)
from comprf.rng import generator

TREE_FIELDS = (
    "left_pivot",
    "right_pivot",
    "left_child",
    "right_child",
    "leaf_start",
    "leaf_size",
    "members",
)


def trees_equal(a: CompTree, b: CompTree) -> bool:
    return all(np.array_equal(getattr(a, f), getattr(b, f)) for f in TREE_FIELDS)


def sqdist_matrix(x):
    n = len(x)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            d[i, j] = ((x[i] - x[j]) ** 2).sum()
    return d


def unsup(n0, seed):
    return BuildParams(n0=n0, seed=seed, policy=PivotPolicy("unsupervised"))


def sup(n0, seed, scheme="pairs"):
    return BuildParams(n0=n0, seed=seed, policy=PivotPolicy("supervised", scheme))


def internal_sizes(tree: CompTree):
    size = np.zeros(tree.n_nodes, dtype=int)
    for node in range(tree.n_nodes - 1, -1, -1):
        if tree.is_leaf(node):
            size[node] = tree.leaf_size[node]
        else:
            size[node] = size[tree.left_child[node]] + size[tree.right_child[node]]
    return size


def test_small_set_is_single_leaf():
    x = np.random.default_rng(0).normal(size=(4, 2))
    orc = counting(euclidean_oracle(x))
    tree = build(np.arange(4), orc, None, unsup(n0=4, seed=1))
    assert tree.n_nodes == 1
    assert tree.is_leaf(0)
    assert sorted(tree.leaf_members(0)) == [0, 1, 2, 3]
    assert orc.stats.query_count == 0
    assert tree.build_queries == 0


def test_collinear_split_by_extreme_pivots():
    # 1-D points 0,1,2,3: whenever the root pivots are {0, 3}, item 1 joins
    # 0's side and item 2 joins 3's side
    x = np.array([[0.0], [1.0], [2.0], [3.0]])
    orc = euclidean_oracle(x)
    seen = 0
    for seed in range(60):
        tree = build(np.arange(4), orc, None, unsup(n0=2, seed=seed))
        lp, rp = int(tree.left_pivot[0]), int(tree.right_pivot[0])
        if {lp, rp} != {0, 3}:
            continue
        seen += 1
        left = set(tree.leaf_members(tree.left_child[0]))
        right = set(tree.leaf_members(tree.right_child[0]))
        if lp == 0:
            assert left == {0, 1} and right == {2, 3}
        else:
            assert left == {2, 3} and right == {0, 1}
    assert seen >= 3


def test_collinear_tie_goes_left():
    # pivots {0, 2}: item 1 is equidistant and must join the left pivot
    x = np.array([[0.0], [1.0], [2.0], [5.0]])
    orc = euclidean_oracle(x)
    seen = 0
    for seed in range(80):
        tree = build(np.arange(4), orc, None, unsup(n0=2, seed=seed))
        lp, rp = int(tree.left_pivot[0]), int(tree.right_pivot[0])
        if (lp, rp) != (0, 2):
            continue
        seen += 1
        assert 1 in tree.leaf_members(tree.left_child[0])
    assert seen >= 3


def test_query_accounting_exact():
    rng = np.random.default_rng(5)
    x = rng.uniform(size=(100, 2))
    orc = counting(euclidean_oracle(x))
    tree = build(np.arange(100), orc, None, unsup(n0=1, seed=9))
    assert np.all(tree.leaf_size[tree.left_child < 0] == 1)
    size = internal_sizes(tree)
    expected = int(sum(size[n] - 2 for n in range(tree.n_nodes) if not tree.is_leaf(n)))
    assert orc.stats.query_count == expected
    assert tree.build_queries == expected


def test_select_pivots_two_items_supervised():
    labels = np.zeros(10, dtype=int)
    labels[7] = 1
    for seed in range(20):
        pair = select_pivots([3, 7], labels, PivotPolicy("supervised"), generator(seed))
        assert set(pair) == {3, 7}


def test_select_pivots_orientation_is_fair():
    labels = np.array([0, 1])
    lefts = sum(
        select_pivots([0, 1], labels, PivotPolicy("supervised"), generator(s))[0] == 0
        for s in range(2000)
    )
    sigma = np.sqrt(0.25 / 2000)
    assert abs(lefts / 2000 - 0.5) <= 3 * sigma


def test_select_pivots_uniform_over_differing_pairs():
    # labels (0,0,1): valid unordered pairs are {0,2} and {1,2}, each 1/2
    labels = np.array([0, 0, 1])
    for scheme in ("pairs", "uniform_first"):
        hits = {frozenset({0, 2}): 0, frozenset({1, 2}): 0}
        trials = 2000
        for s in range(trials):
            pair = select_pivots(
                [0, 1, 2], labels, PivotPolicy("supervised", scheme), generator(s)
            )
            hits[frozenset(pair)] += 1
        sigma = np.sqrt(0.25 / trials)
        for count in hits.values():
            assert abs(count / trials - 0.5) <= 3 * sigma, scheme


def test_pair_schemes_differ_under_imbalance():
    # labels (0,0,0,1): uniform-over-pairs gives the lone 1 every pair,
    # weight on each 0 is 1/3; uniform_first picks each of the four points
    # as x1 with probability 1/4, so pairs through a given 0 get 1/4 + 1/12
    labels = np.array([0, 0, 0, 1])
    trials = 3000
    freq = {}
    for scheme in ("pairs", "uniform_first"):
        c = 0
        for s in range(trials):
            pair = select_pivots(
                np.arange(4), labels, PivotPolicy("supervised", scheme), generator(s)
            )
            if set(pair) == {0, 3}:
                c += 1
        freq[scheme] = c / trials
    assert abs(freq["pairs"] - 1 / 3) < 0.04
    assert abs(freq["uniform_first"] - 1 / 3) < 0.04  # equal here: symmetry


def test_select_pivots_all_same_label_falls_back():
    labels = np.zeros(6, dtype=int)
    for seed in range(40):
        a = select_pivots(np.arange(6), labels, PivotPolicy("supervised"), generator(seed))
        b = select_pivots(np.arange(6), None, PivotPolicy("unsupervised"), generator(seed))
        assert a == b


def test_supervised_tree_on_pure_labels_equals_unsupervised():
    x = np.random.default_rng(3).normal(size=(30, 2))
    orc = euclidean_oracle(x)
    y = np.zeros(30, dtype=int)
    a = build(np.arange(30), orc, y, sup(n0=2, seed=17))
    b = build(np.arange(30), orc, None, unsup(n0=2, seed=17))
    assert trees_equal(a, b)


def test_select_pivots_errors():
    with pytest.raises(ConfigError, match="pivot pair"):
        select_pivots([4], None, PivotPolicy("unsupervised"), generator(0))
    with pytest.raises(ConfigError, match="labels"):
        select_pivots([0, 1], None, PivotPolicy("supervised"), generator(0))
    with pytest.raises(ConfigError, match="policy"):
        PivotPolicy("semi")
    with pytest.raises(ConfigError, match="scheme"):
        PivotPolicy("supervised", "round_robin")


def test_build_errors():
    x = np.zeros((3, 1))
    orc = euclidean_oracle(x)
    with pytest.raises(ConfigError, match="empty"):
        build(np.array([], dtype=int), orc, None, unsup(1, 0))
    with pytest.raises(ConfigError, match="labels"):
        build(np.arange(3), orc, None, sup(1, 0))
    with pytest.raises(ConfigError, match="n0"):
        BuildParams(n0=0, seed=0, policy=PivotPolicy("unsupervised"))
    with pytest.raises(ConfigError, match="compiled"):
        build(np.arange(3), counting(orc), None, unsup(1, 0), engine="fast")
    with pytest.raises(ConfigError, match="engine"):
        build(np.arange(3), orc, None, unsup(1, 0), engine="turbo")


def test_randomized_invariants_with_duplicates():
    rng = np.random.default_rng(2026)
    for trial in range(40):
        n = int(rng.integers(1, 40))
        base = rng.normal(size=(max(2, n // 2), 3))
        x = base[rng.integers(0, len(base), n)]  # duplicates likely
        y = rng.integers(0, 3, n)
        n0 = int(rng.integers(1, 6))
        policy = (
            PivotPolicy("unsupervised")
            if trial % 3 == 0
            else PivotPolicy("supervised", "pairs" if trial % 3 == 1 else "uniform_first")
        )
        params = BuildParams(n0=n0, seed=trial, policy=policy)
        tree = build(np.arange(n), euclidean_oracle(x), y, params)
        tree.validate()
        assert np.array_equal(np.sort(tree.members), np.arange(n))


def test_build_on_scrambled_subset():
    rng = np.random.default_rng(8)
    x = rng.normal(size=(30, 2))
    subset = np.array([17, 3, 25, 8, 11, 29, 0])
    tree = build(subset, euclidean_oracle(x), None, unsup(2, 4))
    tree.validate()
    assert sorted(tree.members) == sorted(subset)


def test_determinism_and_seed_sensitivity():
    x = np.random.default_rng(4).normal(size=(60, 3))
    orc = euclidean_oracle(x)
    a = build(np.arange(60), orc, None, unsup(1, 123))
    b = build(np.arange(60), orc, None, unsup(1, 123))
    c = build(np.arange(60), orc, None, unsup(1, 124))
    assert trees_equal(a, b)
    assert not trees_equal(a, c)


@pytest.mark.parametrize("policy_kind,scheme", [
    ("unsupervised", "pairs"),
    ("supervised", "pairs"),
    ("supervised", "uniform_first"),
])
def test_engine_parity_euclidean(policy_kind, scheme):
    rng = np.random.default_rng(31)
    x = rng.normal(size=(120, 4))
    y = rng.integers(0, 4, 120)
    orc = euclidean_oracle(x)
    params = BuildParams(n0=2, seed=77, policy=PivotPolicy(policy_kind, scheme))
    fast = build(np.arange(120), orc, y, params, engine="fast")
    slow = build(np.arange(120), orc, y, params, engine="generic")
    assert trees_equal(fast, slow)
    assert fast.build_queries == slow.build_queries


def test_engine_parity_matrix():
    rng = np.random.default_rng(32)
    x = rng.normal(size=(70, 3))
    orc = distance_matrix_oracle(sqdist_matrix(x))
    y = rng.integers(0, 2, 70)
    params = sup(n0=1, seed=5)
    fast = build(np.arange(70), orc, y, params, engine="fast")
    slow = build(np.arange(70), orc, y, params, engine="generic")
    assert trees_equal(fast, slow)


def test_backends_build_identical_trees_on_integer_data():
    rng = np.random.default_rng(33)
    x = rng.integers(-8, 9, size=(50, 3)).astype(float)
    y = rng.integers(0, 2, 50)
    for params in (unsup(2, 21), sup(1, 22)):
        eu = build(np.arange(50), euclidean_oracle(x), y, params)
        dm = build(np.arange(50), distance_matrix_oracle(sqdist_matrix(x)), y, params)
        gm = build(np.arange(50), gram_oracle(x @ x.T), y, params)
        assert trees_equal(eu, dm)
        assert trees_equal(eu, gm)


def test_traverse_single_leaf_no_queries():
    x = np.zeros((2, 1))
    orc = counting(euclidean_oracle(x))
    tree = build(np.arange(2), orc, None, unsup(2, 0))
    before = orc.stats.query_count
    assert tree.traverse(0, orc) == 0
    assert orc.stats.query_count == before


def test_traverse_query_count_equals_depth():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(64, 2))
    orc = euclidean_oracle(x)
    tree = build(np.arange(64), orc, None, unsup(1, 2))
    counted = counting(orc)
    depths = tree.node_depths()
    for q in range(0, 64, 7):
        before = counted.stats.query_count
        leaf = tree.traverse(q, counted)
        assert counted.stats.query_count - before == depths[leaf]


def test_training_points_reach_their_own_leaf():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(80, 3))
    d = np.sqrt(sqdist_matrix(x))
    assert len(np.unique(np.round(d[np.triu_indices(80, 1)], 12))) == 80 * 79 // 2
    orc = euclidean_oracle(x)
    tree = build(np.arange(80), orc, None, unsup(1, 3))
    leaves, _ = tree.traverse_batch(np.arange(80), orc)
    for item, leaf in enumerate(leaves):
        assert item in tree.leaf_members(leaf)


def test_leaf_members_satisfy_pivot_half_spaces():
    rng = np.random.default_rng(13)
    x = rng.normal(size=(60, 2))
    orc = euclidean_oracle(x)
    tree = build(np.arange(60), orc, None, unsup(3, 14))
    parent = {}
    for node in range(tree.n_nodes):
        if not tree.is_leaf(node):
            parent[int(tree.left_child[node])] = (node, True)
            parent[int(tree.right_child[node])] = (node, False)
    for node in range(tree.n_nodes):
        if not tree.is_leaf(node):
            continue
        for m in tree.leaf_members(node):
            cur = node
            while cur in parent:
                up, went_left = parent[cur]
                dl = ((x[m] - x[tree.left_pivot[up]]) ** 2).sum()
                dr = ((x[m] - x[tree.right_pivot[up]]) ** 2).sum()
                assert (dl <= dr) == went_left
                cur = up


def test_traverse_batch_matches_scalar_traverse():
    rng = np.random.default_rng(15)
    x = rng.normal(size=(50, 2))
    orc = euclidean_oracle(x)
    tree = build(np.arange(40), orc, None, unsup(2, 6))
    queries = np.arange(40, 50)
    batch_leaves, batch_depths = tree.traverse_batch(queries, orc)
    depths = tree.node_depths()
    for q, leaf, dep in zip(queries, batch_leaves, batch_depths):
        assert tree.traverse(int(q), orc) == leaf
        assert depths[leaf] == dep


def test_traverse_out_of_sample_consistent_across_backends():
    rng = np.random.default_rng(16)
    x = rng.integers(-5, 6, size=(30, 3)).astype(float)
    q = rng.integers(-5, 6, size=(5, 3)).astype(float)
    tree = build(np.arange(30), euclidean_oracle(x), None, unsup(1, 8))
    eu = euclidean_oracle(x).with_queries(q)
    rows = np.array([((x - qq) ** 2).sum(axis=1) for qq in q])
    dm = distance_matrix_oracle(sqdist_matrix(x)).with_queries(rows)
    ids = np.arange(30, 35)
    le, de = tree.traverse_batch(ids, eu)
    lm, dm_depth = tree.traverse_batch(ids, dm)
    lg, dg = tree.traverse_batch(ids, counting(eu))
    assert np.array_equal(le, lm) and np.array_equal(le, lg)
    assert np.array_equal(de, dm_depth) and np.array_equal(de, dg)


def test_n0_bounds_leaf_sizes():
    rng = np.random.default_rng(18)
    x = rng.normal(size=(45, 2))
    for n0 in (1, 2, 5, 45, 100):
        tree = build(np.arange(45), euclidean_oracle(x), None, unsup(n0, 1))
        leaf_sizes = tree.leaf_size[tree.left_child < 0]
        assert leaf_sizes.max() <= n0
        assert leaf_sizes.sum() == 45
        if n0 >= 45:
            assert tree.n_nodes == 1
