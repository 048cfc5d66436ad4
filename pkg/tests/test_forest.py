import numpy as np
import pytest

from comprf import comptree
from comprf.comptree import BuildParams, PivotPolicy
from comprf.errors import (
    ConfigError,
    FingerprintMismatchError,
    ModelFormatError,
    TaskMismatchError,
)
from comprf.forest import Forest, ForestParams, _decide, fit, load, save
from comprf.oracle import counting, distance_matrix_oracle, euclidean_oracle


def params(task="classify", M=4, n0=2, seed=11, policy="supervised", **kw):
    return ForestParams(
        M=M, n0=n0, seed=seed, policy=PivotPolicy(policy), task=task, **kw
    )


def toy_classes(n=40, d=3, classes=2, seed=1):
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(classes, d)) * 4
    y = rng.integers(0, classes, n)
    x = centers[y] + rng.normal(size=(n, d))
    return x, y


def manual_forest(trees, y, task="regress", **kw):
    y = np.asarray(y, dtype=np.float64)
    ids = np.unique(np.concatenate([t.members for t in trees]))
    p = ForestParams(
        M=len(trees), n0=max(t.n0 for t in trees), seed=0,
        policy=PivotPolicy("unsupervised"), task=task, **kw,
    )
    return Forest(
        trees=trees, subsamples=[t.members for t in trees], params=p,
        fingerprint="", train_ids=ids, train_values=y[ids],
        class_count=int(y.max()) + 1 if task == "classify" else None,
    )


def single_leaf_tree(subset, x):
    return comptree.build(
        subset, euclidean_oracle(x), None,
        BuildParams(n0=len(subset), seed=0, policy=PivotPolicy("unsupervised")),
    )


def test_forest_of_one_matches_single_tree():
    x, y = toy_classes(30)
    orc = euclidean_oracle(x)
    f = fit(np.arange(30), orc, y, params(M=1, n0=3, seed=5))
    assert f.M == 1
    assert np.array_equal(np.sort(f.trees[0].members), np.arange(30))
    tree = f.trees[0]
    for q in range(0, 30, 5):
        leaf = tree.traverse(q, orc)
        members = tree.leaf_members(leaf)
        votes = np.bincount(y[members])
        assert f.predict(q, orc).value == int(np.argmax(votes))


def test_pooled_majority_simple():
    x = np.array([[0.0], [0.1], [5.0]])
    y = np.array([1, 1, 0])
    f = fit(np.arange(3), euclidean_oracle(x), y, params(M=1, n0=3))
    assert f.predict(1, euclidean_oracle(x)).value == 1


def test_binary_tie_breaks_to_smaller_code():
    x = np.arange(4, dtype=float)[:, None]
    y = np.array([0, 0, 1, 1])
    f = fit(np.arange(4), euclidean_oracle(x), y, params(M=1, n0=4))
    p = f.predict(0, euclidean_oracle(x))
    assert p.pooled_size == 4
    assert p.value == 0


def test_regression_pools_mean():
    x = np.arange(4, dtype=float)[:, None]
    targets = np.array([1.0, 2.0, 3.0, 6.0])
    f = fit(
        np.arange(4), euclidean_oracle(x), targets,
        params(task="regress", policy="unsupervised", M=2, n0=4),
    )
    p = f.predict(0, euclidean_oracle(x))
    assert p.value == pytest.approx(3.0)
    assert p.pooled_size == 8  # both trees pool the same full leaf


def test_decide_rules_and_example():
    counts = np.array([5, 4, 0])
    assert _decide(counts, "one_vs_one") == 0
    assert _decide(counts, "plurality") == 0
    assert _decide(np.array([0, 0, 7]), "one_vs_one") == 2
    assert _decide(np.array([2, 2, 1]), "one_vs_one") == 0
    assert _decide(np.array([2, 2, 1]), "plurality") == 0
    # pairwise wins over one pooled count vector are monotone in the counts,
    # so the two rules always agree; pin that consequence down
    rng = np.random.default_rng(0)
    for _ in range(200):
        c = rng.integers(0, 6, size=rng.integers(2, 7))
        assert _decide(c, "one_vs_one") == _decide(c, "plurality")


def test_predict_batch_basics():
    x, y = toy_classes(36)
    orc = euclidean_oracle(x)
    f = fit(np.arange(30), orc, y, params(M=3, n0=2, seed=2))
    assert f.predict_batch([], orc) == []
    single = f.predict(31, orc)
    batch = f.predict_batch([31], orc)[0]
    assert batch == single
    queries = np.arange(30, 36)
    preds = f.predict_batch(queries, orc)
    assert [p.value for p in preds] == [f.predict(int(q), orc).value for q in queries]
    assert sum(p.triplet_queries for p in preds) == sum(
        f.predict(int(q), orc).triplet_queries for q in queries
    )


def test_prediction_accounting_fields():
    x, y = toy_classes(40)
    orc = euclidean_oracle(x)
    f = fit(np.arange(32), orc, y, params(M=5, n0=3, seed=9))
    depths = [t.node_depths() for t in f.trees]
    for q in range(32, 40):
        p = f.predict(q, orc)
        assert p.pooled_size == sum(p.per_tree_leaf_sizes)
        assert len(p.per_tree_leaf_sizes) == 5
        expect = sum(
            int(d[t.traverse(q, orc)]) for t, d in zip(f.trees, depths)
        )
        assert p.triplet_queries == expect
        max_depth = max(int(d.max()) for d in depths)
        assert p.triplet_queries <= 5 * max_depth


def test_tree_order_does_not_matter():
    x, y = toy_classes(30, classes=3)
    orc = euclidean_oracle(x)
    f = fit(np.arange(24), orc, y, params(M=6, n0=2, seed=3))
    g = Forest(
        trees=f.trees[::-1], subsamples=f.subsamples[::-1], params=f.params,
        fingerprint=f.fingerprint, train_ids=f.train_ids,
        train_values=f.train_values, class_count=f.class_count,
    )
    for q in range(24, 30):
        assert f.predict(q, orc).value == g.predict(q, orc).value


def test_pure_class_training_set():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(20, 2))
    y = np.full(20, 3, dtype=np.int64)
    orc = euclidean_oracle(x)
    for m, n0, r in [(1, 1, 1.0), (4, 2, 1.0), (3, 1, 0.5)]:
        f = fit(np.arange(15), orc, y, params(M=m, n0=n0, seed=m, r=r))
        for q in range(15, 20):
            assert f.predict(q, orc).value == 3


def test_backend_equivalence_predictions():
    rng = np.random.default_rng(6)
    x = rng.integers(-6, 7, size=(60, 3)).astype(float)
    y = rng.integers(0, 3, 60)
    d = np.zeros((60, 60))
    for i in range(60):
        for j in range(60):
            d[i, j] = ((x[i] - x[j]) ** 2).sum()
    pe = params(M=8, n0=2, seed=21, policy="supervised")
    fe = fit(np.arange(40), euclidean_oracle(x), y, pe)
    fm = fit(np.arange(40), distance_matrix_oracle(d), y, pe)
    qe = euclidean_oracle(x)
    qm = distance_matrix_oracle(d)
    for q in range(40, 60):
        a = fe.predict(q, qe)
        b = fm.predict(q, qm)
        assert a == b


def test_fit_engine_parity_with_subsampling(tmp_path):
    x, y = toy_classes(50)
    orc = euclidean_oracle(x)
    p = params(M=5, n0=2, seed=8, r=0.6)
    fast = fit(np.arange(50), orc, y, p, fingerprint="fp")
    slow = fit(np.arange(50), orc, y, p, fingerprint="fp", engine="generic")
    a, b = tmp_path / "fast.model", tmp_path / "slow.model"
    save(fast, a)
    save(slow, b)
    assert a.read_bytes() == b.read_bytes()


def test_subsampling_properties():
    x, y = toy_classes(40)
    p = params(M=6, n0=2, seed=13, r=0.5)
    f = fit(np.arange(40), euclidean_oracle(x), y, p)
    assert all(len(s) == 20 for s in f.subsamples)
    for tree, sub in zip(f.trees, f.subsamples):
        assert set(tree.members) <= set(sub)
        assert len(tree.members) == len(sub)
    assert any(
        not np.array_equal(np.sort(f.subsamples[0]), np.sort(s))
        for s in f.subsamples[1:]
    )


def test_growing_m_keeps_earlier_trees():
    x, y = toy_classes(30)
    orc = euclidean_oracle(x)
    small = fit(np.arange(30), orc, y, params(M=2, n0=2, seed=7))
    big = fit(np.arange(30), orc, y, params(M=6, n0=2, seed=7))
    for j in range(2):
        assert np.array_equal(small.trees[j].members, big.trees[j].members)
        assert np.array_equal(small.trees[j].left_pivot, big.trees[j].left_pivot)


def test_set_pooling_discounts_repeats():
    x = np.array([[0.0], [1.0], [1.1]])
    y = np.array([0, 1, 1])
    t1 = single_leaf_tree(np.array([0, 1]), x)
    t2 = single_leaf_tree(np.array([0, 2]), x)
    orc = euclidean_oracle(x)
    multi = manual_forest([t1, t2], y, task="classify")
    dedup = manual_forest([t1, t2], y, task="classify", pooling="set")
    # multiset pool {0,1,0,2} -> labels 0,1,0,1 -> tie -> class 0
    assert multi.predict(0, orc).value == 0
    assert multi.predict(0, orc).pooled_size == 4
    # set pool {0,1,2} -> labels 0,1,1 -> class 1
    assert dedup.predict(0, orc).value == 1
    assert dedup.predict(0, orc).pooled_size == 3


def test_per_tree_aggregation_differs_with_unequal_leaves():
    x = np.array([[0.0], [10.0], [10.5]])
    targets = np.array([10.0, 1.0, 1.0])
    t1 = single_leaf_tree(np.array([0]), x)
    t2 = single_leaf_tree(np.array([1, 2]), x)
    orc = euclidean_oracle(x)
    pooled = manual_forest([t1, t2], targets)
    averaged = manual_forest([t1, t2], targets, aggregation="per_tree")
    assert pooled.predict(0, orc).value == pytest.approx(4.0)
    assert averaged.predict(0, orc).value == pytest.approx(5.5)


def test_per_tree_aggregation_classification():
    x = np.array([[0.0], [0.2], [9.0], [9.1], [9.2]])
    y = np.array([0, 0, 1, 1, 1])
    t1 = single_leaf_tree(np.array([0, 1]), x)       # votes 0
    t2 = single_leaf_tree(np.array([2, 3, 4]), x)    # votes 1
    t3 = single_leaf_tree(np.array([0, 1]), x)       # votes 0
    orc = euclidean_oracle(x)
    f = manual_forest([t1, t2, t3], y, task="classify", aggregation="per_tree")
    # tree votes (0, 1, 0) -> class 0 even though pooled labels lean 1
    assert f.predict(0, orc).value == 0
    pooled = manual_forest([t1, t2, t3], y, task="classify")
    assert pooled.predict(0, orc).value == 0  # pooled counts 4 vs 3
    f2 = manual_forest([t2, t2, t1], y, task="classify", aggregation="per_tree")
    assert f2.predict(0, orc).value == 1


def test_predict_values_dtype():
    x, y = toy_classes(20)
    orc = euclidean_oracle(x)
    f = fit(np.arange(20), orc, y, params(M=2, n0=2))
    vals = f.predict_values(np.arange(5), orc)
    assert vals.dtype == np.int64
    g = fit(
        np.arange(20), orc, y.astype(float),
        params(task="regress", policy="unsupervised", M=2, n0=2),
    )
    assert g.predict_values(np.arange(5), orc).dtype == np.float64


def test_save_load_roundtrip(tmp_path):
    x, y = toy_classes(36, classes=3)
    orc = euclidean_oracle(x)
    f = fit(np.arange(30), orc, y, params(M=4, n0=2, seed=19), fingerprint="abc123")
    path = tmp_path / "m.model"
    save(f, path)
    g = load(path, expect_fingerprint="abc123")
    assert g.params == f.params
    assert g.class_count == f.class_count
    for q in range(30, 36):
        assert f.predict(q, orc) == g.predict(q, orc)


def test_save_is_deterministic(tmp_path):
    x, y = toy_classes(25)
    orc = euclidean_oracle(x)
    a, b = tmp_path / "a.model", tmp_path / "b.model"
    save(fit(np.arange(25), orc, y, params(M=4, n0=1, seed=3)), a)
    save(fit(np.arange(25), orc, y, params(M=4, n0=1, seed=3)), b)
    assert a.read_bytes() == b.read_bytes()


def test_load_rejects_bad_files(tmp_path):
    x, y = toy_classes(20)
    f = fit(np.arange(20), euclidean_oracle(x), y, params(M=2, n0=2), fingerprint="good")
    path = tmp_path / "m.model"
    save(f, path)
    with pytest.raises(FingerprintMismatchError, match="different data"):
        load(path, expect_fingerprint="evil")
    load(path)  # no expectation, no check
    raw = bytearray(path.read_bytes())
    (tmp_path / "trunc.model").write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ModelFormatError, match="truncated"):
        load(tmp_path / "trunc.model")
    bad = bytearray(raw)
    bad[:8] = b"NOTMODEL"
    (tmp_path / "magic.model").write_bytes(bad)
    with pytest.raises(ModelFormatError, match="not a comprf model"):
        load(tmp_path / "magic.model")
    ver = bytearray(raw)
    ver[8] = 99
    (tmp_path / "ver.model").write_bytes(ver)
    with pytest.raises(ModelFormatError, match="version"):
        load(tmp_path / "ver.model")


def test_params_validation():
    pol = PivotPolicy("supervised")
    with pytest.raises(ConfigError):
        ForestParams(M=0, n0=1, seed=0, policy=pol, task="classify")
    with pytest.raises(ConfigError):
        ForestParams(M=1, n0=0, seed=0, policy=pol, task="classify")
    with pytest.raises(ConfigError):
        ForestParams(M=1, n0=1, seed=0, policy=pol, task="classify", r=0.0)
    with pytest.raises(ConfigError):
        ForestParams(M=1, n0=1, seed=0, policy=pol, task="rank")
    with pytest.raises(ConfigError, match="unsupervised"):
        ForestParams(M=1, n0=1, seed=0, policy=pol, task="regress")
    with pytest.raises(ConfigError):
        params(multiclass_rule="borda")
    with pytest.raises(ConfigError):
        params(pooling="bag")
    with pytest.raises(ConfigError):
        params(aggregation="median")


def test_fit_errors():
    x, y = toy_classes(10)
    orc = euclidean_oracle(x)
    with pytest.raises(ConfigError, match="empty"):
        fit(np.array([], dtype=int), orc, y, params())
    with pytest.raises(TaskMismatchError, match="integer class codes"):
        fit(np.arange(10), orc, y.astype(float), params())
    with pytest.raises(TaskMismatchError, match="numeric"):
        fit(
            np.arange(10), orc, np.array(["a"] * 10),
            params(task="regress", policy="unsupervised"),
        )
