import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from shopalign import align
from shopalign.corpus import Catalog, Session
from shopalign.errors import ValidationError

from conftest import make_table, random_table


def orthogonal(d, seed):
    q, r = np.linalg.qr(np.random.default_rng(seed).standard_normal((d, d)))
    return q * np.sign(np.diag(r))


def rotated_pair(n=300, d=48, seed=0):
    src = random_table(n, d, seed, "a")
    Q = orthogonal(d, seed + 100)
    tgt = make_table([f"b{i:03d}" for i in range(n)], src.U @ Q)
    return src, tgt, Q


def true_pairs(n, idx):
    return [(f"a{i:03d}", f"b{i:03d}") for i in idx]


def test_procrustes_recovers_rotation():
    src, tgt, Q = rotated_pair()
    m = align.procrustes_fit(align.SeedDictionary(true_pairs(300, range(300))), src, tgt)
    assert np.max(np.abs(m.W - Q)) < 1e-6
    assert m.is_orthogonal()


def test_procrustes_identity_and_errors():
    src = random_table(20, 5, 1)
    m = align.procrustes_fit(align.SeedDictionary([(p, p) for p in src.vocab.products]), src, src)
    assert np.allclose(m.W, np.eye(5))
    two = random_table(5, 2, 2)
    with pytest.raises(ValidationError):
        align.procrustes_fit(align.SeedDictionary([(two.vocab.products[0],) * 2]), two, two)
    with pytest.raises(ValidationError):
        align.procrustes_fit(align.SeedDictionary([("zz", "yy"), ("xx", "ww")]), two, two)


def test_self_learning_from_corrupted_seed():
    src, tgt, Q = rotated_pair()
    rng = np.random.default_rng(5)
    idx = rng.choice(300, 100, replace=False)
    pairs = true_pairs(300, idx)
    for k in rng.choice(100, 30, replace=False):
        pairs[k] = (pairs[k][0], f"b{int(rng.integers(300)):03d}")
    m = align.self_learning_align(align.SeedDictionary(pairs), src, tgt)
    assert np.max(np.abs(m.W - Q)) < 1e-3
    assert m.trace and m.trace[-1] == 300


def test_self_learning_fixed_point_and_zero_iterations():
    src = random_table(50, 8, 3)
    seed = align.SeedDictionary([(p, p) for p in src.vocab.products[:10]])
    m = align.self_learning_align(seed, src, src)
    assert np.allclose(m.W, np.eye(8)) and len(m.trace) <= 2
    src2, tgt, _ = rotated_pair(60, 8, 4)
    noisy = align.SeedDictionary([("a000", "b001"), ("a001", "b000"), ("a002", "b002"), ("a003", "b003")])
    raw = align.procrustes_fit(noisy, src2, tgt)
    assert np.array_equal(align.self_learning_align(noisy, src2, tgt, max_iters=0).W, raw.W)


def test_nm_identical_and_rotated_spaces():
    src = random_table(120, 16, 7)
    m = align.nm_align(src, src)
    assert np.max(np.abs(m.W - np.eye(16))) < 1e-6
    src, tgt, Q = rotated_pair(200, 16, 8)
    assert np.max(np.abs(align.nm_align(src, tgt).W - Q)) < 1e-3


def test_nm_on_unrelated_spaces_reports_dictionary_sizes():
    m = align.nm_align(random_table(80, 8, 1, "a"), random_table(90, 8, 2, "b"))
    assert m.is_orthogonal() and len(m.trace) >= 1 and all(t > 0 for t in m.trace)


def test_similarity_signatures_are_rotation_invariant():
    src, tgt, _ = rotated_pair(40, 6, 9)
    assert np.allclose(align.similarity_signatures(src), align.similarity_signatures(tgt))


def test_feature_seed_examples():
    rng = np.random.default_rng(0)
    feats = rng.standard_normal((30, 6))
    cat = Catalog([f"p{i}" for i in range(30)], ["x"] * 30, feats)
    seed = align.build_feature_seed(cat, cat, d=4, k=5)
    assert all(s == t for s, t, _ in seed) and len(seed) <= 10
    with pytest.raises(ValidationError):
        align.build_feature_seed(cat, cat, d=7, k=5)
    with pytest.raises(ValidationError):
        align.build_feature_seed(cat, cat, d=4, k=31)


def test_feature_seed_two_clusters_one_sample_each():
    pts = np.array([[0, 0], [0, 1], [1, 0], [1, 1], [10, 10], [10, 11], [11, 10], [11, 11]], dtype=float)
    pts += [0.0, 0.0]
    # nudge one member of each cluster towards its centroid so the "nearest to centroid" pick is unique
    pts[0] = [0.45, 0.5]
    pts[4] = [10.5, 10.45]
    feats = np.hstack([pts, np.zeros((8, 1))])
    a = Catalog([f"a{i}" for i in range(8)], ["x"] * 8, feats)
    b = Catalog(["b0", "b1"], ["x", "x"], np.array([[0.5, 0.5, 0.0], [10.5, 10.5, 0.0]]))
    seed = align.build_feature_seed(a, b, d=2, k=2)
    firsts = {s for s, _, _ in seed}
    assert {"a0", "a4"} <= firsts
    for s, t, w in seed:
        assert 0.0 < w <= 1.0 + 1e-9


def test_feature_seed_paper_setting(tiny_world):
    seed = align.build_feature_seed(tiny_world.catalog_a, tiny_world.catalog_b, d=20, k=50)
    assert len(seed) <= 100


def test_translate_point():
    d = 4
    v = np.arange(4.0)
    assert np.array_equal(align.translate_point(align.identity_map(d), v), v)
    assert np.array_equal(align.translate_point(align.AlignmentMap(np.eye(d)), np.zeros(d)), np.zeros(d))
    rng = np.random.default_rng(1)
    W, b = rng.standard_normal((4, 3)), rng.standard_normal(3)
    m = align.AlignmentMap(W, b, "UM")
    assert np.allclose(align.translate_point(m, v), [sum(v[i] * W[i, j] for i in range(4)) + b[j] for j in range(3)])
    with pytest.raises(ValidationError):
        m.apply(np.zeros(3))


def cross(pairs):
    return [(Session(f"s{i}", "A", (a,)), Session(f"s{i}", "B", (b,))) for i, (a, b) in enumerate(pairs)]


def test_um_recovers_planted_map_exactly():
    d, n = 6, 40
    src = random_table(n, d, 11, "a")
    rng = np.random.default_rng(12)
    W, b = rng.standard_normal((d, d)), rng.standard_normal(d)
    tgt = make_table([f"b{i:03d}" for i in range(n)], src.U @ W + b)
    m = align.pair_regression_align(cross(true_pairs(n, range(n))), src, tgt, ridge=0.0)
    assert np.max(np.abs(m.W - W)) < 1e-6 and np.max(np.abs(m.bias - b)) < 1e-6


def test_um_identity_regression():
    src = random_table(30, 4, 13, "a")
    tgt = make_table([f"b{i:03d}" for i in range(30)], src.U)
    m = align.pair_regression_align(cross(true_pairs(30, range(30))), src, tgt)
    assert np.allclose(m.W, np.eye(4), atol=1e-3) and np.allclose(m.bias, 0, atol=1e-3)


def test_um_rank_one_with_ridge_is_finite():
    src = random_table(5, 4, 14, "a")
    tgt = random_table(5, 4, 15, "b")
    m = align.pair_regression_align(cross([("a000", "b000")] * 10), src, tgt, ridge=1e-3)
    assert np.all(np.isfinite(m.W))


def test_um_needs_d_pairs():
    src = random_table(5, 8, 14, "a")
    with pytest.raises(ValidationError, match="activity-centroid"):
        align.pair_regression_align(cross(true_pairs(5, range(5))), src, src)


def test_am_identical_centroids_give_identity_on_span():
    acts = ["x", "y", "z", "w"]
    rng = np.random.default_rng(3)
    U = rng.standard_normal((40, 3))
    products = [f"p{i:02d}" for i in range(40)]
    labels = {p: acts[i % 4] for i, p in enumerate(products)}
    src = make_table(products, U)
    tgt = make_table(products, U)
    m = align.centroid_align(labels, labels, src, tgt, n_per_category=10, ridge=0.0)
    C = np.array([U[[i for i in range(40) if i % 4 == k]].mean(0) for k in range(4)])
    assert np.allclose(m.apply(C), C, atol=1e-9)


def test_am_single_shared_activity_fails():
    src = random_table(10, 3, 1)
    labels = {p: "x" for p in src.vocab.products}
    with pytest.raises(ValidationError):
        align.centroid_align(labels, labels, src, src)


def test_map_and_seed_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    for m in (align.AlignmentMap(rng.standard_normal((3, 2)) / 7, rng.standard_normal(2), "UM"),
              align.random_map(4, 1)):
        align.write_map(tmp_path / "m.map", m)
        back = align.read_map(tmp_path / "m.map")
        assert np.array_equal(back.W, m.W) and back.method == m.method
        assert (back.bias is None) == (m.bias is None)
        if m.bias is not None:
            assert np.array_equal(back.bias, m.bias)
    seed = align.SeedDictionary([("a", "b", 0.25), ("c", "d")])
    align.write_seed(tmp_path / "s.tsv", seed)
    assert align.read_seed(tmp_path / "s.tsv") == seed


def test_seed_validation():
    with pytest.raises(ValidationError):
        align.SeedDictionary([])
    with pytest.raises(ValidationError):
        align.SeedDictionary([("a", "b", 0.0)])


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_procrustes_output_is_orthogonal(d, seed):
    src = random_table(d + 3, d, seed, "a")
    tgt = random_table(d + 3, d, seed + 1, "b")
    pairs = list(zip(src.vocab.products, tgt.vocab.products))
    assert align.procrustes_fit(align.SeedDictionary(pairs), src, tgt).is_orthogonal()


def test_im_on_synthetic_world_beats_random(tiny_world, tiny_tables):
    A, B = tiny_tables
    m = align.im_align(tiny_world.catalog_a, tiny_world.catalog_b, A, B, clusters=20)
    gold = tiny_world.truth.correspondence
    assert align.dictionary_precision(m, A, B, gold) > align.dictionary_precision(align.random_map(A.dim), A, B, gold)
