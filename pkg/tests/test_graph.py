import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ksirec.data import FeatureMatrix
from ksirec.graph import SparseGraph, build_modality_graph, cosine_similarity_row, normalize, spmm, topk_sparsify

from oracles import dense_knn_graph


def dense_graph(a):
    a = np.asarray(a, dtype=np.float64)
    cols = [np.flatnonzero(r) for r in a]
    return SparseGraph.from_rows(a.shape[0], cols, [a[i, c] for i, c in enumerate(cols)])


@pytest.mark.parametrize(
    "ei, ej, expected",
    [((3, 4), (3, 4), 1.0), ((1, 0), (0, 1), 0.0), ((1, 0), (1, 1), 0.7071067811865476)],
)
def test_cosine_examples(ei, ej, expected):
    s = cosine_similarity_row(np.array([ei, ej], dtype=np.float64), 0)
    assert s[1] == pytest.approx(expected, abs=1e-15)


def test_cosine_zero_row_is_zero():
    s = cosine_similarity_row(np.array([[1.0, 2.0], [0.0, 0.0]]), 0)
    assert s[1] == 0.0


def test_topk_ordering():
    sims = np.array([[1.0, 0.9, 0.5, 0.2]] + [np.roll([1.0, 0, 0, 0], i).tolist() for i in range(1, 4)])
    g = topk_sparsify(sims, 2)
    assert g.col_indices[: g.row_offsets[1]].tolist() == [0, 1]
    assert g.weights[: g.row_offsets[1]].tolist() == [1.0, 0.9]


def test_topk_clips_negatives():
    sims = np.array([[1.0, -0.3, -0.9], [0, 1.0, 0], [0, 0, 1.0]])
    g = topk_sparsify(sims, 2)
    assert g.col_indices[: g.row_offsets[1]].tolist() == [0]


def test_topk_tie_rule():
    sims = np.eye(4)
    sims[0] = [1.0, 0.5, 0.5, 0.5]
    g = topk_sparsify(sims, 2)
    assert g.col_indices[: g.row_offsets[1]].tolist() == [0, 1]


def test_topk_large_k_keeps_all_nonnegative():
    sims = np.array([[1.0, 0.2, -0.1], [0.2, 1.0, 0.3], [0.0, 0.3, 1.0]])
    g = topk_sparsify(sims, 10)
    assert g.row_nnz().tolist() == [2, 3, 2]


def test_exclude_self_loop():
    sims = np.array([[1.0, 0.5], [0.5, 1.0]])
    g = topk_sparsify(sims, 2, exclude_self_loop=True)
    assert g.col_indices.tolist() == [1, 0]


def test_normalize_hand_case():
    g = normalize(dense_graph([[0, 0.8], [0.8, 0]]))
    np.testing.assert_allclose(g.to_dense(), [[0, 1], [1, 0]], atol=1e-15)


def test_normalize_identity():
    np.testing.assert_array_equal(normalize(dense_graph(np.eye(3))).to_dense(), np.eye(3))


def test_normalize_matches_dense_oracle():
    rng = np.random.default_rng(0)
    a = rng.random((50, 50)) * (rng.random((50, 50)) < 0.1)
    a[7] = 0.0
    g = normalize(dense_graph(a))
    deg = a.sum(axis=1)
    inv = np.where(deg > 0, 1 / np.sqrt(np.where(deg > 0, deg, 1)), 0)
    oracle = np.diag(inv) @ a @ np.diag(inv)
    np.testing.assert_allclose(g.to_dense(), oracle, rtol=0, atol=1e-12)
    src = dense_graph(a)
    assert g.col_indices.tolist() == src.col_indices.tolist()
    assert g.row_offsets.tolist() == src.row_offsets.tolist()


def test_spmm_examples():
    swap = dense_graph([[0, 1], [1, 0]])
    np.testing.assert_array_equal(spmm(swap, np.array([[1.0, 2], [3, 4]])), [[3, 4], [1, 2]])
    H = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(spmm(dense_graph(np.eye(3)), H), H)


def test_spmm_matches_dense_and_transpose():
    rng = np.random.default_rng(1)
    a = rng.random((30, 30)) * (rng.random((30, 30)) < 0.2)
    H = rng.normal(size=(30, 8))
    g = dense_graph(a)
    np.testing.assert_allclose(spmm(g, H), a @ H, atol=1e-12, rtol=0)
    np.testing.assert_allclose(spmm(g, H, transpose=True), a.T @ H, atol=1e-12, rtol=0)


def test_spmm_dimension_mismatch():
    with pytest.raises(ValueError, match="dimension mismatch"):
        spmm(dense_graph(np.eye(3)), np.ones((2, 2)))


def test_three_identical_rows():
    g = build_modality_graph(np.ones((3, 4)), k=2)
    expected = np.array([[0.5, 0.5, 0], [0.5, 0.5, 0], [0.5, 0, 0.5]])
    np.testing.assert_allclose(g.to_dense(), expected, atol=1e-15)


def test_single_item_graph():
    g = build_modality_graph(np.array([[2.0, 1.0]]), k=10)
    np.testing.assert_array_equal(g.to_dense(), [[1.0]])


def test_zero_norm_row_propagates_nothing():
    g = build_modality_graph(np.array([[1.0, 0], [0, 0], [1.0, 1.0]]), k=3)
    assert g.row_nnz()[1] == 0
    assert 1 not in g.col_indices.tolist()


@pytest.mark.parametrize("block", [1, 3, 7, 1024])
def test_blocked_equals_naive(block):
    rng = np.random.default_rng(block)
    x = rng.normal(size=(37, 5))
    g = build_modality_graph(x, k=4, block_size=block)
    np.testing.assert_allclose(g.to_dense(), dense_knn_graph(x, 4), atol=1e-12, rtol=0)


def test_threads_do_not_change_output():
    x = np.random.default_rng(2).normal(size=(60, 6))
    a = build_modality_graph(x, 5, block_size=8, threads=1)
    b = build_modality_graph(x, 5, block_size=8, threads=4)
    assert a.weights.tobytes() == b.weights.tobytes()
    assert a.col_indices.tobytes() == b.col_indices.tobytes()


def test_exclude_self_loop_matches_oracle():
    x = np.random.default_rng(4).normal(size=(25, 4))
    g = build_modality_graph(x, 3, exclude_self_loop=True)
    assert np.all(np.diag(g.to_dense()) == 0)
    np.testing.assert_allclose(g.to_dense(), dense_knn_graph(x, 3, exclude_self_loop=True), atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, st.tuples(st.integers(1, 25), st.integers(1, 6)), elements=st.floats(-3, 3, width=32)),
    st.integers(1, 8),
)
def test_graph_properties(x, k):
    if not np.any(np.linalg.norm(x, axis=1) > 0):
        x = x.copy()
        x[0, 0] = 1.0
    g = build_modality_graph(FeatureMatrix("v", x), k)
    assert np.all(g.row_nnz() <= k)
    assert np.all(g.weights >= 0) and np.all(g.weights <= 1 + 1e-12)
    for r in range(g.n):
        row = g.col_indices[g.row_offsets[r] : g.row_offsets[r + 1]]
        assert np.all(np.diff(row) > 0)


def test_serialization_bit_exact(tmp_path):
    g = build_modality_graph(np.random.default_rng(5).normal(size=(40, 8)), 10)
    g.save(tmp_path / "g.ksg")
    h = SparseGraph.load(tmp_path / "g.ksg")
    assert (tmp_path / "g.ksg").read_bytes()[:4] == b"KSIG"
    assert g.weights.tobytes() == h.weights.tobytes()
    assert g.row_offsets.tobytes() == h.row_offsets.tobytes()
    assert g.col_indices.tobytes() == h.col_indices.tobytes()
