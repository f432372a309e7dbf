import logging
import math

import numpy as np
import pytest

from ksirec.errors import ConfigError
from ksirec.ssi import (
    NegativePool, ReducedFeatures, infonce_gradients, infonce_item_terms, infonce_loss, pca_reduce, pool_size,
    resample_negatives,
)

from conftest import central_difference, max_relative_error


def test_rank_one_component_explains_everything():
    base = np.array([1.0, -2.0, 0.5])
    X = np.outer(np.arange(1, 7), base)
    r = pca_reduce(X, 1)
    assert r.explained_variance_ratio[0] == pytest.approx(1.0, abs=1e-12)


def test_variance_equals_top_eigenvalues():
    X = np.random.default_rng(0).normal(size=(40, 7)) @ np.random.default_rng(1).normal(size=(7, 7))
    r = pca_reduce(X, 3)
    eig = np.sort(np.linalg.eigvalsh(np.cov(X, rowvar=False)))[::-1]
    assert r.matrix.var(axis=0, ddof=1).sum() == pytest.approx(eig[:3].sum(), abs=1e-8)
    np.testing.assert_allclose(r.explained_variance, eig[:3], atol=1e-8)


def test_full_dim_is_an_isometry():
    X = np.random.default_rng(2).normal(size=(15, 5))
    r = pca_reduce(X, 5)
    dist = lambda A: np.linalg.norm(A[:, None] - A[None], axis=-1)
    np.testing.assert_allclose(dist(r.matrix), dist(X), atol=1e-8)


def test_basis_orthonormal_and_sign_fixed():
    X = np.random.default_rng(3).normal(size=(30, 8))
    r = pca_reduce(X, 4)
    np.testing.assert_allclose(r.basis.T @ r.basis, np.eye(4), atol=1e-8)
    for j in range(4):
        col = r.basis[:, j]
        assert col[np.argmax(np.abs(col))] > 0


def test_pca_reproducible_bitwise():
    X = np.random.default_rng(4).normal(size=(25, 6))
    assert pca_reduce(X, 3).basis.tobytes() == pca_reduce(X, 3).basis.tobytes()


def test_pca_rank_deficient_warns(caplog):
    X = np.outer(np.arange(5.0), [1.0, 1.0, 0.0])
    with caplog.at_level(logging.WARNING):
        r = pca_reduce(X, 2)
    assert "rank tolerance" in caplog.text
    np.testing.assert_array_equal(r.basis[:, 1], 0.0)
    np.testing.assert_array_equal(r.matrix[:, 1], 0.0)


def test_pca_dim_validation():
    with pytest.raises(ConfigError, match="exceeds feature dim"):
        pca_reduce(np.ones((10, 3)), 4)


def test_reduced_features_save_load(tmp_path):
    r = pca_reduce(np.random.default_rng(5).normal(size=(12, 6)), 3)
    r.save(tmp_path / "v.kst")
    back = ReducedFeatures.load(tmp_path / "v.kst")
    assert back.matrix.tobytes() == r.matrix.tobytes()
    assert back.basis.tobytes() == r.basis.tobytes()
    np.testing.assert_array_equal(back.explained_variance_ratio, r.explained_variance_ratio)


def test_pool_size():
    assert pool_size(23033) == 44
    assert pool_size(100) == 1


def test_negatives_exclude_self():
    pool = resample_negatives(3, 1, np.random.default_rng(0))
    assert pool.shape == (3, 1)
    assert pool[0, 0] in (1, 2)
    for _ in range(50):
        p = resample_negatives(6, 4, np.random.default_rng(_))
        for i, row in enumerate(p):
            assert len(set(row.tolist())) == 4 and i not in row


def test_negatives_uniform_frequency():
    n, K, reps = 5, 2, 10_000
    rng = np.random.default_rng(42)
    counts = np.zeros((n, n))
    for _ in range(reps):
        p = resample_negatives(n, K, rng)
        for i in range(n):
            counts[i, p[i]] += 1
    freq = counts / reps
    sigma = math.sqrt(0.5 * 0.5 / reps)
    off = ~np.eye(n, dtype=bool)
    assert np.all(np.abs(freq[off] - 0.5) < 3 * sigma + 1e-12)
    assert np.all(freq[~off] == 0)


def test_negatives_pool_too_large():
    with pytest.raises(ConfigError):
        resample_negatives(3, 3, np.random.default_rng(0))


def _terms(h, cands, tau):
    """Evaluate one item's term with explicit candidate vectors (positive first)."""
    E = np.vstack(cands)
    negs = np.arange(1, len(cands))[None, :]
    H = np.zeros_like(E)
    H[0] = h
    return infonce_item_terms(H, E, np.vstack([negs] + [np.zeros_like(negs)] * (len(cands) - 1)), tau, items=[0])[0][0]


def test_infonce_two_way_uniform():
    assert _terms(np.array([1.0, 0.0]), [np.array([0.5, 0.0]), np.array([0.5, 0.0])], 0.1) == pytest.approx(math.log(2))


def test_infonce_saturation():
    assert _terms(np.array([1.0]), [np.array([10.0]), np.array([-10.0])], 0.1) < 1e-80


def test_infonce_hand_value():
    v = _terms(np.array([1.0]), [np.array([1.0]), np.array([0.5])], 1.0)
    assert v == pytest.approx(math.log1p(math.exp(-0.5)), abs=1e-15)
    assert v == pytest.approx(0.47407698418010663, abs=1e-15)


def test_infonce_all_equal_logits_is_log_k_plus_one():
    n, K = 9, 4
    E = np.ones((n, 3))
    H = np.random.default_rng(0).normal(size=(n, 3))
    negs = resample_negatives(n, K, np.random.default_rng(1))
    terms, _ = infonce_item_terms(H, E, negs, 0.1)
    np.testing.assert_allclose(terms, math.log(K + 1), atol=1e-12)


def test_infonce_shift_invariance_and_nonnegativity():
    rng = np.random.default_rng(2)
    E = rng.normal(size=(10, 3))
    H = rng.normal(size=(10, 3))
    negs = resample_negatives(10, 3, rng)
    base, _ = infonce_item_terms(H, E, negs, 0.5)
    assert np.all(base >= 0)
    # shifting every candidate of item 0 by c along h_0 adds c*|h_0|^2 to each of its logits
    c = 3.7
    shift = c * H[0] / (H[0] @ H[0])
    E2 = E.copy()
    cand = [0, *negs[0].tolist()]
    E2[cand] += shift
    shifted, _ = infonce_item_terms(H, E2, negs, 0.5, items=[0])
    assert shifted[0] == pytest.approx(base[0], abs=1e-10)


def test_infonce_large_logits_stable():
    E = np.array([[100.0], [0.0]])
    H = np.array([[100.0], [100.0]])
    terms, _ = infonce_item_terms(H, E, np.array([[1], [0]]), 0.1)
    assert np.all(np.isfinite(terms))
    assert terms[1] == pytest.approx(1e5, rel=1e-12)


def test_infonce_gradients_finite_differences():
    rng = np.random.default_rng(3)
    n, d, K = 4, 3, 2
    top = {m: rng.normal(size=(n, d)) for m in "vt"}
    red = {m: rng.normal(size=(n, d)) for m in "vt"}
    pool = NegativePool({m: resample_negatives(n, K, rng) for m in "vt"})
    a = {"v": 0.4, "t": 0.6}
    _, grads, d_a = infonce_gradients(top, red, pool, a, 0.7)
    for m in "vt":
        num = central_difference(lambda: infonce_loss(top, red, pool, a, 0.7), top[m], h=1e-5)
        assert max_relative_error(grads[m], num) < 1e-6
        bumped = dict(a)
        bumped[m] += 1e-6
        fd = (infonce_loss(top, red, pool, bumped, 0.7) - infonce_loss(top, red, pool, a, 0.7)) / 1e-6
        assert d_a[m] == pytest.approx(fd, rel=1e-6)


def test_infonce_saturated_gradient_vanishes():
    E = np.array([[50.0], [-50.0]])
    H = np.array([[1.0], [-1.0]])
    _, g = infonce_item_terms(H, E, np.array([[1], [0]]), 0.1, with_grad=True)
    np.testing.assert_allclose(g, 0.0, atol=1e-100)


def test_infonce_temperature_chain_rule():
    rng = np.random.default_rng(4)
    H = rng.normal(size=(6, 3))
    E = rng.normal(size=(6, 3))
    negs = resample_negatives(6, 2, rng)
    tau = 0.3
    # doubling the features doubles the logits; at temperature 2*tau the logits match the original
    _, g1 = infonce_item_terms(H, E, negs, tau, with_grad=True)
    _, g2 = infonce_item_terms(H, 2 * E, negs, 2 * tau, with_grad=True)
    np.testing.assert_allclose(g2, g1, atol=1e-12)
    _, g3 = infonce_item_terms(H, E, negs, 2 * tau, with_grad=True)
    f = lambda: infonce_item_terms(H, E, negs, 2 * tau)[0].sum()
    num = central_difference(f, H, h=1e-5)
    assert max_relative_error(g3, num) < 1e-6
    # doubling H at 2*tau keeps the logits, so the gradient w.r.t. H halves
    _, g4 = infonce_item_terms(2 * H, E, negs, 2 * tau, with_grad=True)
    np.testing.assert_allclose(g4, 0.5 * g1, atol=1e-12)


def test_infonce_rejects_bad_tau():
    with pytest.raises(ConfigError):
        infonce_item_terms(np.ones((2, 1)), np.ones((2, 1)), np.array([[1], [0]]), 0.0)
