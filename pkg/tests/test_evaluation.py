import math

import numpy as np
import pytest

from ksirec.data import TEST, TRAIN, VALID, InteractionTable
from ksirec.evaluation import evaluate_scores, ndcg_at_k, random_recall_expectation, rank_items, recall_precision_at_k, top_k

from oracles import brute_metrics


def test_rank_items_examples():
    assert rank_items([0.1, 0.9, 0.5]).tolist() == [1, 2, 0]
    assert rank_items([0.1, 0.9, 0.5], {1}).tolist() == [2, 0]
    assert rank_items([0.3] * 4).tolist() == [0, 1, 2, 3]


def test_top_k_matches_rank_items():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 30))
        s = rng.integers(0, 4, size=n).astype(float)
        mask = np.unique(rng.integers(0, n, size=int(rng.integers(0, n))))
        k = int(rng.integers(1, 35))
        assert top_k(s, mask, k).tolist() == rank_items(s, mask)[:k].tolist()


def test_recall_precision_examples():
    ranked = list(range(20))
    assert recall_precision_at_k(ranked, {3, 17}, 20) == (1.0, 0.1)
    assert recall_precision_at_k(ranked, {30}, 20) == (0.0, 0.0)
    assert recall_precision_at_k(ranked, {5, 40}, 20)[1] == pytest.approx(0.05)


def test_ndcg_examples():
    assert ndcg_at_k([7, 1, 2], {7}, 10) == 1.0
    assert ndcg_at_k([1, 2, 7], {7}, 10) == pytest.approx(0.5)
    assert ndcg_at_k([4, 5, 6], {4, 5}, 10) == 1.0


def _table(rng, n_users, n_items, with_valid=True):
    users, items, split = [], [], []
    for u in range(n_users):
        chosen = rng.choice(n_items, size=int(rng.integers(2, min(n_items, 12) + 1)), replace=False)
        labels = [TRAIN] + [int(rng.choice([TRAIN, VALID, TEST] if with_valid else [TRAIN, TEST])) for _ in chosen[1:]]
        users += [u] * len(chosen)
        items += chosen.tolist()
        split += labels
    return InteractionTable(np.array(users), np.array(items), np.array(split), n_users, n_items)


def test_single_user_single_test_item():
    t = InteractionTable(np.array([0, 0]), np.array([0, 1]), np.array([TRAIN, TEST]), 1, 5)
    r = evaluate_scores(lambda us: np.array([[9.0, 8.0, 1.0, 0.0, -1.0]]), t, (10,))
    assert (r["recall@10"], r["precision@10"], r["ndcg@10"]) == (1.0, 0.1, 1.0)


def test_metrics_match_brute_force():
    rng = np.random.default_rng(1)
    for trial in range(100):
        n_items = int(rng.integers(5, 51))
        t = _table(rng, int(rng.integers(1, 8)), n_items)
        scores = rng.integers(0, 5, size=(t.n_users, n_items)).astype(float)
        ks = (1, 5, 10)
        r = evaluate_scores(lambda us: scores[us], t, ks, keep_per_user=True)
        masks = t.user_items((TRAIN, VALID))
        tests = t.user_items(TEST)
        users = [u for u in range(t.n_users) if len(tests[u])]
        for k in ks:
            ref = np.array([brute_metrics(scores[u], set(masks[u].tolist()), set(tests[u].tolist()), k) for u in users])
            if not users:
                continue
            for j, m in enumerate(("recall", "precision", "ndcg")):
                np.testing.assert_allclose(r.per_user[f"{m}@{k}"], ref[:, j], atol=1e-12, rtol=0)
                assert r[f"{m}@{k}"] == pytest.approx(ref[:, j].mean(), abs=1e-12)


def test_skipped_users_counted():
    t = InteractionTable(np.array([0, 1, 1]), np.array([0, 0, 1]), np.array([TRAIN, TRAIN, TEST]), 2, 3)
    r = evaluate_scores(lambda us: np.zeros((len(us), 3)), t, (1,))
    assert r.n_users_evaluated == 1 and r.n_users_skipped == 1


def test_scaling_scores_leaves_metrics_unchanged():
    rng = np.random.default_rng(2)
    t = _table(rng, 10, 40)
    s = rng.normal(size=(10, 40))
    a = evaluate_scores(lambda us: s[us], t, (5, 10))
    b = evaluate_scores(lambda us: 3.5 * s[us], t, (5, 10))
    assert a.metrics == b.metrics


def test_monotone_in_k_and_bounds():
    rng = np.random.default_rng(3)
    t = _table(rng, 15, 30)
    s = rng.normal(size=(15, 30))
    r = evaluate_scores(lambda us: s[us], t, (1, 3, 5, 10, 20), keep_per_user=True)
    ks = (1, 3, 5, 10, 20)
    for m in ("recall", "ndcg"):
        per = np.stack([r.per_user[f"{m}@{k}"] for k in ks])
        assert np.all(np.diff(per, axis=0) >= -1e-15)
    assert all(0.0 <= v <= 1.0 for v in r.metrics.values())


def test_random_recall_expectation_without_mask():
    t = InteractionTable(np.zeros(1, int), np.array([0]), np.array([TEST]), 1, 50)
    # the single user has no Train record; expectation is K / N_I for an unmasked ranking
    assert random_recall_expectation(t, 20) == pytest.approx(20 / 50)


def test_table_rendering():
    t = InteractionTable(np.array([0, 0]), np.array([0, 1]), np.array([TRAIN, TEST]), 1, 3)
    r = evaluate_scores(lambda us: np.array([[0.0, 1.0, 0.5]]), t, (1, 2))
    text = r.table()
    assert "recall" in text and "users evaluated: 1" in text
    assert math.isclose(r.as_dict()["recall@1"], 1.0)
