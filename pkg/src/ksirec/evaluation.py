"""All-rank top-K evaluation: Recall@K, Precision@K and NDCG@K."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .data import TEST, TRAIN, VALID, InteractionTable

METRICS = ("recall", "precision", "ndcg")


def rank_items(scores: np.ndarray, mask: Iterable[int] = ()) -> np.ndarray:
    """All unmasked items by descending score, ties by ascending index."""
    scores = np.asarray(scores, dtype=np.float64)
    keep = np.ones(len(scores), dtype=bool)
    keep[np.asarray(list(mask), dtype=np.int64)] = False
    idx = np.flatnonzero(keep)
    order = np.argsort(-scores[idx], kind="stable")
    return idx[order]


def top_k(scores: np.ndarray, mask: np.ndarray, k: int) -> np.ndarray:
    """First ``k`` entries of :func:`rank_items` without sorting the whole row."""
    s = np.asarray(scores, dtype=np.float64).copy()
    s[mask] = -np.inf
    n_free = len(s) - len(np.unique(mask))
    k = min(k, n_free)
    if k <= 0:
        return np.zeros(0, dtype=np.int64)
    if k < len(s):
        cutoff = np.partition(s, len(s) - k)[len(s) - k]
        cand = np.flatnonzero(s >= cutoff)
    else:
        cand = np.arange(len(s))
    cand = cand[np.isfinite(s[cand])]
    order = np.argsort(-s[cand], kind="stable")[:k]
    return cand[order]


def recall_precision_at_k(ranked: Sequence[int], test_items: set[int] | Sequence[int], K: int) -> tuple[float, float]:
    test = set(int(t) for t in test_items)
    if not test:
        return 0.0, 0.0
    hits = sum(1 for item in list(ranked)[:K] if int(item) in test)
    return hits / len(test), hits / K


def _idcg(n: int) -> float:
    return sum(1.0 / math.log2(p + 1) for p in range(1, n + 1))


def ndcg_at_k(ranked: Sequence[int], test_items: set[int] | Sequence[int], K: int) -> float:
    test = set(int(t) for t in test_items)
    if not test:
        return 0.0
    dcg = sum(1.0 / math.log2(p + 1) for p, item in enumerate(list(ranked)[:K], start=1) if int(item) in test)
    return dcg / _idcg(min(K, len(test)))


@dataclass
class RankingResult:
    ks: tuple[int, ...]
    metrics: dict[str, float]
    n_users_evaluated: int
    n_users_skipped: int
    per_user: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    def __getitem__(self, key: str) -> float:
        return self.metrics[key]

    def table(self) -> str:
        header = f"{'K':>4}  " + "  ".join(f"{m:>10}" for m in METRICS)
        lines = [header]
        for k in self.ks:
            lines.append(f"{k:>4}  " + "  ".join(f"{self.metrics[f'{m}@{k}']:>10.6f}" for m in METRICS))
        lines.append(f"users evaluated: {self.n_users_evaluated}  skipped (no held-out items): {self.n_users_skipped}")
        return "\n".join(lines)

    def as_dict(self) -> dict[str, float | int]:
        out: dict[str, float | int] = dict(self.metrics)
        out["n_users_evaluated"] = self.n_users_evaluated
        out["n_users_skipped"] = self.n_users_skipped
        return out


def evaluate_scores(
    score_users: Callable[[np.ndarray], np.ndarray],
    table: InteractionTable,
    ks: Sequence[int] = (10, 20),
    target: int = TEST,
    chunk: int = 1024,
    keep_per_user: bool = False,
) -> RankingResult:
    """Rank every item for each user with held-out items in ``target``.

    Train items (plus Valid items when ``target`` is Test) are masked out.
    Users with no held-out items are skipped and counted separately.
    """
    ks = tuple(sorted(set(int(k) for k in ks)))
    if not ks or ks[0] < 1:
        raise ValueError(f"cut-offs must be positive, got {ks}")
    kmax = ks[-1]
    mask_splits = (TRAIN, VALID) if target == TEST else (TRAIN,)
    masks = table.user_items(mask_splits)
    targets = table.user_items(target)
    users = np.array([u for u in range(table.n_users) if len(targets[u])], dtype=np.int64)
    skipped = table.n_users - len(users)
    sums = {f"{m}@{k}": 0.0 for m in METRICS for k in ks}
    per_user = {key: np.zeros(len(users)) for key in sums} if keep_per_user else {}
    idcg = np.array([0.0] + [_idcg(n) for n in range(1, kmax + 1)])
    discount = 1.0 / np.log2(np.arange(2, kmax + 2))
    row = 0
    for lo in range(0, len(users), chunk):
        batch = users[lo : lo + chunk]
        scores = np.asarray(score_users(batch), dtype=np.float64)
        for b, u in enumerate(batch.tolist()):
            ranked = top_k(scores[b], masks[u], kmax)
            test = targets[u]
            hit = np.isin(ranked, test).astype(np.float64)
            hit = np.pad(hit, (0, kmax - len(hit)))
            cum_hits = np.cumsum(hit)
            cum_dcg = np.cumsum(hit * discount)
            for k in ks:
                r = cum_hits[k - 1] / len(test)
                p = cum_hits[k - 1] / k
                n = cum_dcg[k - 1] / idcg[min(k, len(test))]
                sums[f"recall@{k}"] += r
                sums[f"precision@{k}"] += p
                sums[f"ndcg@{k}"] += n
                if keep_per_user:
                    per_user[f"recall@{k}"][row] = r
                    per_user[f"precision@{k}"][row] = p
                    per_user[f"ndcg@{k}"][row] = n
            row += 1
    denom = max(len(users), 1)
    metrics = {key: val / denom for key, val in sums.items()}
    return RankingResult(ks, metrics, len(users), skipped, per_user)


def random_recall_expectation(table: InteractionTable, K: int, target: int = TEST) -> float:
    """Mean Recall@K a uniformly random ranking achieves in expectation under the same masking."""
    mask_splits = (TRAIN, VALID) if target == TEST else (TRAIN,)
    masks = table.user_items(mask_splits)
    targets = table.user_items(target)
    vals = []
    for u in range(table.n_users):
        if len(targets[u]):
            n_cand = table.n_items - len(masks[u])
            vals.append(min(K, n_cand) / n_cand)
    return float(np.mean(vals)) if vals else 0.0
