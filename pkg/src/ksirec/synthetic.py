"""Clustered synthetic benchmark: latent groups drive both interactions and modality features."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TRAIN, FeatureMatrix, InteractionTable, split_dataset


@dataclass
class SyntheticDataset:
    table: InteractionTable
    features: dict[str, FeatureMatrix]
    item_group: np.ndarray
    user_group: np.ndarray


def make_grouped_dataset(
    n_users: int = 200,
    n_items: int = 100,
    n_groups: int = 4,
    per_user: int = 12,
    dims: dict[str, int] | None = None,
    noise: float = 0.3,
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> SyntheticDataset:
    """Users interact only with items of their own group; features are group centroid + Gaussian noise."""
    dims = dims or {"v": 32, "t": 16}
    rng = np.random.default_rng(seed)
    item_group = np.arange(n_items) % n_groups
    user_group = np.arange(n_users) % n_groups
    users, items = [], []
    for u in range(n_users):
        pool = np.flatnonzero(item_group == user_group[u])
        chosen = np.sort(rng.choice(pool, size=min(per_user, len(pool)), replace=False))
        users.extend([u] * len(chosen))
        items.extend(chosen.tolist())
    table = InteractionTable(
        np.asarray(users), np.asarray(items), np.full(len(users), TRAIN), n_users, n_items, has_split=False
    )
    table = split_dataset(table, ratios, seed=seed)
    features = {}
    for m, dm in dims.items():
        centroids = rng.normal(size=(n_groups, dm))
        values = centroids[item_group] + noise * rng.normal(size=(n_items, dm))
        features[m] = FeatureMatrix(m, values.astype(np.float32))
    return SyntheticDataset(table, features, item_group, user_group)
