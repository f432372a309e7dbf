import numpy as np
import pytest

from ksirec.data import TRAIN, InteractionTable, sample_bpr_batch
from ksirec.graph import build_modality_graph
from ksirec.ssi import NegativePool, pca_reduce, resample_negatives
from ksirec.synthetic import make_grouped_dataset


def make_table(pairs, n_users=None, n_items=None, split=None):
    users = np.array([p[0] for p in pairs])
    items = np.array([p[1] for p in pairs])
    split = np.full(len(pairs), TRAIN) if split is None else np.asarray(split)
    return InteractionTable(
        users, items, split,
        n_users if n_users is not None else int(users.max()) + 1,
        n_items if n_items is not None else int(items.max()) + 1,
    )


def central_difference(f, arr, h=1e-4):
    num = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        fp = f()
        arr[idx] = old - h
        fm = f()
        arr[idx] = old
        num[idx] = (fp - fm) / (2 * h)
    return num


def max_relative_error(analytic, numeric, floor=1e-8):
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))


@pytest.fixture
def micro():
    """5 users, 8 items, d=4, modalities v (6-d) and t (5-d), k=3, K=2."""
    ds = make_grouped_dataset(
        n_users=5, n_items=8, n_groups=2, per_user=3, dims={"v": 6, "t": 5}, ratios=(1.0, 0.0, 0.0), seed=1
    )
    graphs = {m: build_modality_graph(f, 3) for m, f in ds.features.items()}
    reduced = {m: pca_reduce(f, 4) for m, f in ds.features.items()}
    rng = np.random.default_rng(0)
    pool = NegativePool({m: resample_negatives(8, 2, rng) for m in graphs})
    batch = sample_bpr_batch(ds.table, 16, rng)
    return ds, graphs, reduced, pool, batch
