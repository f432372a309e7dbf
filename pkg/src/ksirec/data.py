"""Interaction tables, modality feature matrices and BPR triple sampling."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, DataError
from .tensorio import FormatError, load_tensor

logger = logging.getLogger(__name__)

TRAIN, VALID, TEST = 0, 1, 2
SPLIT_NAMES = ("train", "valid", "test")
_SPLIT_CODES = {name: code for code, name in enumerate(SPLIT_NAMES)}


def _sorted_labels(raw: Iterable[str]) -> list[str]:
    labels = set(raw)
    try:
        return sorted(labels, key=lambda s: (int(s), s))
    except ValueError:
        return sorted(labels)


@dataclass(frozen=True, eq=False)
class InteractionTable:
    """Implicit-feedback records with dense 0-based user/item indices.

    ``user_labels[u]`` / ``item_labels[i]`` hold the raw ids so results can be
    reported in the caller's vocabulary.
    """

    user_ids: np.ndarray
    item_ids: np.ndarray
    split: np.ndarray
    n_users: int
    n_items: int
    user_labels: tuple[str, ...] = ()
    item_labels: tuple[str, ...] = ()
    has_split: bool = True

    def __post_init__(self) -> None:
        for name in ("user_ids", "item_ids", "split"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.int64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (len(self.user_ids) == len(self.item_ids) == len(self.split)):
            raise DataError("user_ids, item_ids and split must be aligned")
        if len(self.user_ids):
            if self.user_ids.min() < 0 or self.user_ids.max() >= self.n_users:
                raise DataError("user index out of bounds")
            if self.item_ids.min() < 0 or self.item_ids.max() >= self.n_items:
                raise DataError("item index out of bounds")
            if self.split.min() < TRAIN or self.split.max() > TEST:
                raise DataError("unknown split code")
        if not self.user_labels:
            object.__setattr__(self, "user_labels", tuple(str(u) for u in range(self.n_users)))
        if not self.item_labels:
            object.__setattr__(self, "item_labels", tuple(str(i) for i in range(self.n_items)))

    def __len__(self) -> int:
        return len(self.user_ids)

    def encode_user(self, label: str) -> int:
        return self._user_index[label]

    def encode_item(self, label: str) -> int:
        return self._item_index[label]

    def decode_user(self, index: int) -> str:
        return self.user_labels[index]

    def decode_item(self, index: int) -> str:
        return self.item_labels[index]

    @cached_property
    def _user_index(self) -> dict[str, int]:
        return {label: i for i, label in enumerate(self.user_labels)}

    @cached_property
    def _item_index(self) -> dict[str, int]:
        return {label: i for i, label in enumerate(self.item_labels)}

    def records(self, split: int) -> tuple[np.ndarray, np.ndarray]:
        mask = self.split == split
        return self.user_ids[mask], self.item_ids[mask]

    def user_items(self, split: int | Sequence[int]) -> list[np.ndarray]:
        """Sorted item indices per user for one split or a union of splits."""
        splits = (split,) if isinstance(split, int) else tuple(split)
        mask = np.isin(self.split, splits)
        users, items = self.user_ids[mask], self.item_ids[mask]
        order = np.lexsort((items, users))
        users, items = users[order], items[order]
        bounds = np.searchsorted(users, np.arange(self.n_users + 1))
        return [np.unique(items[bounds[u] : bounds[u + 1]]) for u in range(self.n_users)]

    @cached_property
    def train_keys(self) -> np.ndarray:
        """Sorted ``user * n_items + item`` keys of Train records for O(log n) membership."""
        users, items = self.records(TRAIN)
        keys = np.unique(users * self.n_items + items)
        keys.setflags(write=False)
        return keys

    def is_train(self, users: np.ndarray, items: np.ndarray) -> np.ndarray:
        keys = np.asarray(users, dtype=np.int64) * self.n_items + np.asarray(items, dtype=np.int64)
        pos = np.searchsorted(self.train_keys, keys)
        pos = np.minimum(pos, max(len(self.train_keys) - 1, 0))
        if len(self.train_keys) == 0:
            return np.zeros(keys.shape, dtype=bool)
        return self.train_keys[pos] == keys

    def with_split(self, split: np.ndarray) -> "InteractionTable":
        return InteractionTable(
            self.user_ids, self.item_ids, split, self.n_users, self.n_items,
            self.user_labels, self.item_labels, has_split=True,
        )


def validate_table(table: InteractionTable) -> InteractionTable:
    """Check uniqueness and split disjointness; drop users that have no Train records."""
    keys = (table.user_ids * table.n_items + table.item_ids) * 3 + table.split
    uniq, counts = np.unique(keys, return_counts=True)
    dup = int((counts > 1).sum())
    if dup:
        raise DataError(f"{dup} duplicate (user, item, split) record(s)")
    pair = table.user_ids * table.n_items + table.item_ids
    train_pairs = set(pair[table.split == TRAIN].tolist())
    held_out = pair[table.split != TRAIN]
    overlap = sum(1 for p in held_out.tolist() if p in train_pairs)
    if overlap:
        raise DataError(f"{overlap} valid/test record(s) repeat an item already in the user's Train set")

    if not table.has_split:
        return table
    has_train = np.zeros(table.n_users, dtype=bool)
    has_train[table.user_ids[table.split == TRAIN]] = True
    present = np.zeros(table.n_users, dtype=bool)
    present[table.user_ids] = True
    dropped = np.flatnonzero(present & ~has_train)
    if len(dropped) == 0:
        return table
    logger.warning("dropping %d user(s) with no Train records", len(dropped))
    keep = has_train[table.user_ids]
    kept_users = np.flatnonzero(has_train | ~present)
    remap = np.full(table.n_users, -1, dtype=np.int64)
    remap[kept_users] = np.arange(len(kept_users))
    return InteractionTable(
        remap[table.user_ids[keep]], table.item_ids[keep], table.split[keep],
        len(kept_users), table.n_items,
        tuple(table.user_labels[u] for u in kept_users), table.item_labels, has_split=True,
    )


def load_interactions(
    path: str | Path,
    delimiter: str = "\t",
    user_labels: Sequence[str] | None = None,
    item_labels: Sequence[str] | None = None,
) -> InteractionTable:
    """Read ``user<TAB>item[<TAB>split]`` lines and re-index ids densely.

    Ids are ordered numerically when every id parses as an integer (so the
    usual 0..N-1 item ids keep their feature-row alignment), otherwise
    lexicographically. Passing ``user_labels``/``item_labels`` pins an existing
    vocabulary, e.g. the one stored alongside a checkpoint.
    """
    path = Path(path)
    raw_users: list[str] = []
    raw_items: list[str] = []
    splits: list[int] = []
    n_with_split = 0
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split(delimiter)
            if len(fields) not in (2, 3) or not fields[0] or not fields[1]:
                raise DataError(f"{path}:{lineno}: expected 'user{delimiter!r}item[{delimiter!r}split]', got {line!r}")
            raw_users.append(fields[0])
            raw_items.append(fields[1])
            if len(fields) == 3:
                code = _SPLIT_CODES.get(fields[2].strip().lower())
                if code is None:
                    raise DataError(f"{path}:{lineno}: unknown split label {fields[2]!r}")
                splits.append(code)
                n_with_split += 1
            else:
                splits.append(TRAIN)
    if n_with_split not in (0, len(splits)):
        raise DataError(f"{path}: split column present on only {n_with_split} of {len(splits)} lines")

    users = tuple(user_labels) if user_labels is not None else tuple(_sorted_labels(raw_users))
    items = tuple(item_labels) if item_labels is not None else tuple(_sorted_labels(raw_items))
    uidx = {label: i for i, label in enumerate(users)}
    iidx = {label: i for i, label in enumerate(items)}
    try:
        user_ids = np.fromiter((uidx[u] for u in raw_users), dtype=np.int64, count=len(raw_users))
        item_ids = np.fromiter((iidx[i] for i in raw_items), dtype=np.int64, count=len(raw_items))
    except KeyError as exc:
        raise DataError(f"{path}: id {exc.args[0]!r} not in the pinned vocabulary") from None

    table = InteractionTable(
        user_ids, item_ids, np.asarray(splits, dtype=np.int64), len(users), len(items),
        users, items, has_split=n_with_split > 0,
    )
    return validate_table(table)


def save_interactions(table: InteractionTable, path: str | Path) -> None:
    lines = [
        f"{table.user_labels[u]}\t{table.item_labels[i]}\t{SPLIT_NAMES[s]}\n"
        for u, i, s in zip(table.user_ids.tolist(), table.item_ids.tolist(), table.split.tolist())
    ]
    Path(path).write_text("".join(lines), encoding="utf-8")


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split_dataset(
    table: InteractionTable,
    ratios: Sequence[float] = (0.8, 0.1, 0.1),
    seed: int = 0,
) -> InteractionTable:
    """Per-user random train/valid/test partition.

    Valid and test each get ``round(n * ratio)`` items (at least one when the
    ratio is positive); the rest go to Train. Users with too few interactions
    for every non-empty part keep all records in Train.
    """
    from .seeding import derive_rng

    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(not 0.0 <= r <= 1.0 for r in ratios):
        raise ConfigError(f"split ratios must be three values in [0, 1], got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must sum to 1, got {sum(ratios)!r}")
    if ratios[0] == 0.0:
        raise ConfigError("train ratio must be positive")

    rng = derive_rng(seed, "data-split")
    order = np.lexsort((table.item_ids, table.user_ids))
    users = table.user_ids[order]
    bounds = np.searchsorted(users, np.arange(table.n_users + 1))
    new_split = np.full(len(table), TRAIN, dtype=np.int64)
    need = 1 + (ratios[1] > 0) + (ratios[2] > 0)
    n_short = 0
    for u in range(table.n_users):
        lo, hi = bounds[u], bounds[u + 1]
        n = hi - lo
        if n == 0:
            continue
        if n < need:
            n_short += 1
            continue
        n_valid = max(1, _round_half_up(n * ratios[1])) if ratios[1] > 0 else 0
        n_test = max(1, _round_half_up(n * ratios[2])) if ratios[2] > 0 else 0
        while n - n_valid - n_test < 1:
            if n_valid >= n_test and n_valid > 1:
                n_valid -= 1
            else:
                n_test -= 1
        perm = rng.permutation(n)
        labels = np.full(n, TRAIN, dtype=np.int64)
        labels[perm[:n_test]] = TEST
        labels[perm[n_test : n_test + n_valid]] = VALID
        new_split[order[lo:hi]] = labels
    if n_short:
        logger.warning("%d user(s) have fewer than %d interactions; all their records stay in Train", n_short, need)
    return validate_table(table.with_split(new_split))


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    modality: str
    values: np.ndarray

    def __post_init__(self) -> None:
        values = np.asarray(self.values)
        if values.ndim != 2:
            raise DataError(f"feature matrix must be 2-D, got shape {values.shape}")
        bad = ~np.isfinite(values)
        if bad.any():
            r, c = np.argwhere(bad)[0]
            raise DataError(f"modality {self.modality!r}: non-finite value at row {r}, col {c}")
        if not np.any(np.linalg.norm(values.astype(np.float64), axis=1) > 0):
            raise DataError(f"modality {self.modality!r}: every feature row is zero")
        values = np.ascontiguousarray(values, dtype=np.float32)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def rows(self) -> int:
        return self.values.shape[0]

    @property
    def cols(self) -> int:
        return self.values.shape[1]


def load_features(path: str | Path, modality: str = "v", n_items: int | None = None) -> FeatureMatrix:
    try:
        values = load_tensor(path)
    except FormatError as exc:
        raise DataError(str(exc)) from None
    if n_items is not None and values.shape[0] != n_items:
        raise DataError(f"{path}: {values.shape[0]} feature rows but the interaction table has {n_items} items")
    return FeatureMatrix(modality, values)


@dataclass(frozen=True)
class BprBatch:
    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray

    def __len__(self) -> int:
        return len(self.users)


_MAX_RETRIES = 100


def sample_bpr_batch(table: InteractionTable, batch_size: int, rng: np.random.Generator) -> BprBatch:
    """Draw (user, positive, negative) triples uniformly from Train records.

    Negatives are drawn uniformly from all items and redrawn while they hit the
    user's Train set; after 100 retries the remaining rows fall back to an exact
    draw from the user's complement.
    """
    train_users, train_items = table.records(TRAIN)
    if len(train_users) == 0:
        raise ConfigError("no Train records to sample from")
    counts = np.bincount(train_users, minlength=table.n_users)
    if np.any(counts >= table.n_items):
        full = int(np.flatnonzero(counts >= table.n_items)[0])
        raise ConfigError(f"user {table.user_labels[full]!r} has every item in Train; no negative exists")

    idx = rng.integers(len(train_users), size=batch_size)
    users = train_users[idx]
    pos = train_items[idx]
    neg = rng.integers(table.n_items, size=batch_size)
    bad = np.flatnonzero(table.is_train(users, neg))
    for _ in range(_MAX_RETRIES):
        if len(bad) == 0:
            break
        neg[bad] = rng.integers(table.n_items, size=len(bad))
        bad = bad[table.is_train(users[bad], neg[bad])]
    for row in bad.tolist():
        u = users[row]
        lo, hi = np.searchsorted(table.train_keys, [u * table.n_items, (u + 1) * table.n_items])
        taken = table.train_keys[lo:hi] - u * table.n_items
        free = np.setdiff1d(np.arange(table.n_items), taken, assume_unique=True)
        neg[row] = free[rng.integers(len(free))]
    return BprBatch(users, pos, neg)
