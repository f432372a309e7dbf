"""PCA-aligned modality features, per-epoch negative pools and the InfoNCE retrieval loss."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .data import FeatureMatrix
from .errors import ConfigError
from .tensorio import atomic_write_bytes, load_tensor, save_tensor

logger = logging.getLogger(__name__)

EIGEN_TOL = 1e-10
_CHUNK = 2048


@dataclass(frozen=True, eq=False)
class ReducedFeatures:
    modality: str
    matrix: np.ndarray
    basis: np.ndarray
    mean: np.ndarray
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def save(self, path: str | Path) -> None:
        """Write the projected matrix plus ``.basis``, ``.mean`` and ``.pca.json`` sidecars."""
        path = Path(path)
        save_tensor(path, self.matrix)
        save_tensor(path.with_name(path.name + ".basis"), self.basis)
        save_tensor(path.with_name(path.name + ".mean"), self.mean.reshape(1, -1))
        sidecar = {
            "modality": self.modality,
            "dim": self.dim,
            "input_dim": int(self.basis.shape[0]),
            "basis": path.name + ".basis",
            "mean": path.name + ".mean",
            "explained_variance": self.explained_variance.tolist(),
            "explained_variance_ratio": self.explained_variance_ratio.tolist(),
        }
        atomic_write_bytes(path.with_name(path.name + ".pca.json"), json.dumps(sidecar, indent=2).encode())

    @classmethod
    def load(cls, path: str | Path, modality: str | None = None) -> "ReducedFeatures":
        path = Path(path)
        matrix = load_tensor(path).astype(np.float64)
        side_path = path.with_name(path.name + ".pca.json")
        if not side_path.exists():
            d = matrix.shape[1]
            return cls(modality or "", matrix, np.zeros((0, d)), np.zeros(0), np.zeros(d), np.zeros(d))
        side = json.loads(side_path.read_text())
        return cls(
            modality or side.get("modality", ""),
            matrix,
            load_tensor(path.with_name(side["basis"])).astype(np.float64),
            load_tensor(path.with_name(side["mean"])).astype(np.float64).ravel(),
            np.asarray(side["explained_variance"], dtype=np.float64),
            np.asarray(side["explained_variance_ratio"], dtype=np.float64),
        )


def pca_reduce(E: FeatureMatrix | np.ndarray, d: int) -> ReducedFeatures:
    """Project centered features onto their top-``d`` principal axes.

    Each basis column is sign-fixed so its largest-magnitude entry is positive.
    Components beyond the numerical rank are returned as zero columns.
    """
    if isinstance(E, FeatureMatrix):
        values, modality = E.values, E.modality
    else:
        values, modality = np.asarray(E), ""
    X = np.asarray(values, dtype=np.float64)
    n, dm = X.shape
    if d < 1:
        raise ConfigError(f"target dim must be >= 1, got {d}")
    if d > dm:
        raise ConfigError(f"target dim exceeds feature dim ({d} > {dm})")
    if d > n:
        raise ConfigError(f"target dim exceeds item count ({d} > {n})")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, svals, vt = np.linalg.svd(Xc, full_matrices=False)
    eig = svals**2 / max(n - 1, 1)
    total = float(eig.sum())
    basis = vt[:d].T.copy()
    variance = eig[:d].copy()
    cutoff = EIGEN_TOL * (eig[0] if len(eig) else 0.0)
    degenerate = (variance <= cutoff) | (variance == 0.0)
    if degenerate.any():
        logger.warning(
            "modality %r: only %d of %d requested components are above the rank tolerance; the rest are zero",
            modality, int((~degenerate).sum()), d,
        )
        basis[:, degenerate] = 0.0
        variance[degenerate] = 0.0
    for j in np.flatnonzero(~degenerate):
        col = basis[:, j]
        if col[np.argmax(np.abs(col))] < 0:
            basis[:, j] = -col
    ratio = variance / total if total > 0 else np.zeros_like(variance)
    return ReducedFeatures(modality, Xc @ basis, basis, mean, variance, ratio)


def pool_size(n_items: int) -> int:
    return max(1, n_items // 512)


@dataclass(frozen=True, eq=False)
class NegativePool:
    """``indices[m][i]`` holds the K negatives of item ``i`` for modality ``m``."""

    indices: dict[str, np.ndarray]

    @property
    def K(self) -> int:
        return next(iter(self.indices.values())).shape[1]


def resample_negatives(n_items: int, K: int, epoch_rng: np.random.Generator) -> np.ndarray:
    """K distinct negatives per item, uniform over all other items.

    Vectorised Floyd sampling over ``{0..n-2}``, then values at or above the
    item's own index are shifted up by one to skip it.
    """
    if K < 1:
        raise ConfigError(f"negative pool size must be >= 1, got {K}")
    if K >= n_items:
        raise ConfigError(f"negative pool size {K} must be smaller than the item count {n_items}")
    m = n_items - 1
    chosen = np.empty((n_items, K), dtype=np.int64)
    for c, j in enumerate(range(m - K, m)):
        t = epoch_rng.integers(0, j + 1, size=n_items)
        if c:
            clash = (chosen[:, :c] == t[:, None]).any(axis=1)
            t = np.where(clash, j, t)
        chosen[:, c] = t
    own = np.arange(n_items)[:, None]
    return chosen + (chosen >= own)


def infonce_item_terms(
    H: np.ndarray, E: np.ndarray, negatives: np.ndarray, tau: float, items: np.ndarray | None = None,
    with_grad: bool = False,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Per-item ``-log softmax`` of the positive among {self} + negatives.

    Returns the terms for ``items`` (all items by default) and, if requested,
    the gradient of their sum w.r.t. the full ``H``.
    """
    if tau <= 0:
        raise ConfigError(f"temperature must be positive, got {tau}")
    H = np.asarray(H, dtype=np.float64)
    E = np.asarray(E, dtype=np.float64)
    if H.shape != E.shape:
        raise ValueError(f"shape mismatch between representations {H.shape} and reduced features {E.shape}")
    items = np.arange(H.shape[0]) if items is None else np.asarray(items, dtype=np.int64)
    terms = np.empty(len(items))
    grad = np.zeros_like(H) if with_grad else None
    for lo in range(0, len(items), _CHUNK):
        idx = items[lo : lo + _CHUNK]
        cand = np.concatenate([idx[:, None], negatives[idx]], axis=1)
        C = E[cand]
        h = H[idx]
        logits = np.einsum("ikd,id->ik", C, h) / tau
        shift = logits.max(axis=1, keepdims=True)
        z = np.exp(logits - shift)
        denom = z.sum(axis=1)
        terms[lo : lo + len(idx)] = np.log(denom) + shift[:, 0] - logits[:, 0]
        if with_grad:
            p = z / denom[:, None]
            g = (np.einsum("ik,ikd->id", p, C) - C[:, 0]) / tau
            np.add.at(grad, idx, g)
    return terms, grad


def _as_matrix(features: ReducedFeatures | np.ndarray) -> np.ndarray:
    return features.matrix if isinstance(features, ReducedFeatures) else np.asarray(features)


def infonce_gradients(
    stack_top: Mapping[str, np.ndarray],
    reduced: Mapping[str, ReducedFeatures | np.ndarray],
    pool: NegativePool,
    a: Mapping[str, float],
    tau: float,
    items: np.ndarray | None = None,
    with_grad: bool = True,
) -> tuple[float, dict[str, np.ndarray] | None, dict[str, float]]:
    """Modality-weighted InfoNCE sum with gradients w.r.t. each top layer and the weights."""
    total = 0.0
    grads: dict[str, np.ndarray] = {}
    d_a: dict[str, float] = {}
    for m, H in stack_top.items():
        terms, g = infonce_item_terms(H, _as_matrix(reduced[m]), pool.indices[m], tau, items, with_grad)
        s = float(terms.sum())
        total += a[m] * s
        d_a[m] = s
        if with_grad:
            grads[m] = a[m] * g
    return total, (grads if with_grad else None), d_a


def infonce_loss(
    stack_top: Mapping[str, np.ndarray],
    reduced: Mapping[str, ReducedFeatures | np.ndarray],
    pool: NegativePool,
    a: Mapping[str, float],
    tau: float,
    items: np.ndarray | None = None,
) -> float:
    return infonce_gradients(stack_top, reduced, pool, a, tau, items, with_grad=False)[0]
