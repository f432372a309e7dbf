"""Parameter-free propagation over modality graphs and the redundancy-reduction penalty.

The penalty scales a representation matrix by its largest row norm, takes the
d x d sample covariance of the scaled columns and measures its squared
Frobenius distance to the identity.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .graph import SparseGraph, spmm


@dataclass
class LayerStack:
    """``layers[m][l]`` is the item representation of modality ``m`` after ``l`` hops."""

    layers: dict[str, list[np.ndarray]]

    @property
    def n_layers(self) -> int:
        return len(next(iter(self.layers.values()))) - 1

    def top(self) -> dict[str, np.ndarray]:
        return {m: hs[-1] for m, hs in self.layers.items()}


def propagate(graphs: Mapping[str, SparseGraph], X_I: np.ndarray, L: int) -> LayerStack:
    if L < 0:
        raise ValueError(f"layer count must be >= 0, got {L}")
    X_I = np.asarray(X_I, dtype=np.float64)
    layers = {}
    for m, g in graphs.items():
        if g.n != X_I.shape[0]:
            raise ValueError(f"graph {m!r} has {g.n} nodes but X_I has {X_I.shape[0]} rows")
        hs = [X_I]
        for _ in range(L):
            hs.append(spmm(g, hs[-1]))
        layers[m] = hs
    return LayerStack(layers)


def propagate_backward(
    graphs: Mapping[str, SparseGraph], layer_grads: Mapping[str, list[np.ndarray | None]]
) -> np.ndarray:
    """Gradient w.r.t. X_I given upstream gradients on each stacked layer (``None`` = zero)."""
    total = None
    for m, grads in layer_grads.items():
        g = None
        for l in range(len(grads) - 1, -1, -1):
            if g is not None and l < len(grads) - 1:
                g = spmm(graphs[m], g, transpose=True)
            if grads[l] is not None:
                g = grads[l] if g is None else g + grads[l]
        if g is not None:
            total = g if total is None else total + g
    return total


def max_row_norm(H: np.ndarray) -> tuple[float, int]:
    """Largest Euclidean row norm and its row (smallest index on ties)."""
    norms = np.sqrt(np.einsum("ij,ij->i", H, H))
    r = int(np.argmax(norms))
    return float(norms[r]), r


def scale_by_max_row_norm(H: np.ndarray) -> tuple[np.ndarray, float, int]:
    s, r = max_row_norm(H)
    if s == 0.0:
        return H, s, r
    return H / s, s, r


def scale_by_max_row_norm_backward(H: np.ndarray, grad_out: np.ndarray, s: float, r: int) -> np.ndarray:
    """Backward of ``H / max_i ||H_i||``; only the argmax row sees the scale path."""
    if s == 0.0:
        return grad_out
    g = grad_out / s
    g[r] -= (np.vdot(grad_out, H) / s**3) * H[r]
    return g


def _centered_cov(H: np.ndarray) -> tuple[np.ndarray, np.ndarray, float, int]:
    n = H.shape[0]
    if n < 2:
        raise ValueError(f"redundancy reduction needs at least 2 rows, got {n}")
    Hs, s, r = scale_by_max_row_norm(np.asarray(H, dtype=np.float64))
    Hc = Hs - Hs.mean(axis=0)
    C = (Hc.T @ Hc) / (n - 1)
    return Hc, C, s, r


def _penalty(C: np.ndarray) -> float:
    D = C - np.eye(C.shape[0])
    return float(np.sum(D * D))


def rr_loss(H: np.ndarray) -> float:
    _, C, _, _ = _centered_cov(H)
    return _penalty(C)


def rr_loss_and_grad(H: np.ndarray) -> tuple[float, np.ndarray]:
    H = np.asarray(H, dtype=np.float64)
    Hc, C, s, r = _centered_cov(H)
    D = C - np.eye(C.shape[0])
    # columns of Hc sum to zero, so the centering backward is the identity
    g_scaled = (4.0 / (H.shape[0] - 1)) * (Hc @ D)
    return float(np.sum(D * D)), scale_by_max_row_norm_backward(H, g_scaled, s, r)


def rr_gradient(H: np.ndarray) -> np.ndarray:
    return rr_loss_and_grad(H)[1]


def user_rr(X_U: np.ndarray) -> float:
    return rr_loss(X_U)


def item_rr_aggregate(stack: LayerStack, a: Mapping[str, float] | np.ndarray) -> float:
    return item_rr_aggregate_with_grad(stack, a, with_grad=False)[0]


def _weights(stack: LayerStack, a: Mapping[str, float] | np.ndarray) -> dict[str, float]:
    if isinstance(a, Mapping):
        return {m: float(a[m]) for m in stack.layers}
    return {m: float(w) for m, w in zip(stack.layers, np.asarray(a))}


def item_rr_aggregate_with_grad(
    stack: LayerStack,
    a: Mapping[str, float] | np.ndarray,
    with_grad: bool = True,
) -> tuple[float, dict[str, list[np.ndarray | None]] | None, dict[str, float]]:
    """Mean over layers of the modality-weighted penalties.

    Layer 0 is the shared ID embedding, so its penalty is evaluated once and
    counted with total weight 1. Returns the value, per-layer gradients
    (layer-0 gradient stored under the first modality only) and d/da.
    """
    weights = _weights(stack, a)
    L = stack.n_layers
    inv = 1.0 / (L + 1)
    modalities = list(stack.layers)
    X_I = stack.layers[modalities[0]][0]
    if with_grad:
        base, g_base = rr_loss_and_grad(X_I)
    else:
        base, g_base = rr_loss(X_I), None
    value = base
    grads: dict[str, list[np.ndarray | None]] = {m: [None] * (L + 1) for m in modalities}
    grads[modalities[0]][0] = g_base * inv if with_grad else None
    d_a = {}
    for m in modalities:
        per_mod = base
        for l in range(1, L + 1):
            if with_grad:
                v, g = rr_loss_and_grad(stack.layers[m][l])
                grads[m][l] = (weights[m] * inv) * g
            else:
                v = rr_loss(stack.layers[m][l])
            value += weights[m] * v
            per_mod += v
        d_a[m] = per_mod * inv
    return value * inv, (grads if with_grad else None), d_a
