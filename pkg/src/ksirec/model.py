"""Trainable parameters, CF backbones, modality fusion, item enhancement and BPR scoring."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .data import TRAIN, BprBatch, InteractionTable
from .errors import ConfigError
from .graph import SparseGraph
from .rgnn import LayerStack, propagate, propagate_backward, scale_by_max_row_norm, scale_by_max_row_norm_backward

BACKBONES = ("mf", "lightgcn")


@dataclass
class Parameters:
    X_U: np.ndarray
    X_I: np.ndarray
    w: np.ndarray
    modalities: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.modalities:
            self.modalities = tuple(f"m{j}" for j in range(len(self.w)))
        if len(self.modalities) != len(self.w):
            raise ValueError("one weight logit per modality is required")

    @property
    def a(self) -> np.ndarray:
        return softmax(self.w)

    def weights(self) -> dict[str, float]:
        return dict(zip(self.modalities, self.a.tolist()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {"X_U": self.X_U, "X_I": self.X_I, "w": self.w}

    def copy(self) -> "Parameters":
        return Parameters(self.X_U.copy(), self.X_I.copy(), self.w.copy(), self.modalities)


def softmax(w: np.ndarray) -> np.ndarray:
    z = np.exp(w - np.max(w))
    return z / z.sum()


def softmax_backward(a: np.ndarray, grad_a: np.ndarray) -> np.ndarray:
    return a * (grad_a - np.dot(a, grad_a))


@dataclass
class BackboneOutput:
    X_U_hat: np.ndarray
    X_I_hat: np.ndarray


def backbone_mf(params: Parameters) -> BackboneOutput:
    return BackboneOutput(params.X_U, params.X_I)


def bipartite_adjacency(table: InteractionTable) -> sp.csr_matrix:
    """Symmetric-normalized user-item graph over Train records; users come first."""
    users, items = table.records(TRAIN)
    if len(users) == 0:
        raise ConfigError("LightGCN backbone needs at least one Train interaction")
    nu, ni = table.n_users, table.n_items
    rows = np.concatenate([users, nu + items])
    cols = np.concatenate([nu + items, users])
    A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(nu + ni, nu + ni))
    A.sum_duplicates()
    A.sort_indices()
    deg = np.asarray(A.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    inv[deg > 0] = 1.0 / np.sqrt(deg[deg > 0])
    D = sp.diags(inv)
    out = (D @ A @ D).tocsr()
    out.sort_indices()
    return out


def lightgcn_propagate(adj: sp.csr_matrix, E0: np.ndarray, layers: int) -> np.ndarray:
    acc = E0.copy()
    cur = E0
    for _ in range(layers):
        cur = np.asarray(adj @ cur)
        acc += cur
    return acc / (layers + 1)


def backbone_lightgcn(
    params: Parameters, interactions: InteractionTable | sp.csr_matrix, layers: int = 2
) -> BackboneOutput:
    adj = interactions if sp.issparse(interactions) else bipartite_adjacency(interactions)
    nu = params.X_U.shape[0]
    out = lightgcn_propagate(adj, np.vstack([params.X_U, params.X_I]), layers)
    return BackboneOutput(out[:nu], out[nu:])


def fuse(stack_top: Mapping[str, np.ndarray], a: Mapping[str, float]) -> np.ndarray:
    h = None
    for m, H in stack_top.items():
        h = a[m] * H if h is None else h + a[m] * H
    return h


def enhance(X_I_hat: np.ndarray, h: np.ndarray | None) -> tuple[np.ndarray, float, int]:
    """``x̂_i + h_i / max_j ||h_j||``; a zero ``h`` (or ``None``) leaves items unchanged."""
    if h is None:
        return X_I_hat, 0.0, 0
    h_scaled, s, r = scale_by_max_row_norm(h)
    if s == 0.0:
        return X_I_hat, s, r
    return X_I_hat + h_scaled, s, r


def enhance_and_score(backbone: BackboneOutput, h: np.ndarray | None, u: int, items) -> np.ndarray:
    X_tilde, _, _ = enhance(backbone.X_I_hat, h)
    return X_tilde[np.asarray(items, dtype=np.int64)] @ backbone.X_U_hat[u]


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def bpr_loss(scores_pos: np.ndarray, scores_neg: np.ndarray, reduction: str = "sum") -> float:
    margin = np.asarray(scores_pos, dtype=np.float64) - np.asarray(scores_neg, dtype=np.float64)
    if margin.size == 0:
        return 0.0
    total = float(np.sum(_softplus(-margin)))
    return total / margin.size if reduction == "mean" else total


def bpr_margin_grad(margin: np.ndarray, reduction: str = "sum") -> np.ndarray:
    """d/d margin of softplus(-margin), i.e. ``-sigmoid(-margin)``."""
    g = -0.5 * (1.0 - np.tanh(0.5 * margin))
    return g / margin.size if reduction == "mean" else g


@dataclass
class ForwardState:
    params: Parameters
    a: np.ndarray
    backbone: BackboneOutput
    stack: LayerStack | None
    h: np.ndarray | None
    X_I_tilde: np.ndarray
    h_scale: float
    h_argmax: int
    extras: dict = field(default_factory=dict)


class KSIModel:
    """Forward and backward passes of backbone + modality enhancement.

    ``use_sei`` controls propagation depth (``L`` hops, or 0 when off);
    ``use_ssi`` only matters to the caller's loss. When both are off the
    modality path is dropped entirely and scoring is the plain backbone.
    """

    def __init__(
        self,
        graphs: Mapping[str, SparseGraph],
        backbone: str = "lightgcn",
        backbone_layers: int = 2,
        L: int = 1,
        use_sei: bool = True,
        use_ssi: bool = True,
        table: InteractionTable | None = None,
    ) -> None:
        if backbone not in BACKBONES:
            raise ConfigError(f"unknown backbone {backbone!r}; expected one of {BACKBONES}")
        self.graphs = dict(graphs)
        self.backbone = backbone
        self.backbone_layers = backbone_layers
        self.L = L if use_sei else 0
        self.use_sei = use_sei
        self.use_ssi = use_ssi
        self.adj = None
        if backbone == "lightgcn":
            if table is None:
                raise ConfigError("LightGCN backbone needs the interaction table")
            self.adj = bipartite_adjacency(table)

    @property
    def uses_modalities(self) -> bool:
        return self.use_sei or self.use_ssi

    def run_backbone(self, params: Parameters) -> BackboneOutput:
        if self.backbone == "mf":
            return backbone_mf(params)
        return backbone_lightgcn(params, self.adj, self.backbone_layers)

    def forward(self, params: Parameters) -> ForwardState:
        a = params.a
        bb = self.run_backbone(params)
        stack = h = None
        if self.uses_modalities:
            stack = propagate(self.graphs, params.X_I, self.L)
            h = fuse(stack.top(), dict(zip(params.modalities, a)))
        X_tilde, s, r = enhance(bb.X_I_hat, h)
        return ForwardState(params, a, bb, stack, h, X_tilde, s, r)

    def score_users(self, state: ForwardState, users: np.ndarray) -> np.ndarray:
        return state.backbone.X_U_hat[users] @ state.X_I_tilde.T

    def bpr_backward(
        self, state: ForwardState, batch: BprBatch, reduction: str = "sum"
    ) -> tuple[float, np.ndarray, np.ndarray]:
        """BPR value and its gradients w.r.t. the backbone user output and the enhanced items."""
        U = state.backbone.X_U_hat
        Xt = state.X_I_tilde
        u, i, j = batch.users, batch.pos_items, batch.neg_items
        diff = Xt[i] - Xt[j]
        margin = np.einsum("bd,bd->b", U[u], diff)
        loss = bpr_loss(margin, np.zeros_like(margin), reduction)
        gm = bpr_margin_grad(margin, reduction)
        g_U = np.zeros_like(U)
        np.add.at(g_U, u, gm[:, None] * diff)
        g_I = np.zeros_like(Xt)
        contrib = gm[:, None] * U[u]
        np.add.at(g_I, i, contrib)
        np.add.at(g_I, j, -contrib)
        return loss, g_U, g_I

    def backward(
        self,
        state: ForwardState,
        g_U_hat: np.ndarray,
        g_I_tilde: np.ndarray,
        layer_grads: dict[str, list[np.ndarray | None]] | None = None,
        g_a: np.ndarray | None = None,
        g_X_U: np.ndarray | None = None,
    ) -> Parameters:
        """Chain upstream gradients back to (X_U, X_I, w).

        ``layer_grads[m][l]`` are extra gradients on stacked layer ``l`` of
        modality ``m`` (RR and InfoNCE terms), ``g_a`` extra gradients on the
        softmax weights and ``g_X_U`` a direct gradient on the raw user table.
        """
        params = state.params
        mods = params.modalities
        g_a = np.zeros(len(mods)) if g_a is None else np.asarray(g_a, dtype=np.float64).copy()
        grads_layers = {m: [None] * (self.L + 1) for m in self.graphs} if self.uses_modalities else {}
        if layer_grads:
            for m, gl in layer_grads.items():
                for l, g in enumerate(gl):
                    if g is not None:
                        cur = grads_layers[m][l]
                        grads_layers[m][l] = g if cur is None else cur + g

        if state.h is not None and state.h_scale > 0.0:
            g_h = scale_by_max_row_norm_backward(state.h, g_I_tilde, state.h_scale, state.h_argmax)
            top = state.stack.top()
            for k, m in enumerate(mods):
                g_a[k] += float(np.vdot(g_h, top[m]))
                cur = grads_layers[m][self.L]
                add = state.a[k] * g_h
                grads_layers[m][self.L] = add if cur is None else cur + add

        nu = params.X_U.shape[0]
        if self.backbone == "mf":
            gX_U, gX_I = g_U_hat.copy(), g_I_tilde.copy()
        else:
            g0 = lightgcn_propagate(self.adj, np.vstack([g_U_hat, g_I_tilde]), self.backbone_layers)
            gX_U, gX_I = g0[:nu], g0[nu:]

        if grads_layers:
            g_prop = propagate_backward(self.graphs, grads_layers)
            if g_prop is not None:
                gX_I = gX_I + g_prop
        if g_X_U is not None:
            gX_U = gX_U + g_X_U
        return Parameters(gX_U, gX_I, softmax_backward(state.a, g_a), mods)


def model_gradients(
    model: KSIModel, state: ForwardState, batch: BprBatch, reduction: str = "sum"
) -> tuple[float, Parameters]:
    """BPR loss and its exact gradients w.r.t. the parameters."""
    loss, g_U, g_I = model.bpr_backward(state, batch, reduction)
    return loss, model.backward(state, g_U, g_I)
