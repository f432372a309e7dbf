"""Objective assembly, Adam, the epoch loop and checkpoint persistence."""

from __future__ import annotations

import json
import logging
import math
import shutil
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .config import TrainConfig
from .data import TRAIN, VALID, BprBatch, InteractionTable, sample_bpr_batch
from .errors import ConfigError, DataError, TrainingDiverged
from .evaluation import RankingResult, evaluate_scores
from .graph import SparseGraph
from .model import KSIModel, Parameters
from .rgnn import LayerStack, item_rr_aggregate_with_grad, rr_loss_and_grad
from .seeding import derive_rng
from .ssi import NegativePool, ReducedFeatures, infonce_gradients, pool_size, resample_negatives
from .tensorio import atomic_write_bytes, load_tensor, save_tensor

logger = logging.getLogger(__name__)


def xavier_init(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    if rows < 1 or cols < 1:
        raise ValueError(f"shape must be positive, got {shape}")
    bound = math.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=shape)


def init_parameters(n_users: int, n_items: int, d: int, modalities: tuple[str, ...], seed: int) -> Parameters:
    rng = derive_rng(seed, "init")
    X_U = xavier_init((n_users, d), rng)
    X_I = xavier_init((n_items, d), rng)
    # equal modality weights at start
    return Parameters(X_U, X_I, np.zeros(len(modalities)), modalities)


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    t: int,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    if t < 1:
        raise ValueError(f"step index must be >= 1, got {t}")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for parameter {name!r} at step {t}")
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(params[name])
            state.v[name] = np.zeros_like(params[name])
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    state.t = t
    return params, state


@dataclass
class LossComponents:
    bpr: float
    ssi: float
    rr_user: float
    rr_item: float
    total: float


def total_loss(
    bpr: float, ssi: float, rr_user: float, rr_item: float, alpha: float, beta: float,
    use_ssi: bool = True, use_sei: bool = True,
) -> float:
    total = bpr
    if use_ssi:
        total += alpha * ssi
    if use_sei:
        total += beta * (rr_user + rr_item)
    return total


def _subset_stack(stack: LayerStack, rows: np.ndarray) -> LayerStack:
    return LayerStack({m: [H[rows] for H in hs] for m, hs in stack.layers.items()})


def objective(
    model: KSIModel,
    params: Parameters,
    batch: BprBatch,
    reduced: Mapping[str, ReducedFeatures | np.ndarray] | None,
    pool: NegativePool | None,
    cfg: TrainConfig,
    item_rows: np.ndarray | None = None,
    user_rows: np.ndarray | None = None,
) -> tuple[LossComponents, Parameters]:
    """Full objective on one BPR batch and its gradient w.r.t. every parameter.

    The InfoNCE and redundancy terms cover all items and users unless
    ``item_rows`` / ``user_rows`` restrict them to a sample.
    """
    state = model.forward(params)
    bpr, g_U_hat, g_I_tilde = model.bpr_backward(state, batch, cfg.bpr_reduction)
    mods = params.modalities
    weights = dict(zip(mods, state.a))
    layer_grads = {m: [None] * (model.L + 1) for m in mods} if model.uses_modalities else None
    g_a = np.zeros(len(mods))
    g_X_U = None
    ssi = rr_user = rr_item = 0.0

    if cfg.use_ssi:
        ssi, g_top, d_a = infonce_gradients(state.stack.top(), reduced, pool, weights, cfg.tau, items=item_rows)
        for k, m in enumerate(mods):
            layer_grads[m][model.L] = cfg.alpha * g_top[m]
            g_a[k] += cfg.alpha * d_a[m]

    if cfg.use_sei:
        if item_rows is None:
            rr_item, g_layers, d_a = item_rr_aggregate_with_grad(state.stack, weights)
        else:
            rr_item, g_sub, d_a = item_rr_aggregate_with_grad(_subset_stack(state.stack, item_rows), weights)
            g_layers = {m: [None] * (model.L + 1) for m in mods}
            for m, gl in g_sub.items():
                for l, g in enumerate(gl):
                    if g is not None:
                        full = np.zeros_like(params.X_I)
                        full[item_rows] = g
                        g_layers[m][l] = full
        for k, m in enumerate(mods):
            for l, g in enumerate(g_layers[m]):
                if g is None:
                    continue
                cur = layer_grads[m][l]
                layer_grads[m][l] = cfg.beta * g if cur is None else cur + cfg.beta * g
            g_a[k] += cfg.beta * d_a[m]
        if user_rows is None:
            rr_user, g_X_U = rr_loss_and_grad(params.X_U)
            g_X_U = cfg.beta * g_X_U
        else:
            rr_user, g_sub_u = rr_loss_and_grad(params.X_U[user_rows])
            g_X_U = np.zeros_like(params.X_U)
            g_X_U[user_rows] = cfg.beta * g_sub_u

    grads = model.backward(state, g_U_hat, g_I_tilde, layer_grads, g_a, g_X_U)
    total = total_loss(bpr, ssi, rr_user, rr_item, cfg.alpha, cfg.beta, cfg.use_ssi, cfg.use_sei)
    return LossComponents(bpr, ssi, rr_user, rr_item, total), grads


@dataclass
class EpochReport:
    epoch: int
    bpr: float
    ssi: float
    rr_user: float
    rr_item: float
    total: float
    wall_time: float = 0.0
    valid: dict[str, float] | None = None

    def to_json(self) -> str:
        """One JSON line; wall time is kept out so the line is reproducible."""
        payload = {
            "epoch": self.epoch,
            "bpr": self.bpr,
            "ssi": self.ssi,
            "rr_user": self.rr_user,
            "rr_item": self.rr_item,
            "total": self.total,
        }
        if self.valid is not None:
            payload["valid"] = self.valid
        return json.dumps(payload, sort_keys=True)


CHECKPOINT_FILES = ("X_U.kst", "X_I.kst", "w.kst")


def save_checkpoint(
    path: str | Path,
    params: Parameters,
    cfg: TrainConfig,
    epoch: int,
    table: InteractionTable,
    history: list[dict] | None = None,
    graph_files: Mapping[str, str] | None = None,
) -> Path:
    """Write a checkpoint directory atomically (staged, then renamed into place)."""
    path = Path(path)
    stage = path.with_name(path.name + ".tmp")
    if stage.exists():
        shutil.rmtree(stage)
    stage.mkdir(parents=True)
    save_tensor(stage / "X_U.kst", params.X_U)
    save_tensor(stage / "X_I.kst", params.X_I)
    save_tensor(stage / "w.kst", params.w)
    (stage / "users.txt").write_text("\n".join(table.user_labels) + "\n", encoding="utf-8")
    (stage / "items.txt").write_text("\n".join(table.item_labels) + "\n", encoding="utf-8")
    manifest = {
        "config_hash": cfg.hash(),
        "config": cfg.model_dict(),
        "epoch": epoch,
        "seed": cfg.seed,
        "modalities": list(params.modalities),
        "n_users": table.n_users,
        "n_items": table.n_items,
        "d": int(params.X_U.shape[1]),
        "graphs": dict(graph_files or {}),
        "metric_history": history or [],
    }
    atomic_write_bytes(stage / "manifest.json", (json.dumps(manifest, indent=2, sort_keys=True) + "\n").encode())
    if path.exists():
        shutil.rmtree(path)
    stage.rename(path)
    return path


def load_checkpoint(path: str | Path) -> tuple[Parameters, dict]:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    mods = tuple(manifest["modalities"])
    params = Parameters(
        load_tensor(path / "X_U.kst"),
        load_tensor(path / "X_I.kst"),
        load_tensor(path / "w.kst").ravel(),
        mods,
    )
    return params, manifest


@dataclass
class TrainResult:
    params: Parameters
    best_params: Parameters
    best_epoch: int
    reports: list[EpochReport]
    model: KSIModel
    checkpoint: Path | None = None
    best_checkpoint: Path | None = None


def _check_inputs(
    cfg: TrainConfig,
    table: InteractionTable,
    graphs: Mapping[str, SparseGraph],
    reduced: Mapping[str, ReducedFeatures | np.ndarray] | None,
) -> None:
    if not graphs:
        raise ConfigError("at least one modality graph is required")
    for m, g in graphs.items():
        if g.n != table.n_items:
            raise DataError(f"graph {m!r} has {g.n} nodes but the table has {table.n_items} items")
    if cfg.use_ssi:
        if reduced is None or set(reduced) != set(graphs):
            raise ConfigError("SSI needs reduced features for exactly the graph modalities")
        for m, r in reduced.items():
            mat = r.matrix if isinstance(r, ReducedFeatures) else np.asarray(r)
            if mat.shape != (table.n_items, cfg.d):
                raise DataError(f"reduced features {m!r} have shape {mat.shape}, expected ({table.n_items}, {cfg.d})")
    if not np.any(table.split == TRAIN):
        raise ConfigError("no Train records; split the dataset before training")


def train_run(
    cfg: TrainConfig,
    table: InteractionTable,
    graphs: Mapping[str, SparseGraph],
    reduced: Mapping[str, ReducedFeatures | np.ndarray] | None = None,
    out_dir: str | Path | None = None,
    graph_files: Mapping[str, str] | None = None,
) -> TrainResult:
    """Train for ``cfg.epochs`` epochs; optionally persist checkpoints and ``report.jsonl``.

    Each epoch redraws the negative pools, then runs ``ceil(|Train| / batch)``
    Adam steps. When Valid records exist, Recall@20 (``cfg.select_metric``)
    on Valid picks the best checkpoint.
    """
    cfg.validate()
    _check_inputs(cfg, table, graphs, reduced)
    mods = tuple(graphs)
    model = KSIModel(graphs, cfg.backbone, cfg.backbone_layers, cfg.L, cfg.use_sei, cfg.use_ssi, table)
    params = init_parameters(table.n_users, table.n_items, cfg.d, mods, cfg.seed)
    best = params.copy()
    best_epoch = 0
    best_score = -math.inf
    adam = AdamState()
    arrays = params.arrays()
    bpr_rng = derive_rng(cfg.seed, "bpr-sampler")
    sample_rng = derive_rng(cfg.seed, "term-sample")
    K = cfg.K_override or pool_size(table.n_items)
    n_train = int(np.sum(table.split == TRAIN))
    steps = math.ceil(n_train / cfg.batch_size)
    has_valid = bool(np.any(table.split == VALID))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.jsonl").write_text("")
        (out / "timing.jsonl").write_text("")
    reports: list[EpochReport] = []
    history: list[dict] = []
    t = 0

    for epoch in range(1, cfg.epochs + 1):
        start = time.perf_counter()
        pool = None
        if cfg.use_ssi:
            pool = NegativePool(
                {m: resample_negatives(table.n_items, K, derive_rng(cfg.seed, "ssi-pool", epoch, j))
                 for j, m in enumerate(mods)}
            )
        sums = np.zeros(5)
        for _ in range(steps):
            batch = sample_bpr_batch(table, cfg.batch_size, bpr_rng)
            item_rows = user_rows = None
            if cfg.term_sample and cfg.term_sample < table.n_items:
                item_rows = np.sort(sample_rng.choice(table.n_items, cfg.term_sample, replace=False))
            if cfg.term_sample and cfg.term_sample < table.n_users:
                user_rows = np.sort(sample_rng.choice(table.n_users, cfg.term_sample, replace=False))
            comps, grads = objective(model, params, batch, reduced, pool, cfg, item_rows, user_rows)
            if not math.isfinite(comps.total):
                if out is not None:
                    save_checkpoint(out / "last_good", params, cfg, epoch - 1, table, history, graph_files)
                raise TrainingDiverged(f"non-finite objective at epoch {epoch}, step {t + 1}")
            t += 1
            try:
                adam_step(arrays, grads.arrays(), adam, t, cfg.lr)
            except TrainingDiverged:
                if out is not None:
                    save_checkpoint(out / "last_good", params, cfg, epoch - 1, table, history, graph_files)
                raise
            sums += (comps.bpr, comps.ssi, comps.rr_user, comps.rr_item, comps.total)
        means = sums / steps
        report = EpochReport(epoch, *means.tolist(), wall_time=time.perf_counter() - start)
        if has_valid:
            result = evaluate_model(model, params, table, cfg.eval_ks, target=VALID)
            report.valid = result.metrics
            score = result.metrics.get(cfg.select_metric)
            if score is None:
                raise ConfigError(f"select_metric {cfg.select_metric!r} not among evaluated metrics")
            if score > best_score:
                best_score, best_epoch, best = score, epoch, params.copy()
        else:
            best, best_epoch = params.copy(), epoch
        reports.append(report)
        history.append(json.loads(report.to_json()))
        logger.info(
            "epoch %d: bpr=%.5f ssi=%.5f rr_u=%.5f rr_i=%.5f total=%.5f%s", epoch, *means.tolist(),
            "" if report.valid is None else f" valid {cfg.select_metric}={report.valid[cfg.select_metric]:.5f}",
        )
        if out is not None:
            with (out / "report.jsonl").open("a") as fh:
                fh.write(report.to_json() + "\n")
            with (out / "timing.jsonl").open("a") as fh:
                fh.write(json.dumps({"epoch": epoch, "wall_time": report.wall_time}) + "\n")

    result = TrainResult(params, best, best_epoch, reports, model)
    if out is not None:
        result.checkpoint = save_checkpoint(out / "final", params, cfg, cfg.epochs, table, history, graph_files)
        result.best_checkpoint = save_checkpoint(out / "best", best, cfg, best_epoch, table, history, graph_files)
    return result


def evaluate_model(
    model: KSIModel,
    params: Parameters,
    table: InteractionTable,
    ks=(10, 20),
    target: int = 2,
    keep_per_user: bool = False,
) -> RankingResult:
    state = model.forward(params)
    return evaluate_scores(lambda users: model.score_users(state, users), table, ks, target, keep_per_user=keep_per_user)


def evaluate(checkpoint: str | Path, table: InteractionTable, ks=(10, 20), target: int = 2) -> RankingResult:
    """Score all items for every held-out user with a saved checkpoint."""
    checkpoint = Path(checkpoint)
    params, manifest = load_checkpoint(checkpoint)
    if manifest["n_items"] != table.n_items or params.X_I.shape[0] != table.n_items:
        raise DataError(f"checkpoint has {manifest['n_items']} items but the data has {table.n_items}")
    if manifest["n_users"] != table.n_users:
        raise DataError(f"checkpoint has {manifest['n_users']} users but the data has {table.n_users}")
    conf = manifest["config"]
    if params.X_U.shape[1] != conf["d"]:
        raise DataError(f"checkpoint embedding dim {params.X_U.shape[1]} differs from its config d={conf['d']}")
    graphs = {}
    for m in params.modalities:
        rel = manifest["graphs"].get(m)
        if rel is None:
            raise DataError(f"checkpoint manifest does not locate the graph for modality {m!r}")
        gpath = (checkpoint / rel).resolve() if not Path(rel).is_absolute() else Path(rel)
        graphs[m] = SparseGraph.load(gpath, m)
    model = KSIModel(graphs, conf["backbone"], conf["backbone_layers"], conf["L"], conf["use_sei"], conf["use_ssi"], table)
    return evaluate_model(model, params, table, ks, target)
