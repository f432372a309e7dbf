"""``ksirec`` command line: preprocess, build-graph, train, evaluate, report.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import dump_config, load_config
from .data import SPLIT_NAMES, TEST, VALID, load_features, load_interactions, save_interactions, split_dataset
from .errors import ConfigError, DataError, TrainingDiverged
from .graph import SparseGraph, build_modality_graph
from .ssi import ReducedFeatures, pca_reduce
from .tensorio import FormatError, atomic_write_bytes
from .train import evaluate, evaluate_model, train_run

logger = logging.getLogger("ksirec")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3


def git_blob_hash(path: str | Path) -> str:
    """Content hash as ``git hash-object`` computes it."""
    data = Path(path).read_bytes()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _utc_now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _require_file(path: str | Path, what: str) -> Path:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def _parse_ks(text: str) -> tuple[int, ...]:
    try:
        ks = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise argparse.ArgumentTypeError(f"cut-offs must be positive integers, got {text!r}")
    return ks


def _write_key_values(path: Path, values: dict) -> None:
    text = "".join(f"{k}={v}\n" for k, v in values.items())
    atomic_write_bytes(path, text.encode())


def cmd_preprocess(args: argparse.Namespace) -> int:
    path = _require_file(args.features, "feature file")
    features = load_features(path, args.modality or path.stem)
    reduced = pca_reduce(features, args.dim)
    out = Path(args.out) if args.out else path.with_name(f"{path.stem}_reduced.kst")
    out.parent.mkdir(parents=True, exist_ok=True)
    reduced.save(out)
    ratios = reduced.explained_variance_ratio
    print(f"{features.modality}: {features.rows} x {features.cols} -> {reduced.matrix.shape[1]} columns")
    print(f"explained variance ratio: {float(ratios.sum()):.6f} (first {min(5, len(ratios))}: "
          + ", ".join(f"{r:.4f}" for r in ratios[:5]) + ")")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_build_graph(args: argparse.Namespace) -> int:
    path = _require_file(args.features, "feature file")
    features = load_features(path, args.modality or path.stem)
    graph = build_modality_graph(
        features, args.k, exclude_self_loop=args.exclude_self_loop, block_size=args.block_size, threads=args.threads
    )
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    graph.save(out)
    nnz = graph.row_nnz()
    print(f"{graph.n} nodes, {graph.nnz} edges, max row nnz {int(nnz.max()) if graph.n else 0}")
    print(f"wrote {out}")
    return EXIT_OK


def _prepare_inputs(cfg, run: Path):
    """Load data, split if needed, and materialise graphs and reduced features inside ``run``."""
    if not cfg.interactions:
        raise ConfigError("config must set 'interactions'")
    table = load_interactions(_require_file(cfg.interactions, "interaction file"))
    if not table.has_split:
        table = split_dataset(table, cfg.split_ratios, seed=cfg.seed)
    mods = list(cfg.features) or list(cfg.graphs)
    if not mods:
        raise ConfigError("config must set 'features' or 'graphs'")
    inputs = {"interactions": cfg.interactions}
    feats = {}
    for m in mods:
        if m in cfg.features:
            inputs[f"features.{m}"] = cfg.features[m]
            feats[m] = load_features(_require_file(cfg.features[m], "feature file"), m, table.n_items)

    (run / "graphs").mkdir(parents=True, exist_ok=True)
    graphs, graph_files = {}, {}
    for m in mods:
        if m in cfg.graphs:
            inputs[f"graphs.{m}"] = cfg.graphs[m]
            graphs[m] = SparseGraph.load(_require_file(cfg.graphs[m], "graph file"), m)
        elif m in feats:
            graphs[m] = build_modality_graph(feats[m], cfg.k, cfg.exclude_self_loop, cfg.graph_block, cfg.threads, m)
        else:
            raise ConfigError(f"modality {m!r} has neither a graph nor a feature file")
        graphs[m].save(run / "graphs" / f"{m}.ksg")
        graph_files[m] = f"../graphs/{m}.ksg"

    reduced = None
    if cfg.use_ssi:
        (run / "reduced").mkdir(parents=True, exist_ok=True)
        reduced = {}
        for m in mods:
            if m in cfg.reduced:
                inputs[f"reduced.{m}"] = cfg.reduced[m]
                reduced[m] = ReducedFeatures.load(_require_file(cfg.reduced[m], "reduced feature file"), m)
            elif m in feats:
                reduced[m] = pca_reduce(feats[m], cfg.d)
            else:
                raise ConfigError(f"SSI needs features or reduced features for modality {m!r}")
            reduced[m].save(run / "reduced" / f"{m}.kst")
    return table, graphs, reduced, graph_files, inputs


def cmd_train(args: argparse.Namespace) -> int:
    config_path = _require_file(args.config, "config file")
    cfg = load_config(config_path, args.set or [])
    out = args.out or cfg.out_dir
    if not out:
        raise ConfigError("no run directory: pass --out or set 'out_dir' in the config")
    run = Path(out)
    run.mkdir(parents=True, exist_ok=True)
    started = _utc_now()
    table, graphs, reduced, graph_files, inputs = _prepare_inputs(cfg, run)
    save_interactions(table, run / "split.tsv")
    (run / "config.cfg").write_text(dump_config(cfg), encoding="utf-8")
    manifest = {
        "tool": "ksirec",
        "version": __version__,
        "seed": cfg.seed,
        "config_hash": cfg.hash(),
        "config": cfg.to_dict(),
        "inputs": {key: {"path": p, "git_blob": git_blob_hash(p)} for key, p in inputs.items()},
        "started": started,
    }
    atomic_write_bytes(run / "manifest.json", json.dumps(manifest, indent=2).encode())

    result = train_run(cfg, table, graphs, reduced, run, graph_files)
    manifest.update(best_epoch=result.best_epoch, epochs_run=len(result.reports), finished=_utc_now())
    if any(table.split == TEST):
        metrics = evaluate_model(result.model, result.best_params, table, cfg.eval_ks, TEST)
        _write_key_values(run / "test_metrics.txt", metrics.as_dict())
        manifest["test_metrics"] = metrics.as_dict()
        print(f"test metrics (best epoch {result.best_epoch}):")
        print(metrics.table())
    atomic_write_bytes(run / "manifest.json", json.dumps(manifest, indent=2).encode())
    print(f"run written to {run}")
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    ckpt = Path(args.checkpoint)
    _require_file(ckpt / "manifest.json", "checkpoint manifest")
    users = (ckpt / "users.txt").read_text(encoding="utf-8").splitlines()
    items = (ckpt / "items.txt").read_text(encoding="utf-8").splitlines()
    table = load_interactions(_require_file(args.data, "interaction file"), user_labels=users, item_labels=items)
    if not table.has_split:
        raise DataError(f"{args.data}: evaluation needs a split column (train/valid/test)")
    target = VALID if args.target == "valid" else TEST
    result = evaluate(ckpt, table, args.k, target)
    print(f"{SPLIT_NAMES[target]} metrics for {ckpt}")
    print(result.table())
    out = Path(args.out) if args.out else ckpt / f"metrics_{SPLIT_NAMES[target]}.txt"
    _write_key_values(out, result.as_dict())
    print(f"wrote {out}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    from .plotting import render_report

    run = Path(args.run)
    report = _require_file(run / "report.jsonl" if run.is_dir() else run, "report")
    out = Path(args.out) if args.out else report.parent / "figures"
    try:
        written = render_report(report, out)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    for kind, path in written.items():
        print(f"{kind}\t{path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ksirec", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="PCA-reduce a feature matrix")
    p.add_argument("--features", required=True)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--modality", help="tag stored in the sidecar (default: file stem)")
    p.add_argument("--out")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("build-graph", help="build a normalized k-NN item graph")
    p.add_argument("--features", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--exclude-self-loop", action="store_true")
    p.add_argument("--block-size", type=int, default=1024)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--modality")
    p.set_defaults(func=cmd_build_graph)

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("--out", help="run directory (overrides out_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="all-rank evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="interaction file with a split column, e.g. <run>/split.tsv")
    p.add_argument("--k", type=_parse_ks, default=(10, 20))
    p.add_argument("--target", choices=("test", "valid"), default="test")
    p.add_argument("--out", help="key=value metrics file (default: inside the checkpoint)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", help="render loss and metric figures from report.jsonl")
    p.add_argument("--run", required=True, help="run directory or report.jsonl path")
    p.add_argument("--out", help="figure directory (default: <run>/figures)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DataError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, OSError, RuntimeError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
