"""Run configuration: dataclass, shipped hyperparameter profiles and the ``key = value`` file grammar."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Iterable

from .errors import ConfigError


@dataclass
class TrainConfig:
    d: int = 64
    k: int = 10
    L: int = 1
    backbone: str = "lightgcn"
    backbone_layers: int = 2
    tau: float = 0.1
    alpha: float = 0.05
    beta: float = 1.0
    lr: float = 5e-4
    batch_size: int = 1024
    epochs: int = 50
    seed: int = 0
    use_sei: bool = True
    use_ssi: bool = True
    K_override: int | None = None
    bpr_reduction: str = "sum"
    exclude_self_loop: bool = False
    term_sample: int = 0
    eval_ks: tuple[int, ...] = (10, 20)
    select_metric: str = "recall@20"
    split_ratios: tuple[float, ...] = (0.8, 0.1, 0.1)
    graph_block: int = 1024
    threads: int = field(default_factory=lambda: os.cpu_count() or 1)
    profile: str = "sports"
    interactions: str | None = None
    features: dict[str, str] = field(default_factory=dict)
    graphs: dict[str, str] = field(default_factory=dict)
    reduced: dict[str, str] = field(default_factory=dict)
    out_dir: str | None = None

    def validate(self) -> "TrainConfig":
        checks = [
            (self.tau > 0, f"tau must be > 0, got {self.tau}"),
            (self.alpha >= 0, f"alpha must be >= 0, got {self.alpha}"),
            (self.beta >= 0, f"beta must be >= 0, got {self.beta}"),
            (self.lr > 0, f"lr must be > 0, got {self.lr}"),
            (self.d >= 1, f"d must be >= 1, got {self.d}"),
            (self.k >= 1, f"k must be >= 1, got {self.k}"),
            (self.L >= 0, f"L must be >= 0, got {self.L}"),
            (self.backbone in ("mf", "lightgcn"), f"backbone must be 'mf' or 'lightgcn', got {self.backbone!r}"),
            (self.backbone_layers >= 0, f"backbone_layers must be >= 0, got {self.backbone_layers}"),
            (self.batch_size >= 1, f"batch_size must be >= 1, got {self.batch_size}"),
            (self.epochs >= 0, f"epochs must be >= 0, got {self.epochs}"),
            (self.bpr_reduction in ("sum", "mean"), f"bpr_reduction must be 'sum' or 'mean', got {self.bpr_reduction!r}"),
            (self.term_sample >= 0, f"term_sample must be >= 0, got {self.term_sample}"),
            (self.K_override is None or self.K_override >= 1, f"K_override must be >= 1, got {self.K_override}"),
            (len(self.eval_ks) > 0 and min(self.eval_ks) >= 1, f"eval_ks must be positive, got {self.eval_ks}"),
            (self.threads >= 1, f"threads must be >= 1, got {self.threads}"),
            (self.graph_block >= 1, f"graph_block must be >= 1, got {self.graph_block}"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def model_dict(self) -> dict[str, Any]:
        """Fields that determine the optimisation result (paths and thread count excluded)."""
        skip = {"interactions", "features", "graphs", "reduced", "out_dir", "threads"}
        return {k: v for k, v in self.to_dict().items() if k not in skip}

    def hash(self) -> str:
        blob = json.dumps(self.model_dict(), sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PROFILES: dict[str, dict[str, Any]] = {
    "sports": {"alpha": 0.05, "beta": 1.0},
    "baby": {"alpha": 0.05, "beta": 1.0},
    "clothing": {"alpha": 0.1, "beta": 1.0},
    "sports-rq4": {"alpha": 0.05, "beta": 0.5},
}

_FIELDS = {f.name: f for f in fields(TrainConfig)}
_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


def _parse_value(key: str, raw: str) -> Any:
    raw = raw.strip()
    kind = _FIELDS[key].type
    try:
        if kind == "bool":
            low = raw.lower()
            if low in _BOOL_TRUE:
                return True
            if low in _BOOL_FALSE:
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "int | None":
            return None if raw.lower() in ("", "none") else int(raw)
        if kind == "tuple[int, ...]":
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if kind == "tuple[float, ...]":
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if kind == "dict[str, str]":
            out = {}
            for part in raw.split(","):
                part = part.strip()
                if not part:
                    continue
                tag, sep, path = part.partition(":")
                if not sep or not tag.strip() or not path.strip():
                    raise ValueError(part)
                out[tag.strip()] = path.strip()
            return out
        if kind == "str | None":
            return None if raw.lower() in ("", "none") else raw
        return raw
    except ValueError:
        raise ConfigError(f"invalid value for {key!r}: {raw!r}") from None


def parse_assignments(lines: Iterable[str], source: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        key, sep, raw = text.partition("=")
        key = key.strip()
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, raw)
    return values


def resolve(values: dict[str, Any], base_dir: Path | None = None) -> TrainConfig:
    """Apply the profile named in ``values`` (default ``sports``), then explicit keys."""
    profile = values.get("profile", "sports")
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    merged = {**PROFILES[profile], **values, "profile": profile}
    cfg = TrainConfig(**merged)
    if base_dir is not None:
        def absolute(p: str) -> str:
            return p if os.path.isabs(p) else str((base_dir / p).resolve())

        if cfg.interactions:
            cfg.interactions = absolute(cfg.interactions)
        if cfg.out_dir:
            cfg.out_dir = absolute(cfg.out_dir)
        cfg.features = {m: absolute(p) for m, p in cfg.features.items()}
        cfg.graphs = {m: absolute(p) for m, p in cfg.graphs.items()}
        cfg.reduced = {m: absolute(p) for m, p in cfg.reduced.items()}
    return cfg.validate()


def load_config(path: str | Path, overrides: Iterable[str] = ()) -> TrainConfig:
    path = Path(path)
    values = parse_assignments(path.read_text(encoding="utf-8").splitlines(), source=str(path))
    values.update(parse_assignments(overrides, source="--set"))
    return resolve(values, base_dir=path.resolve().parent)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        if value is None:
            text = "none"
        elif isinstance(value, bool):
            text = str(value).lower()
        elif isinstance(value, (tuple, list)):
            text = ",".join(str(v) for v in value)
        elif isinstance(value, dict):
            text = ",".join(f"{m}:{p}" for m, p in value.items())
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"
