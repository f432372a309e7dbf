"""Training-curve figures and a flat table from a run's report.jsonl."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LOSS_KEYS = ("bpr", "ssi", "rr_user", "rr_item", "total")

STYLE = {
    "figure.figsize": (6.4, 4.0),
    "figure.dpi": 100,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "font.size": 9,
}


def read_report(path: str | Path) -> list[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [json.loads(line) for line in lines if line.strip()]


def report_table(rows: list[dict], delimiter: str = "\t") -> str:
    metric_keys = sorted({k for r in rows for k in (r.get("valid") or {})})
    header = ["epoch", *LOSS_KEYS, *(f"valid_{k}" for k in metric_keys)]
    out = [delimiter.join(header)]
    for r in rows:
        valid = r.get("valid") or {}
        cells = [str(r["epoch"])] + [repr(float(r[k])) for k in LOSS_KEYS]
        cells += [repr(float(valid[k])) if k in valid else "" for k in metric_keys]
        out.append(delimiter.join(cells))
    return "\n".join(out) + "\n"


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_losses(rows: list[dict], path: str | Path) -> Path:
    epochs = [r["epoch"] for r in rows]
    with plt.rc_context(STYLE):
        fig, (left, right) = plt.subplots(1, 2, figsize=(9.0, 3.6))
        left.plot(epochs, [r["bpr"] for r in rows], marker="o", ms=3, label="BPR")
        left.plot(epochs, [r["total"] for r in rows], marker="s", ms=3, label="total")
        left.set_xlabel("epoch")
        left.set_ylabel("mean batch loss")
        left.legend()
        for key, label in (("ssi", "InfoNCE"), ("rr_user", "RR users"), ("rr_item", "RR items")):
            right.plot(epochs, [r[key] for r in rows], marker=".", label=label)
        right.set_xlabel("epoch")
        right.set_ylabel("auxiliary term")
        right.legend()
        return _save(fig, Path(path))


def plot_valid_metrics(rows: list[dict], path: str | Path) -> Path | None:
    rows = [r for r in rows if r.get("valid")]
    if not rows:
        return None
    epochs = [r["epoch"] for r in rows]
    keys = sorted(rows[0]["valid"])
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for key in keys:
            ax.plot(epochs, [r["valid"][key] for r in rows], marker=".", label=key)
        ax.set_xlabel("epoch")
        ax.set_ylabel("validation metric")
        ax.legend(ncol=2)
        return _save(fig, Path(path))


def render_report(report: str | Path, out_dir: str | Path) -> dict[str, Path]:
    """Write ``report.tsv``, ``loss.png`` and (with Valid metrics) ``valid.png`` into ``out_dir``."""
    rows = read_report(report)
    if not rows:
        raise ValueError(f"{report}: no epochs recorded")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = {"table": out / "report.tsv"}
    written["table"].write_text(report_table(rows), encoding="utf-8")
    written["loss"] = plot_losses(rows, out / "loss.png")
    valid = plot_valid_metrics(rows, out / "valid.png")
    if valid is not None:
        written["valid"] = valid
    return written
