"""Static figures rendered from the metric CSVs."""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _read(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def _num(v: str) -> float:
    return float(v) if v not in ("", None) else float("nan")


def _save(fig, out) -> Path:
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_bias(csvs: Sequence[str | Path], out: str | Path) -> Path:
    """Left: accumulated error (train vs test). Right: %ExAccErr per curve file."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for path in csvs:
        rows = _read(path)
        label = Path(path).stem
        l = [int(r["l"]) for r in rows]
        ax1.plot(l, [_num(r["E_train"]) for r in rows], "--", label=f"{label} train")
        ax1.plot(l, [_num(r["E_test"]) for r in rows], label=f"{label} test")
        ax2.plot(l, [_num(r["ExAccErr"]) for r in rows], label=label)
    ax1.set(xlabel="generation step l", ylabel="accumulated KL", title="accumulated error")
    ax2.axhline(0, color="grey", lw=0.8)
    ax2.set(xlabel="generation step l", ylabel="%ExAccErr", title="excess accumulated error")
    ax1.legend(fontsize=7)
    ax2.legend(fontsize=7)
    return _save(fig, out)


def plot_irs(csvs: Sequence[str | Path], out: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for path in csvs:
        rows = _read(path)
        ax.plot([int(r["layer"]) for r in rows], [_num(r["irs"]) for r in rows], "o-", label=Path(path).stem)
    ax.set(xlabel="layer", ylabel="IRS", title="instruction relevance by layer")
    ax.legend(fontsize=7)
    return _save(fig, out)


def plot_metrics(csvs: Sequence[str | Path], out: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    for path in csvs:
        rows = _read(path)
        steps = [int(r["step"]) for r in rows]
        for key in ("sft", "kd", "iva", "tpa"):
            vals = [_num(r[key]) for r in rows]
            if any(v != 0 for v in vals):
                ax.plot(steps, vals, label=f"{Path(path).parent.name}:{key}", lw=0.8)
    ax.set(xlabel="step", ylabel="loss", yscale="log", title="training losses")
    ax.legend(fontsize=7)
    return _save(fig, out)
