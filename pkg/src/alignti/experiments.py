"""End-to-end experiments shared by ``scripts/`` and the acceptance suite."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from .biasmetrics import bias_curve
from .config import RunConfig, Seeds
from .irs import irs_report
from .model import load_checkpoint
from .synthdata import generate_dataset, read_dataset, write_dataset
from .train import distill, teacher_forced_kl, train_teacher

log = logging.getLogger(__name__)


def with_seed(cfg: RunConfig, seed: int, **changes) -> RunConfig:
    """Copy of ``cfg`` whose student init and training seeds are ``seed``."""
    seeds = dataclasses.replace(cfg.seeds, init=seed, train=seed)
    return dataclasses.replace(cfg, seeds=seeds, **changes)


def prepare(cfg: RunConfig, workdir: str | Path) -> tuple[RunConfig, Path]:
    """Generate the dataset and train the teacher under ``workdir``."""
    workdir = Path(workdir)
    data = workdir / "dataset.jsonl"
    write_dataset(data, cfg.task, generate_dataset(cfg.task, cfg.n_records))
    cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, path=str(data)), output_dir=str(workdir))
    t0 = time.perf_counter()
    ckpt, metrics = train_teacher(cfg)
    log.info("teacher trained in %.0fs: %s", time.perf_counter() - t0, metrics.eval)
    return cfg, ckpt


def exposure_bias(
    cfg: RunConfig,
    teacher_ckpt: str | Path,
    seeds: Sequence[int] = (0, 1, 2),
    strategies: Sequence[str] = ("vanilla-kd", "align-ti"),
    max_len: int = 32,
    plateau: tuple[int, int] = (8, 32),
) -> dict:
    """Distill one student per (strategy, seed); report held-out KL and %ExAccErr plateaus."""
    out = Path(cfg.output_dir)
    teacher = load_checkpoint(teacher_ckpt)
    _, val = read_dataset(out / "data" / "val.jsonl")
    _, bias_eval = read_dataset(out / "data" / "bias_eval.jsonl")
    bias_eval = [r for r in bias_eval if len(r.response_tokens) >= max_len]
    results: dict = {"max_len": max_len, "plateau_range": list(plateau), "n_bias_eval": len(bias_eval), "runs": {}}
    for strategy in strategies:
        for seed in seeds:
            run_cfg = with_seed(cfg, seed, strategy=strategy)
            run_dir = out / f"{strategy}-seed{seed}"
            t0 = time.perf_counter()
            ckpt, metrics = distill(run_cfg, teacher_ckpt, run_dir)
            student = load_checkpoint(ckpt)
            curve = bias_curve(teacher, student, bias_eval, max_len, seeds=(cfg.seeds.eval,),
                               strategy=cfg.sampling, nucleus_p=cfg.nucleus_p)
            curve.to_csv(run_dir / "bias.csv")
            results["runs"][f"{strategy}/{seed}"] = {
                "strategy": strategy,
                "seed": seed,
                "kl_teacher_forced": metrics.eval["kl_teacher_forced"],
                "accuracy": metrics.eval["accuracy"],
                "plateau": curve.plateau(*plateau),
                "seconds": time.perf_counter() - t0,
            }
            log.info("%s seed %d: %s", strategy, seed, results["runs"][f"{strategy}/{seed}"])
    return results


def irs_layer_study(
    cfg: RunConfig,
    teacher_ckpt: str | Path,
    seeds: Sequence[int] = (0, 1, 2),
    n_records: int = 512,
) -> dict:
    """Teacher IRS per layer, then IVA-only students with IRS-selected vs uniform weights."""
    out = Path(cfg.output_dir)
    teacher = load_checkpoint(teacher_ckpt)
    _, train = read_dataset(out / "data" / "train.jsonl")
    report = irs_report(teacher, train[:n_records], cfg.irs_pairs, cfg.seeds.eval)
    report.to_csv(out / "irs.csv")
    results: dict = {"per_layer_score": report.per_layer_score, "selected_layer": report.selected_layer,
                     "n_layers": teacher.cfg.n_layers, "runs": {}}
    for seed in seeds:
        for variant, uniform in (("irs", False), ("uniform", True)):
            run_cfg = with_seed(cfg, seed, strategy="iva-only", iva_uniform=uniform, iva_layer=report.selected_layer)
            _, metrics = distill(run_cfg, teacher_ckpt, out / f"iva-{variant}-seed{seed}")
            results["runs"][f"{variant}/{seed}"] = {"kl_teacher_forced": metrics.eval["kl_teacher_forced"],
                                                    "iva_layer": metrics.eval["iva_layer"]}
    return results


def summarize_bias(results: dict, seeds: Sequence[int]) -> dict:
    runs = results["runs"]
    kd = [runs[f"vanilla-kd/{s}"] for s in seeds]
    ti = [runs[f"align-ti/{s}"] for s in seeds]
    kl_kd, kl_ti = np.mean([r["kl_teacher_forced"] for r in kd]), np.mean([r["kl_teacher_forced"] for r in ti])
    return {
        "plateau_vanilla": [r["plateau"] for r in kd],
        "plateau_align_ti": [r["plateau"] for r in ti],
        "plateau_below_every_seed": all(b["plateau"] < a["plateau"] for a, b in zip(kd, ti)),
        "kl_vanilla": float(kl_kd),
        "kl_align_ti": float(kl_ti),
        "kl_relative_reduction": float((kl_kd - kl_ti) / kl_kd),
    }


def dump(obj: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=float) + "\n")
    return path
