"""Teacher training, student distillation, and held-out evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import OptimConfig, RunConfig
from .errors import ConfigError, ContractError, NumericDomainError
from .irs import irs_report
from .losses import STRATEGIES, LossBreakdown, LossOptions, compute_sft_loss, objective
from .model import (
    TinyTransformer,
    checkpoint_extra,
    forward_pass,
    generate,
    load_checkpoint,
    save_checkpoint,
)
from .numerics import derive_seed, kl_divergence, make_rng
from .synthdata import DatasetRecord, read_dataset, split_dataset, to_batch, write_dataset

log = logging.getLogger(__name__)

torch.use_deterministic_algorithms(True)

METRIC_FIELDS = ["step", "lr", "sft", "kd", "iva", "tpa", "total", "student_fwd", "teacher_fwd"]


class NumericAbort(RuntimeError):
    def __init__(self, step: int, detail: str):
        super().__init__(f"non-finite loss at step {step}: {detail}")
        self.step = step


@dataclass
class RunMetrics:
    rows: list[dict] = field(default_factory=list)
    wall: list[float] = field(default_factory=list)
    student_fwd: int = 0
    teacher_fwd: int = 0
    eval: dict = field(default_factory=dict)

    def write(self, out_dir: Path, stem: str) -> None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with (out_dir / f"{stem}_metrics.csv").open("w", newline="") as fh:
            w = csv.DictWriter(fh, METRIC_FIELDS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        with (out_dir / f"{stem}_timing.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "seconds"])
            for i, s in enumerate(self.wall):
                w.writerow([i, f"{s:.6f}"])
        if self.eval:
            (out_dir / f"{stem}_eval.json").write_text(json.dumps(self.eval, indent=2, sort_keys=True) + "\n")


def lr_at(step: int, opt: OptimConfig) -> float:
    warm = int(opt.warmup_fraction * opt.steps)
    if step < warm:
        return opt.learning_rate * (step + 1) / warm
    span = max(1, opt.steps - warm)
    return opt.learning_rate * 0.5 * (1.0 + math.cos(math.pi * (step - warm) / span))


def batch_indices(n: int, batch_size: int, seed: int, step: int) -> np.ndarray:
    return make_rng(seed, step).choice(n, size=min(batch_size, n), replace=False)


def load_splits(cfg: RunConfig, data_path: str | Path | None = None):
    """``(spec, train, val, bias_eval)`` from the dataset file, split by ``seeds.data``."""
    path = Path(data_path or cfg.data.path)
    if not path.exists():
        raise ConfigError(f"dataset {path} does not exist (run generate-data first)")
    spec, records = read_dataset(path)
    if spec.vocab.size != cfg.vocab_size:
        raise ConfigError(f"dataset vocab {spec.vocab.size} != config vocab {cfg.vocab_size}")
    train, val, bias = split_dataset(records, cfg.data.fractions, cfg.data.min_response_len_for_bias_eval, cfg.seeds.data)
    return spec, train, val, bias


def write_splits(out_dir: Path, spec, train, val, bias) -> None:
    for name, recs in (("train", train), ("val", val), ("bias_eval", bias)):
        write_dataset(out_dir / "data" / f"{name}.jsonl", spec, recs)


def _optimize(
    model: TinyTransformer,
    records: Sequence[DatasetRecord],
    opt_cfg: OptimConfig,
    seed: int,
    loss_fn,
    teacher: TinyTransformer | None = None,
) -> RunMetrics:
    metrics = RunMetrics()
    if opt_cfg.steps == 0:
        return metrics
    opt = torch.optim.AdamW(model.parameters(), lr=opt_cfg.learning_rate, weight_decay=opt_cfg.weight_decay)
    model.n_forward = 0
    if teacher is not None:
        teacher.n_forward = 0
    model.train()
    for step in range(opt_cfg.steps):
        t0 = time.perf_counter()
        lr = lr_at(step, opt_cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        idx = batch_indices(len(records), opt_cfg.batch_size, seed, step)
        batch = to_batch([records[i] for i in idx])
        try:
            parts: LossBreakdown = loss_fn(batch, derive_seed(seed, step, 0xCA))
        except NumericDomainError as exc:
            raise NumericAbort(step, str(exc)) from exc
        if not torch.isfinite(parts.total):
            raise NumericAbort(step, f"total loss {float(parts.total)}")
        opt.zero_grad(set_to_none=True)
        parts.total.backward()
        if opt_cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), opt_cfg.grad_clip)
        opt.step()
        row = {"step": step, "lr": lr, **parts.as_floats(),
               "student_fwd": model.n_forward, "teacher_fwd": teacher.n_forward if teacher is not None else 0}
        metrics.rows.append(row)
        metrics.wall.append(time.perf_counter() - t0)
        if step % 100 == 0 or step == opt_cfg.steps - 1:
            log.info("step %d total %.4f %s", step, row["total"], {k: round(row[k], 4) for k in ("sft", "kd", "iva", "tpa")})
    model.eval()
    metrics.student_fwd = model.n_forward
    metrics.teacher_fwd = teacher.n_forward if teacher is not None else 0
    return metrics


def train_teacher(cfg: RunConfig, out_dir: str | Path | None = None, data_path=None) -> tuple[Path, RunMetrics]:
    """SFT-only teacher training; writes ``teacher/`` checkpoint, splits and metrics."""
    out = Path(out_dir or cfg.output_dir)
    spec, train, val, bias = load_splits(cfg, data_path)
    write_splits(out, spec, train, val, bias)
    model = TinyTransformer(cfg.teacher_model_config())

    def loss_fn(batch, _seed):
        from .losses import total_loss

        logits, _ = forward_pass(model, batch)
        return total_loss({"sft": compute_sft_loss(logits, batch)}, "sft")

    metrics = _optimize(model, train, cfg.teacher_optim, derive_seed(cfg.seeds.train, 0x7EA), loss_fn)
    metrics.eval = evaluate_models(model, None, val, max_new=cfg.task.response_len_range[1])
    ckpt = save_checkpoint(model, out / "teacher", extra={"role": "teacher", "steps": cfg.teacher_optim.steps})
    metrics.write(out, "teacher")
    cfg.dump(out / "config.json")
    return ckpt, metrics


def select_iva_layer(cfg: RunConfig, teacher: TinyTransformer, student: TinyTransformer, records) -> int | None:
    comps = STRATEGIES[cfg.strategy]
    if "iva" not in comps or cfg.iva_uniform:
        return None
    source = teacher if cfg.iva_source == "teacher" else student
    if cfg.iva_layer != "auto":
        layer = int(cfg.iva_layer)
        if not 0 <= layer < source.cfg.n_layers:
            raise ConfigError(f"iva_layer {layer} outside the {cfg.iva_source}'s {source.cfg.n_layers} layers")
        return layer
    n = min(len(records), 512)
    return irs_report(source, records[:n], cfg.irs_pairs, cfg.seeds.eval, cfg.iva_source).selected_layer


def distill(
    cfg: RunConfig,
    teacher_ckpt: str | Path,
    out_dir: str | Path | None = None,
    data_path=None,
) -> tuple[Path, RunMetrics]:
    out = Path(out_dir or Path(cfg.output_dir) / f"student-{cfg.strategy}")
    teacher = load_checkpoint(teacher_ckpt)
    teacher.eval()
    for p in teacher.parameters():
        p.requires_grad_(False)
    if teacher.cfg.vocab_size != cfg.vocab_size:
        raise ConfigError(f"teacher vocab {teacher.cfg.vocab_size} != config vocab {cfg.vocab_size}")
    _, train, val, _ = load_splits(cfg, data_path)
    student = TinyTransformer(cfg.student_model_config())
    layer = select_iva_layer(cfg, teacher, student, train)
    opts = cfg.loss_options(layer)
    uses_teacher = STRATEGIES[cfg.strategy] != {"sft"}

    def loss_fn(batch, seed):
        return objective(student, teacher if uses_teacher else None, batch, opts, seed)

    metrics = _optimize(student, train, cfg.optim, derive_seed(cfg.seeds.train, 0x57D), loss_fn, teacher)
    metrics.eval = evaluate_models(student, teacher, val, max_new=cfg.task.response_len_range[1])
    metrics.eval["iva_layer"] = layer
    ckpt = save_checkpoint(student, out / "student",
                           extra={"role": "student", "strategy": cfg.strategy, "iva_layer": layer})
    metrics.write(out, "student")
    cfg.dump(out / "config.json")
    return ckpt, metrics


@torch.no_grad()
def teacher_forced_kl(teacher: TinyTransformer, student: TinyTransformer, records, chunk: int = 256) -> float:
    """Mean KL(teacher || student) over every supervised response token."""
    total, count = 0.0, 0
    for s in range(0, len(records), chunk):
        batch = to_batch(records[s : s + chunk])
        t, _ = forward_pass(teacher, batch)
        st, _ = forward_pass(student, batch)
        rows, cols, _ = batch.supervised()
        kl = kl_divergence(t[rows, cols], st[rows, cols])
        total += float(kl.sum())
        count += len(kl)
    return total / count


def exact_match(model: TinyTransformer, records, max_new: int) -> tuple[float, dict[str, float]]:
    outs = generate(model, [r.prompt for r in records], max_new, "greedy")
    hits = [o == r.response_tokens for o, r in zip(outs, records)]
    by_family: dict[int, list[bool]] = {}
    for r, h in zip(records, hits):
        by_family.setdefault(r.instruction_tokens[0], []).append(h)
    return float(np.mean(hits)), {str(k): float(np.mean(v)) for k, v in sorted(by_family.items())}


def evaluate_models(student: TinyTransformer, teacher: TinyTransformer | None, records, max_new: int = 64) -> dict:
    acc, by_family = exact_match(student, records, max_new)
    report = {"n_records": len(records), "accuracy": acc, "accuracy_by_family_token": by_family}
    if teacher is not None:
        report["kl_teacher_forced"] = teacher_forced_kl(teacher, student, records)
    return report


def evaluate(student_ckpt, teacher_ckpt, records, max_new: int = 64) -> dict:
    student = load_checkpoint(student_ckpt)
    teacher = load_checkpoint(teacher_ckpt) if teacher_ckpt is not None else None
    return evaluate_models(student, teacher, records, max_new)
