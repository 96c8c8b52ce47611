"""Exposure-bias measurement via accumulated teacher-student KL.

Every curve sums, over generation steps ``t <= l``, the record-averaged
KL(teacher || student) of the next-token distributions at step ``t``. The
curves differ only in where the prefix ``y_<t`` comes from: ground truth
(train-time), the student's own samples (test-time, also the regret ``R``),
or the teacher's samples (baseline ``E``).

Models are accessed through ``step_logits``, so fixed transition tables can
stand in for transformers in tests.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from .errors import ContractError
from .model import BOS_ID, PAD, RESPONSE, SequenceBatch, TinyTransformer, forward_pass, nucleus_filter
from .numerics import kl_divergence, make_rng, softmax
from .losses import draw_from

EPSILON_GUARD = 1e-9


class StepModel(Protocol):
    def step_logits(self, prompts: Sequence[tuple], continuations: torch.Tensor) -> torch.Tensor:
        """``[n, t + 1, V]`` logits predicting continuation tokens ``1..t+1``."""


class TransformerLM:
    def __init__(self, model: TinyTransformer, chunk: int = 256):
        self.model = model
        self.chunk = chunk

    @torch.no_grad()
    def step_logits(self, prompts, continuations):
        n, t = continuations.shape
        out = torch.empty((n, t + 1, self.model.cfg.vocab_size))
        groups: dict[int, list[int]] = {}
        for i, (v, q) in enumerate(prompts):
            groups.setdefault(len(v) + len(q), []).append(i)
        for plen, idx in sorted(groups.items()):
            for s in range(0, len(idx), self.chunk):
                part = idx[s : s + self.chunk]
                head = torch.tensor([[BOS_ID, *prompts[i][0], *prompts[i][1]] for i in part], dtype=torch.long)
                toks = torch.cat([head, continuations[part]], dim=1)
                nv = len(prompts[part[0]][0])
                seg = torch.full_like(toks, RESPONSE)
                seg[:, 0] = 0
                seg[:, 1 : 1 + nv] = 1
                seg[:, 1 + nv : 1 + plen] = 2
                seq = SequenceBatch(toks, seg, torch.arange(toks.shape[1]).expand_as(toks).clone(),
                                    torch.zeros_like(toks, dtype=torch.bool))
                logits, _ = forward_pass(self.model, seq)
                out[part] = logits[:, plen : plen + t + 1]
        return out


class MarkovChainLM:
    """First-order chain over states: the next-token distribution depends only on the last token."""

    def __init__(self, transition: np.ndarray):
        p = np.asarray(transition, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] != p.shape[1] or not np.allclose(p.sum(1), 1.0) or (p <= 0).any():
            raise ContractError("transition must be a square, strictly positive row-stochastic matrix")
        self.log_p = torch.from_numpy(np.log(p))

    def step_logits(self, prompts, continuations):
        last = torch.tensor([q[-1] for _, q in prompts], dtype=torch.long)[:, None]
        states = torch.cat([last, continuations], dim=1)
        return self.log_p[states]


def as_step_model(m) -> StepModel:
    return TransformerLM(m) if isinstance(m, TinyTransformer) else m


def _prompts(eval_set) -> list[tuple]:
    return [(list(r.visual_tokens), list(r.instruction_tokens)) for r in eval_set]


def _check_lengths(eval_set, max_len: int) -> None:
    if max_len < 1:
        raise ContractError("max_len must be >= 1")
    short = [r.record_id for r in eval_set if len(r.response_tokens) < max_len]
    if short:
        raise ContractError(f"{len(short)} records shorter than max_len={max_len} (e.g. {short[0]})")


@torch.no_grad()
def rollout(model, prompts, length: int, strategy: str = "nucleus", nucleus_p: float = 0.9, rng=None) -> torch.Tensor:
    """``[n, length]`` sampled continuation; EOS does not stop the rollout."""
    model = as_step_model(model)
    cont = torch.zeros((len(prompts), 0), dtype=torch.long)
    for _ in range(length):
        probs = softmax(model.step_logits(prompts, cont)[:, -1])
        if strategy == "greedy":
            nxt = torch.sort(-probs, dim=-1, stable=True).indices[:, :1]
        elif strategy == "nucleus":
            if rng is None:
                raise ContractError("nucleus rollout needs an rng")
            nxt = draw_from(nucleus_filter(probs, nucleus_p), rng, 1)
        else:
            raise ContractError(f"unknown strategy {strategy!r}")
        cont = torch.cat([cont, nxt], dim=1)
    return cont


@torch.no_grad()
def stepwise_kl(teacher, student, prompts, prefixes: torch.Tensor) -> torch.Tensor:
    """``[n, t + 1]`` KL(teacher || student) at each step given ``prefixes`` ``[n, t]``."""
    t_logits = as_step_model(teacher).step_logits(prompts, prefixes)
    s_logits = as_step_model(student).step_logits(prompts, prefixes)
    return kl_divergence(t_logits, s_logits)


def accumulated_error_train(teacher, student, eval_set, max_len: int) -> np.ndarray:
    _check_lengths(eval_set, max_len)
    prefixes = torch.tensor([r.response_tokens[: max_len - 1] for r in eval_set], dtype=torch.long)
    kl = stepwise_kl(teacher, student, _prompts(eval_set), prefixes)
    return np.cumsum(kl.mean(dim=0).numpy())


def accumulated_error_sampled(
    teacher, student, eval_set, max_len: int, sampler, seed: int = 0,
    strategy: str = "nucleus", nucleus_p: float = 0.9,
) -> np.ndarray:
    """Accumulated KL with prefixes rolled out from ``sampler``."""
    _check_lengths(eval_set, max_len)
    prompts = _prompts(eval_set)
    prefixes = rollout(sampler, prompts, max_len - 1, strategy, nucleus_p, make_rng(seed, 0xB1A5))
    kl = stepwise_kl(teacher, student, prompts, prefixes)
    return np.cumsum(kl.mean(dim=0).numpy())


def accumulated_error_test(teacher, student, eval_set, max_len: int, seed: int = 0,
                           strategy: str = "nucleus", nucleus_p: float = 0.9) -> np.ndarray:
    return accumulated_error_sampled(teacher, student, eval_set, max_len, student, seed, strategy, nucleus_p)


def excess_percent(regret: np.ndarray, baseline: np.ndarray, guard: float = EPSILON_GUARD):
    """``(values, defined)``; undefined where the baseline is below ``guard`` (value NaN)."""
    regret, baseline = np.asarray(regret), np.asarray(baseline)
    defined = baseline >= guard
    values = np.full(baseline.shape, np.nan)
    values[defined] = (regret[defined] - baseline[defined]) / baseline[defined] * 100.0
    return values, defined


def excess_accumulated_error(teacher, student, eval_set, max_len: int, seed: int = 0,
                             strategy: str = "nucleus", nucleus_p: float = 0.9):
    """``(percent, defined, R, E)`` with R from student rollouts and E from teacher rollouts."""
    r = accumulated_error_sampled(teacher, student, eval_set, max_len, student, seed, strategy, nucleus_p)
    e = accumulated_error_sampled(teacher, student, eval_set, max_len, teacher, seed, strategy, nucleus_p)
    pct, defined = excess_percent(r, e)
    return pct, defined, r, e


@dataclass
class BiasCurve:
    max_len: int
    e_train: np.ndarray
    e_test: np.ndarray
    regret_r: np.ndarray
    baseline_e: np.ndarray
    ex_acc_err: np.ndarray
    defined: np.ndarray
    n_eval_records: int
    prefix_sampling: str
    seed: int | list[int]
    ex_acc_err_std: np.ndarray | None = None

    def plateau(self, lo: int, hi: int) -> float:
        """Mean %ExAccErr over defined steps ``lo..hi`` (1-based, inclusive)."""
        sl = slice(lo - 1, hi)
        vals = self.ex_acc_err[sl][self.defined[sl]]
        if len(vals) == 0:
            raise ContractError(f"no defined %ExAccErr values in [{lo}, {hi}]")
        return float(np.mean(vals))

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = ["l", "E_train", "E_test", "R", "E", "ExAccErr", "defined"]
            if self.ex_acc_err_std is not None:
                header.append("ExAccErr_std")
            w.writerow(header)
            for i in range(self.max_len):
                row = [i + 1, repr(float(self.e_train[i])), repr(float(self.e_test[i])),
                       repr(float(self.regret_r[i])), repr(float(self.baseline_e[i])),
                       repr(float(self.ex_acc_err[i])) if self.defined[i] else "", int(self.defined[i])]
                if self.ex_acc_err_std is not None:
                    row.append(repr(float(self.ex_acc_err_std[i])) if self.defined[i] else "")
                w.writerow(row)
        return path


def bias_curve(teacher, student, eval_set, max_len: int, seeds: Sequence[int] = (0,),
               strategy: str = "nucleus", nucleus_p: float = 0.9) -> BiasCurve:
    """All curves, averaged over prefix-sampling ``seeds``.

    The %ExAccErr reported is computed per seed and then averaged; its
    across-seed standard deviation is kept alongside.
    """
    _check_lengths(eval_set, max_len)
    e_train = accumulated_error_train(teacher, student, eval_set, max_len)
    rs, es, pcts, defs = [], [], [], []
    for s in seeds:
        pct, defined, r, e = excess_accumulated_error(teacher, student, eval_set, max_len, s, strategy, nucleus_p)
        rs.append(r)
        es.append(e)
        pcts.append(pct)
        defs.append(defined)
    defined = np.logical_and.reduce(defs)
    pcts = np.array(pcts)
    mean_pct = np.where(defined, np.nanmean(np.where(defined, pcts, 0.0), axis=0), np.nan)
    std_pct = np.where(defined, np.std(np.where(defined, pcts, 0.0), axis=0), np.nan)
    r = np.mean(rs, axis=0)
    return BiasCurve(
        max_len=max_len,
        e_train=e_train,
        e_test=r,
        regret_r=r,
        baseline_e=np.mean(es, axis=0),
        ex_acc_err=mean_pct,
        defined=defined,
        n_eval_records=len(eval_set),
        prefix_sampling=strategy,
        seed=list(seeds),
        ex_acc_err_std=std_pct,
    )
