"""Distillation objectives: SFT, next-token KD, vision alignment, transition alignment.

All KL terms are forward KL(teacher || student) with the teacher side
detached. ``batch`` arguments accept either a plain ``SequenceBatch`` or an
``AugmentedBatch``; both expose ``supervised()`` for the ground-truth
next-token positions.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ContractError, DegenerateInputError
from .model import (
    INSTRUCTION,
    VISUAL,
    AttentionTrace,
    SequenceBatch,
    TinyTransformer,
    instruction_to_vision_signature,
    forward_pass,
    nucleus_filter,
)
from .numerics import kl_divergence, log_softmax, make_rng, softmax
from .ribbon import AugmentedBatch, assemble_augmented_batch, response_spans

COMPONENTS = ("sft", "kd", "iva", "tpa")
STRATEGIES: dict[str, frozenset[str]] = {
    "sft": frozenset({"sft"}),
    "vanilla-kd": frozenset({"sft", "kd"}),
    "iva-only": frozenset({"sft", "kd", "iva"}),
    "tpa-only": frozenset({"sft", "kd", "tpa"}),
    "align-ti": frozenset(COMPONENTS),
}


def compute_sft_loss(student_logits: torch.Tensor, batch) -> torch.Tensor:
    rows, cols, targets = batch.supervised()
    if len(rows) == 0:
        raise ContractError("no supervised positions")
    logp = log_softmax(student_logits[rows, cols])
    return -logp.gather(-1, targets[:, None]).mean()


def compute_kd_loss(teacher_logits: torch.Tensor, student_logits: torch.Tensor, batch) -> torch.Tensor:
    if teacher_logits.shape[-1] != student_logits.shape[-1]:
        raise ContractError(f"vocab mismatch: teacher {teacher_logits.shape[-1]} vs student {student_logits.shape[-1]}")
    rows, cols, _ = batch.supervised()
    if len(rows) == 0:
        raise ContractError("no supervised positions")
    return kl_divergence(teacher_logits[rows, cols].detach(), student_logits[rows, cols]).mean()


@dataclass
class ImportanceWeights:
    weights: torch.Tensor  # [batch, N_v]
    source: str
    layer: int | None


def compute_importance_weights(
    trace: AttentionTrace,
    batch,
    layer: int,
    source: str = "teacher",
    head_agg: str = "mean",
) -> ImportanceWeights:
    """Per visual token, the attention it receives averaged over instruction rows."""
    a = instruction_to_vision_signature(trace, batch, layer, head_agg)
    return ImportanceWeights(a.detach(), source, layer)


def uniform_weights(batch) -> ImportanceWeights:
    n_v = int((batch.segment_ids[0] == VISUAL).sum())
    if n_v == 0:
        raise DegenerateInputError("no visual positions")
    return ImportanceWeights(torch.full((len(batch), n_v), 1.0 / n_v), "uniform", None)


def visual_prediction_positions(batch) -> torch.Tensor:
    """``[batch, N_v]`` positions whose output predicts each visual token.

    The distribution over ``v_k`` given everything before it is read at the
    position just before ``v_k``.
    """
    out = []
    for row in range(len(batch)):
        vis = batch.segment_index(row, VISUAL)
        if len(vis) == 0:
            raise DegenerateInputError(f"row {row} has no visual positions")
        out.append(vis - 1)
    if len({len(v) for v in out}) != 1:
        raise ContractError("rows disagree on the number of visual tokens")
    return torch.stack(out)


def compute_iva_loss(
    teacher_logits: torch.Tensor,
    student_logits: torch.Tensor,
    weights: ImportanceWeights,
    batch,
) -> torch.Tensor:
    """Attention-weighted KL summed over visual tokens, averaged over the batch."""
    pos = visual_prediction_positions(batch)
    w = weights.weights
    if tuple(w.shape) != tuple(pos.shape):
        raise ContractError(f"weights shape {tuple(w.shape)} != [batch, N_v] {tuple(pos.shape)}")
    rows = torch.arange(len(batch))[:, None].expand_as(pos)
    kl = kl_divergence(teacher_logits[rows, pos].detach(), student_logits[rows, pos])
    return (w * kl).sum(dim=1).mean()


@dataclass
class CandidateSet:
    tokens: torch.Tensor  # [batch, L_max, d]
    probs: torch.Tensor  # [batch, L_max, d], probability under the drawing distribution
    valid: torch.Tensor  # [batch, L_max]
    strategy: str
    d: int
    seed: int


def draw_from(probs: torch.Tensor, rng: np.random.Generator, n: int) -> torch.Tensor:
    """Inverse-CDF draws with replacement, ``[rows, vocab] -> [rows, n]``."""
    p = probs.detach().cpu().numpy()
    cdf = np.cumsum(p, axis=-1)
    cdf /= cdf[:, -1:]
    u = 1.0 - rng.random((p.shape[0], n))
    idx = (cdf[:, None, :] < u[:, :, None]).sum(-1)
    return torch.from_numpy(np.minimum(idx, p.shape[1] - 1))


def sample_candidates(
    student_logits: torch.Tensor,
    batch: SequenceBatch,
    strategy: str = "nucleus",
    d: int = 4,
    seed: int = 0,
    nucleus_p: float = 0.9,
) -> CandidateSet:
    """``d`` candidate tokens per response step from the student's next-token distribution."""
    vocab = student_logits.shape[-1]
    if not 1 <= d <= vocab:
        raise ContractError(f"d={d} outside [1, {vocab}]")
    if strategy not in ("greedy", "nucleus"):
        raise ContractError(f"unknown sampling strategy {strategy!r}")
    spans = response_spans(batch)
    B, L_max = len(batch), max(L for _, L in spans)
    rows = torch.tensor([b for b, (_, L) in enumerate(spans) for _ in range(L)])
    cols = torch.tensor([p + k for p, L in spans for k in range(L)])
    with torch.no_grad():
        probs = softmax(student_logits[rows, cols].detach())
        if strategy == "greedy":
            order = torch.sort(-probs, dim=-1, stable=True).indices[:, :d]
            src = probs
        else:
            src = nucleus_filter(probs, nucleus_p)
            order = draw_from(src, make_rng(seed, 0xCA4D), d)
        chosen_p = src.gather(-1, order)
    tokens = torch.zeros((B, L_max, d), dtype=torch.long)
    cprobs = torch.zeros((B, L_max, d))
    valid = torch.zeros((B, L_max), dtype=torch.bool)
    steps = torch.tensor([k for _, L in spans for k in range(L)])
    tokens[rows, steps] = order
    cprobs[rows, steps] = chosen_p
    valid[rows, steps] = True
    return CandidateSet(tokens, cprobs, valid, strategy, d, seed)


def tpa_from_logits(teacher_logits: torch.Tensor, student_logits: torch.Tensor, aug: AugmentedBatch) -> torch.Tensor:
    """Mean over (record, step) of the candidate-averaged transition KL."""
    if aug.d == 0 or len(aug.tpa_rows) == 0:
        raise ContractError("layout has no candidate positions")
    rows = aug.tpa_rows[:, None].expand_as(aug.tpa_cols)
    kl = kl_divergence(teacher_logits[rows, aug.tpa_cols].detach(), student_logits[rows, aug.tpa_cols])
    return kl.mean(dim=1).mean()


def augmented_forward(
    teacher: TinyTransformer,
    student: TinyTransformer,
    aug: AugmentedBatch,
    teacher_capture=(),
    student_capture=(),
):
    """One ribbon-masked pass per model: ``(t_logits, s_logits, t_trace, s_trace)``."""
    with torch.no_grad():
        t_logits, t_trace = forward_pass(teacher, aug.seq, aug.mask, teacher_capture)
    s_logits, s_trace = forward_pass(student, aug.seq, aug.mask, student_capture)
    return t_logits, s_logits, t_trace, s_trace


def compute_tpa_loss(
    teacher: TinyTransformer,
    student: TinyTransformer,
    batch: SequenceBatch,
    aug: AugmentedBatch,
    candidates: CandidateSet,
) -> torch.Tensor:
    spans = response_spans(batch)
    if candidates.d != aug.d or len(aug.layouts) != len(spans):
        raise ContractError("layout and candidate set disagree")
    for (p, L), lay in zip(spans, aug.layouts):
        if len(lay.kd_eval_positions) != L:
            raise ContractError("layout built for a different response length")
    t_logits, s_logits, _, _ = augmented_forward(teacher, student, aug)
    return tpa_from_logits(t_logits, s_logits, aug)


def naive_tpa_loss(
    teacher: TinyTransformer,
    student: TinyTransformer,
    batch: SequenceBatch,
    candidates: CandidateSet,
) -> torch.Tensor:
    """Reference transition loss: one plain causal pass per (record, step, candidate).

    Test oracle for the ribbon-masked path; costs ``d * L`` passes per model
    and record.
    """
    kls = []
    for b, (p, L) in enumerate(response_spans(batch)):
        for k in range(1, L + 1):
            per_step = []
            for u in range(candidates.d):
                ctx = batch.tokens[b, : p + k]
                toks = torch.cat([ctx, candidates.tokens[b, k - 1, u : u + 1]])[None]
                seg = torch.cat([batch.segment_ids[b, : p + k], batch.segment_ids[b, p + k : p + k + 1]])[None]
                seq = SequenceBatch(toks, seg, torch.arange(toks.shape[1])[None], torch.zeros_like(toks, dtype=torch.bool))
                with torch.no_grad():
                    t_logits, _ = forward_pass(teacher, seq)
                s_logits, _ = forward_pass(student, seq)
                per_step.append(kl_divergence(t_logits[0, -1], s_logits[0, -1]))
            kls.append(torch.stack(per_step).mean())
    return torch.stack(kls).mean()


@dataclass
class LossBreakdown:
    sft: torch.Tensor
    kd: torch.Tensor
    iva: torch.Tensor
    tpa: torch.Tensor
    total: torch.Tensor
    diagnostics: dict = field(default_factory=dict)

    def as_floats(self) -> dict[str, float]:
        return {k: float(torch.as_tensor(getattr(self, k)).detach()) for k in (*COMPONENTS, "total")}


def total_loss(components: dict, strategy: str | None = None) -> LossBreakdown:
    """Unweighted sum; components outside ``strategy`` (or missing) count as exactly 0."""
    allowed = STRATEGIES[strategy] if strategy is not None else frozenset(COMPONENTS)
    if strategy is not None and strategy not in STRATEGIES:
        raise ContractError(f"unknown strategy {strategy!r}")
    zero = torch.zeros(())
    vals = {}
    for name in COMPONENTS:
        v = components.get(name)
        vals[name] = torch.as_tensor(v, dtype=zero.dtype) if v is not None and name in allowed else zero
    total = vals["sft"] + vals["kd"] + vals["iva"] + vals["tpa"]
    return LossBreakdown(**vals, total=total)


@dataclass(frozen=True)
class LossOptions:
    strategy: str = "align-ti"
    d: int = 4
    sampling: str = "nucleus"
    nucleus_p: float = 0.9
    iva_source: str = "teacher"
    iva_layer: int | None = None
    iva_uniform: bool = False
    head_agg: str = "mean"

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ContractError(f"unknown strategy {self.strategy!r}; choose from {sorted(STRATEGIES)}")
        if self.iva_source not in ("teacher", "student"):
            raise ContractError(f"iva_source must be teacher or student, got {self.iva_source!r}")


def objective(
    student: TinyTransformer,
    teacher: TinyTransformer | None,
    batch: SequenceBatch,
    opts: LossOptions,
    seed: int = 0,
) -> LossBreakdown:
    """Loss stack of one training step.

    With transition alignment enabled the student runs twice (a no-grad
    sampling pass, then the ribbon-masked pass) and the teacher once; every
    other term is read off that same augmented pass. Otherwise each model runs
    once over the ground-truth batch.
    """
    comps = STRATEGIES[opts.strategy]
    needs_teacher = comps != {"sft"}
    if needs_teacher and teacher is None:
        raise ContractError(f"strategy {opts.strategy} needs a teacher")
    use_iva = "iva" in comps
    need_layer = use_iva and not opts.iva_uniform
    if need_layer and opts.iva_layer is None:
        raise ContractError("IVA needs iva_layer (or iva_uniform)")
    t_cap = {opts.iva_layer} if need_layer and opts.iva_source == "teacher" else set()
    s_cap = {opts.iva_layer} if need_layer and opts.iva_source == "student" else set()

    t_logits = t_trace = s_trace = None
    if "tpa" in comps:
        with torch.no_grad():
            probe, _ = forward_pass(student, batch)
        cands = sample_candidates(probe, batch, opts.sampling, opts.d, seed, opts.nucleus_p)
        view = assemble_augmented_batch(batch, cands.tokens)
        t_logits, s_logits, t_trace, s_trace = augmented_forward(teacher, student, view, t_cap, s_cap)
    else:
        view = batch
        s_logits, s_trace = forward_pass(student, batch, capture=s_cap)
        if needs_teacher:
            with torch.no_grad():
                t_logits, t_trace = forward_pass(teacher, batch, capture=t_cap)

    parts = {"sft": compute_sft_loss(s_logits, view)}
    if "kd" in comps:
        parts["kd"] = compute_kd_loss(t_logits, s_logits, view)
    if use_iva:
        if opts.iva_uniform:
            w = uniform_weights(view)
        else:
            trace = t_trace if opts.iva_source == "teacher" else s_trace
            w = compute_importance_weights(trace, view, opts.iva_layer, opts.iva_source, opts.head_agg)
        parts["iva"] = compute_iva_loss(t_logits, s_logits, w, view)
    if "tpa" in comps:
        parts["tpa"] = tpa_from_logits(t_logits, s_logits, view)
    return total_loss(parts, opts.strategy)


def aligned_nodes_closed_form(vocab_size: int, length: int, method: str) -> int:
    """Generation-tree nodes whose distributions get aligned, by formula."""
    v, L = vocab_size, length
    if method == "vanilla-kd":
        return L * v
    if method == "tpa-full":
        return v + (L - 1) * v * v
    raise ContractError(f"unknown method {method!r}")


def aligned_nodes_enumerated(vocab_size: int, length: int, method: str, ground_truth=None) -> int:
    """Same count by walking every node of the depth-``length`` tree.

    A node is a token prefix. Next-token KD aligns the children of each
    ground-truth prefix; full transition alignment also aligns the children
    of every sibling of a ground-truth token (any predecessor, any successor).
    """
    gt = tuple(ground_truth) if ground_truth is not None else (0,) * length
    count = 0
    for depth in range(1, length + 1):
        for node in itertools.product(range(vocab_size), repeat=depth):
            if method == "vanilla-kd":
                hit = node[:-1] == gt[: depth - 1]
            elif method == "tpa-full":
                hit = depth == 1 or node[:-2] == gt[: depth - 2]
            else:
                raise ContractError(f"unknown method {method!r}")
            count += hit
    return count
