"""Augmented candidate sequences and the ribbon attention mask.

For a response ``y_1..y_L`` and ``d`` candidates per step, the augmented
response is ``L`` blocks of ``[y_{k-1}, c_k^1, ..., c_k^d]`` where ``y_0`` is
the last instruction token. Backbone tokens attend causally to earlier
backbone tokens only; candidate ``c_k^u`` sees the backbone of blocks
``1..k`` and itself. One forward pass then yields the ground-truth next-token
distributions at backbone positions and ``d`` one-step transition
distributions per step at candidate positions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError
from .model import INSTRUCTION, PAD, PAD_ID, RESPONSE, SequenceBatch

BACKBONE, CANDIDATE = 0, 1


@dataclass
class RibbonLayout:
    augmented_tokens: torch.Tensor  # [L * (1 + d)]
    origin: list[tuple]  # (BACKBONE, k) or (CANDIDATE, k, u), k and u 1-based
    position_ids: torch.Tensor  # [L']
    mask: torch.Tensor  # [L', L'] bool, True = may attend
    kd_eval_positions: list[int]
    tpa_eval_positions: list[list[int]]  # [L][d]

    @property
    def length(self) -> int:
        return len(self.origin)


def build_ribbon_layout(
    response_len: int,
    candidates: torch.Tensor,
    backbone_tokens: torch.Tensor,
    base_position: int = 0,
) -> RibbonLayout:
    """Layout for one record.

    ``candidates`` is ``[L, d]`` (``d`` may be 0); ``backbone_tokens`` is
    ``[y_0, ..., y_{L-1}]``; ``base_position`` is the original position of
    ``y_0``.
    """
    L = int(response_len)
    if L < 1:
        raise ContractError("response length must be >= 1")
    candidates = torch.as_tensor(candidates, dtype=torch.long).reshape(L, -1)
    backbone_tokens = torch.as_tensor(backbone_tokens, dtype=torch.long)
    if candidates.shape[0] != L or backbone_tokens.shape[0] != L:
        raise ContractError(f"need {L} candidate rows and {L} backbone tokens")
    d = candidates.shape[1]
    w = 1 + d
    n = L * w
    tokens = torch.empty(n, dtype=torch.long)
    pos = torch.empty(n, dtype=torch.long)
    origin: list[tuple] = []
    kd, tpa = [], []
    for k in range(1, L + 1):
        start = (k - 1) * w
        tokens[start] = backbone_tokens[k - 1]
        pos[start] = base_position + k - 1
        origin.append((BACKBONE, k))
        kd.append(start)
        row = []
        for u in range(1, d + 1):
            tokens[start + u] = candidates[k - 1, u - 1]
            pos[start + u] = base_position + k
            origin.append((CANDIDATE, k, u))
            row.append(start + u)
        tpa.append(row)

    backbone = torch.zeros(n, dtype=torch.bool)
    backbone[kd] = True
    idx = torch.arange(n)
    causal = idx[None, :] <= idx[:, None]
    mask = causal & backbone[None, :]
    mask |= torch.eye(n, dtype=torch.bool)
    return RibbonLayout(tokens, origin, pos, mask, kd, tpa)


@dataclass
class AugmentedBatch:
    """Prompt prefix followed by the ribbon layout, batched and right-padded."""

    seq: SequenceBatch
    mask: torch.Tensor  # [B, S, S]
    kd_index: tuple[torch.Tensor, torch.Tensor]  # flat (rows, cols) of backbone outputs
    kd_targets: torch.Tensor  # ground-truth y_k for each backbone output
    tpa_rows: torch.Tensor  # [M] row of each (record, step)
    tpa_cols: torch.Tensor  # [M, d] candidate positions for that step
    layouts: list[RibbonLayout]
    d: int

    def supervised(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        return self.kd_index[0], self.kd_index[1], self.kd_targets

    def __len__(self) -> int:
        return len(self.seq)

    def __getattr__(self, name):
        # segment_ids, tokens etc. resolve to the augmented sequence
        if name in ("tokens", "segment_ids", "position_ids", "loss_mask", "segment_index", "shape"):
            return getattr(self.seq, name)
        raise AttributeError(name)


def response_spans(batch: SequenceBatch) -> list[tuple[int, int]]:
    """(y_0 position, L) for every row, read off ``loss_mask``."""
    out = []
    for row in range(len(batch)):
        sup = torch.nonzero(batch.loss_mask[row]).flatten()
        if len(sup) == 0:
            raise ContractError(f"row {row} has no supervised positions")
        start, L = int(sup[0]), len(sup)
        if int(sup[-1]) != start + L - 1:
            raise ContractError(f"row {row}: supervised positions are not contiguous")
        out.append((start, L))
    return out


def assemble_augmented_batch(batch: SequenceBatch, candidates: torch.Tensor) -> AugmentedBatch:
    """Replace each row's response by its ribbon layout.

    ``candidates`` is ``[B, L_max, d]``; entries past a row's response length
    are ignored.
    """
    spans = response_spans(batch)
    if candidates.dim() != 3 or candidates.shape[0] != len(batch):
        raise ContractError(f"candidates must be [batch, steps, d], got {tuple(candidates.shape)}")
    if candidates.shape[1] < max(L for _, L in spans):
        raise ContractError("candidate set does not cover every response step")
    d = candidates.shape[2]
    layouts, rows = [], []
    for b, (p, L) in enumerate(spans):
        backbone = batch.tokens[b, p : p + L]
        lay = build_ribbon_layout(L, candidates[b, :L], backbone, base_position=int(batch.position_ids[b, p]))
        layouts.append(lay)
        rows.append((p, lay))
    S = max(p + lay.length for p, lay in rows)
    B = len(batch)
    tokens = torch.full((B, S), PAD_ID, dtype=torch.long)
    seg = torch.full((B, S), PAD, dtype=torch.long)
    pos = torch.zeros((B, S), dtype=torch.long)
    mask = torch.zeros((B, S, S), dtype=torch.bool)
    kd_r, kd_c, kd_t, tpa_r, tpa_c = [], [], [], [], []
    for b, (p, lay) in enumerate(rows):
        n = lay.length
        tokens[b, :p] = batch.tokens[b, :p]
        seg[b, :p] = batch.segment_ids[b, :p]
        pos[b, :p] = batch.position_ids[b, :p]
        tokens[b, p : p + n] = lay.augmented_tokens
        seg[b, p : p + n] = RESPONSE
        seg[b, p] = INSTRUCTION
        pos[b, p : p + n] = lay.position_ids
        mask[b, :p, :p] = torch.ones(p, p, dtype=torch.bool).tril()
        mask[b, p : p + n, :p] = True
        mask[b, p : p + n, p : p + n] = lay.mask
        L = len(lay.kd_eval_positions)
        kd_r += [b] * L
        kd_c += [p + i for i in lay.kd_eval_positions]
        kd_t += batch.tokens[b, p + 1 : p + 1 + L].tolist()
        if d:
            tpa_r += [b] * L
            tpa_c += [[p + i for i in step] for step in lay.tpa_eval_positions]
    seq = SequenceBatch(tokens, seg, pos, torch.zeros((B, S), dtype=torch.bool))
    seq.validate(strict_positions=False)
    return AugmentedBatch(
        seq=seq,
        mask=mask,
        kd_index=(torch.tensor(kd_r), torch.tensor(kd_c)),
        kd_targets=torch.tensor(kd_t),
        tpa_rows=torch.tensor(tpa_r, dtype=torch.long),
        tpa_cols=torch.tensor(tpa_c, dtype=torch.long).reshape(-1, d),
        layouts=layouts,
        d=d,
    )
