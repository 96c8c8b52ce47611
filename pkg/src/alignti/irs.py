"""Instruction-relevance scores per layer and alignment-layer selection.

A layer's attention signature for an input is the instruction-to-visual
attention averaged over heads and instruction positions (one weight per
visual token). The score is one minus the mean cosine similarity of
signatures across pairs of distinct inputs: layers whose visual focus moves
with the instruction score high.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ContractError, DegenerateInputError
from .model import TinyTransformer, forward_pass, instruction_to_vision_signature, prompt_batch
from .numerics import make_rng


@dataclass
class IRSReport:
    per_layer_score: list[float]
    n_pairs_used: int
    selected_layer: int
    seed: int
    aggregation_mode: str = "mean-over-heads-and-instruction"
    source: str = "teacher"

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["layer", "irs", "selected"])
            for layer, score in enumerate(self.per_layer_score):
                w.writerow([layer, repr(float(score)), int(layer == self.selected_layer)])
        return path


def _content_key(record) -> tuple:
    return tuple(record.visual_tokens), tuple(record.instruction_tokens)


@torch.no_grad()
def attention_signatures(
    model: TinyTransformer,
    records: Sequence,
    layers: Sequence[int] | None = None,
    head_agg: str = "mean",
    chunk: int = 128,
) -> dict[int, torch.Tensor]:
    """``{layer: [n_records, N_v]}`` signatures from prompt-only forward passes."""
    layers = list(range(model.cfg.n_layers)) if layers is None else list(layers)
    out: dict[int, list[torch.Tensor]] = {layer: [] for layer in layers}
    for start in range(0, len(records), chunk):
        part = records[start : start + chunk]
        batch = prompt_batch([r.prompt for r in part])
        _, trace = forward_pass(model, batch, capture=layers)
        for layer in layers:
            out[layer].append(instruction_to_vision_signature(trace, batch, layer, head_agg))
    sigs = {layer: torch.cat(v) for layer, v in out.items()}
    for layer, s in sigs.items():
        if (s.sum(dim=1) <= 0).any():
            raise DegenerateInputError(f"layer {layer}: all-zero attention signature")
    return sigs


def attention_signature(model: TinyTransformer, record, layer: int, head_agg: str = "mean") -> torch.Tensor:
    return attention_signatures(model, [record], [layer], head_agg)[layer][0]


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise DegenerateInputError("cosine similarity of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def irs_from_signatures(
    signatures,
    n_pairs: int | None,
    seed: int = 0,
    keys: Sequence | None = None,
) -> tuple[float, int]:
    """``(score, pairs_used)`` from a ``[n, N_v]`` signature matrix.

    Pairs ``(i, j)`` need different ``keys`` (default: different row index).
    When ``n_pairs`` is None or at least the number of such pairs, every pair
    is used once; otherwise ``n_pairs`` i.i.d. pairs are drawn.
    """
    sig = np.asarray(signatures, dtype=np.float64)
    n = len(sig)
    keys = list(range(n)) if keys is None else list(keys)
    if len(set(keys)) < 2:
        raise ContractError("need at least two distinct inputs")
    if n_pairs is not None and n_pairs < 1:
        raise ContractError("n_pairs must be >= 1")
    all_pairs = [(i, j) for i, j in itertools.combinations(range(n), 2) if keys[i] != keys[j]]
    if n_pairs is None or n_pairs >= len(all_pairs):
        pairs = all_pairs
    else:
        rng = make_rng(seed, 0x1125)
        pairs = []
        while len(pairs) < n_pairs:
            i, j = (int(x) for x in rng.integers(0, n, size=2))
            if keys[i] != keys[j]:
                pairs.append((i, j))
    cos = [_cosine(sig[i], sig[j]) for i, j in pairs]
    return 1.0 - float(np.mean(cos)), len(pairs)


def compute_irs(model: TinyTransformer, records: Sequence, layer: int, n_pairs: int | None = 256, seed: int = 0) -> float:
    if len({len(r.visual_tokens) for r in records}) > 1:
        raise ContractError("records must share the number of visual tokens")
    sig = attention_signatures(model, records, [layer], model.cfg.head_agg)[layer]
    return irs_from_signatures(sig, n_pairs, seed, [_content_key(r) for r in records])[0]


def select_layer(scores: Sequence[float]) -> int:
    """Argmax with ties going to the deeper layer."""
    s = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(s).all():
        raise ContractError("IRS scores must be finite")
    return int(np.flatnonzero(s == s.max())[-1])


def irs_report(
    model: TinyTransformer,
    records: Sequence,
    n_pairs: int | None = 256,
    seed: int = 0,
    source: str = "teacher",
) -> IRSReport:
    if len({len(r.visual_tokens) for r in records}) > 1:
        raise ContractError("records must share the number of visual tokens")
    sigs = attention_signatures(model, records, head_agg=model.cfg.head_agg)
    keys = [_content_key(r) for r in records]
    scores, used = [], 0
    for layer in range(model.cfg.n_layers):
        score, used = irs_from_signatures(sigs[layer], n_pairs, seed, keys)
        scores.append(score)
    return IRSReport(scores, used, select_layer(scores), seed, source=source)
