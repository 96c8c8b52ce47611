"""Toy decoder-only transformer with segment-annotated batches.

One shared transformer reads ``BOS | visual | instruction | response`` over a
single vocabulary. Attention masks are explicit boolean tensors (True means
"may attend"), position ids are explicit so that augmented layouts can reuse
indices, and any subset of layers can record post-softmax attention.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, ContractError, DegenerateInputError
from .numerics import DTYPE, check_finite, make_rng, softmax

PAD_ID, BOS_ID, EOS_ID = 0, 1, 2

# Segment ids; rows must be nondecreasing in this order.
PREFIX, VISUAL, INSTRUCTION, RESPONSE, PAD = 0, 1, 2, 3, 4
SEGMENT_NAMES = {PREFIX: "prefix", VISUAL: "visual", INSTRUCTION: "instruction", RESPONSE: "response", PAD: "pad"}

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int
    n_heads: int
    hidden_dim: int
    max_seq_len: int
    seed: int = 0
    mlp_ratio: int = 4
    head_agg: str = "mean"

    def __post_init__(self):
        for name in ("vocab_size", "n_layers", "n_heads", "hidden_dim", "max_seq_len", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.hidden_dim % self.n_heads:
            raise ConfigError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must be >= 4 (pad, bos, eos and one content token)")
        if self.head_agg not in ("mean", "max"):
            raise ConfigError(f"unknown head_agg {self.head_agg!r}")


@dataclass
class SequenceBatch:
    """Token batch with per-position segment labels.

    ``loss_mask[b, t]`` marks positions whose output predicts a response
    token, i.e. the target is ``tokens[b, t + 1]``.
    """

    tokens: torch.Tensor
    segment_ids: torch.Tensor
    position_ids: torch.Tensor
    loss_mask: torch.Tensor

    @property
    def shape(self) -> tuple[int, int]:
        return tuple(self.tokens.shape)

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def validate(self, strict_positions: bool = True) -> "SequenceBatch":
        b, s = self.tokens.shape
        for name in ("segment_ids", "position_ids", "loss_mask"):
            if tuple(getattr(self, name).shape) != (b, s):
                raise ContractError(f"{name} shape {tuple(getattr(self, name).shape)} != {(b, s)}")
        if s > 1 and (self.segment_ids[:, 1:] < self.segment_ids[:, :-1]).any():
            raise ContractError("segments out of order (expected prefix, visual, instruction, response, pad)")
        if self.loss_mask.any():
            last = torch.zeros_like(self.loss_mask)
            last[:, -1] = True
            if (self.loss_mask & last).any():
                raise ContractError("loss_mask set at the final position (no successor token)")
            nxt = torch.roll(self.segment_ids, -1, dims=1)
            if (self.loss_mask & (nxt != RESPONSE)).any():
                raise ContractError("loss_mask position whose successor is not a response token")
        if strict_positions and s > 1:
            real = self.segment_ids != PAD
            pair = real[:, 1:] & real[:, :-1]
            if (pair & (self.position_ids[:, 1:] <= self.position_ids[:, :-1])).any():
                raise ContractError("position_ids must strictly increase within a row")
        return self

    @classmethod
    def from_segments(cls, rows: Sequence[tuple[Sequence[int], Sequence[int], Sequence[int]]]) -> "SequenceBatch":
        """Right-padded batch from ``(visual, instruction, response)`` token lists."""
        if not rows:
            raise ContractError("empty batch")
        seqs, segs, masks = [], [], []
        for visual, instr, resp in rows:
            toks = [BOS_ID, *visual, *instr, *resp]
            seg = [PREFIX] + [VISUAL] * len(visual) + [INSTRUCTION] * len(instr) + [RESPONSE] * len(resp)
            lm = [False] * len(toks)
            if resp:
                start = len(toks) - len(resp) - 1
                for t in range(start, len(toks) - 1):
                    lm[t] = True
            seqs.append(toks)
            segs.append(seg)
            masks.append(lm)
        s = max(len(t) for t in seqs)
        tokens = torch.full((len(rows), s), PAD_ID, dtype=torch.long)
        segment_ids = torch.full((len(rows), s), PAD, dtype=torch.long)
        loss_mask = torch.zeros((len(rows), s), dtype=torch.bool)
        for i, (t, g, m) in enumerate(zip(seqs, segs, masks)):
            tokens[i, : len(t)] = torch.tensor(t)
            segment_ids[i, : len(g)] = torch.tensor(g)
            loss_mask[i, : len(m)] = torch.tensor(m)
        position_ids = torch.arange(s).expand(len(rows), s).clone()
        return cls(tokens, segment_ids, position_ids, loss_mask).validate()

    def targets(self) -> torch.Tensor:
        """Next-token targets aligned with ``loss_mask`` (PAD where unsupervised)."""
        tgt = torch.full_like(self.tokens, PAD_ID)
        tgt[:, :-1] = self.tokens[:, 1:]
        return torch.where(self.loss_mask, tgt, torch.full_like(tgt, PAD_ID))

    def supervised(self) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Flat ``(rows, cols, targets)`` for every supervised position."""
        rows, cols = torch.nonzero(self.loss_mask, as_tuple=True)
        return rows, cols, self.tokens[rows, cols + 1]

    def segment_index(self, row: int, segment: int) -> torch.Tensor:
        return torch.nonzero(self.segment_ids[row] == segment).flatten()


@dataclass
class AttentionTrace:
    """Post-softmax attention per captured layer, each ``[batch, heads, seq, seq]``."""

    weights: dict[int, torch.Tensor] = field(default_factory=dict)

    @property
    def enabled_layers(self) -> set[int]:
        return set(self.weights)


def causal_mask(batch: SequenceBatch) -> torch.Tensor:
    """Strict causal mask that also hides PAD keys. Shape ``[batch, seq, seq]``."""
    s = batch.tokens.shape[1]
    tri = torch.ones(s, s, dtype=torch.bool).tril()
    keys_ok = (batch.segment_ids != PAD)[:, None, :]
    return tri[None] & keys_ok


class Block(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        h = cfg.hidden_dim
        self.n_heads = cfg.n_heads
        self.ln1 = nn.LayerNorm(h)
        self.qkv = nn.Linear(h, 3 * h)
        self.proj = nn.Linear(h, h)
        self.ln2 = nn.LayerNorm(h)
        self.fc = nn.Linear(h, cfg.mlp_ratio * h)
        self.out = nn.Linear(cfg.mlp_ratio * h, h)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        b, s, h = x.shape
        nh = self.n_heads
        q, k, v = self.qkv(self.ln1(x)).split(h, dim=-1)
        q, k, v = (t.view(b, s, nh, h // nh).transpose(1, 2) for t in (q, k, v))
        scores = q @ k.transpose(-1, -2) / math.sqrt(h // nh)
        scores = scores.masked_fill(~mask[:, None], float("-inf"))
        att = torch.softmax(scores, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, s, h)
        x = x + self.proj(y)
        x = x + self.out(F.gelu(self.fc(self.ln2(x))))
        return x, att


class TinyTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.hidden_dim)
        self.pos_emb = nn.Embedding(cfg.max_seq_len, cfg.hidden_dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(cfg.hidden_dim)
        self.unembed = nn.Linear(cfg.hidden_dim, cfg.vocab_size, bias=False)
        self.to(DTYPE)
        self.reset_parameters()
        self.n_forward = 0

    def reset_parameters(self) -> None:
        """N(0, 0.02) weights, zero biases, unit LayerNorm gains, from ``cfg.seed``."""
        rng = make_rng(self.cfg.seed, 0x1A17)
        with torch.no_grad():
            for name, p in self.named_parameters():
                if name.endswith("bias"):
                    p.zero_()
                elif ".ln" in name or name.startswith("ln"):
                    p.fill_(1.0)
                else:
                    p.copy_(torch.from_numpy(rng.normal(0.0, 0.02, size=tuple(p.shape))))

    def forward(
        self,
        tokens: torch.Tensor,
        position_ids: torch.Tensor,
        mask: torch.Tensor,
        capture: Iterable[int] = (),
        embed_delta: torch.Tensor | None = None,
    ) -> tuple[torch.Tensor, dict[int, torch.Tensor]]:
        self.n_forward += 1
        capture = set(capture)
        x = self.tok_emb(tokens) + self.pos_emb(position_ids)
        if embed_delta is not None:
            x = x + embed_delta
        weights = {}
        for i, block in enumerate(self.blocks):
            x, att = block(x, mask)
            if i in capture:
                weights[i] = att.detach()
        return self.unembed(self.ln_f(x)), weights

    def n_params(self) -> int:
        return sum(p.numel() for p in self.parameters())


def forward_pass(
    model: TinyTransformer,
    batch: SequenceBatch,
    mask: torch.Tensor | None = None,
    capture: Iterable[int] = (),
    embed_delta: torch.Tensor | None = None,
) -> tuple[torch.Tensor, AttentionTrace]:
    """Logits ``[batch, seq, vocab]`` plus attention for the ``capture`` layers.

    ``mask`` may be ``[seq, seq]`` or ``[batch, seq, seq]``; without one the
    strict causal mask is used. A supplied mask may not expose PAD keys.
    ``embed_delta`` (``[batch, seq, hidden]``) is added to the input
    embeddings, for perturbation probes.
    """
    cfg = model.cfg
    b, s = batch.tokens.shape
    if (batch.tokens >= cfg.vocab_size).any() or (batch.tokens < 0).any():
        raise ContractError(f"token id outside [0, {cfg.vocab_size})")
    if s > cfg.max_seq_len or int(batch.position_ids.max()) >= cfg.max_seq_len:
        raise ContractError(f"sequence exceeds max_seq_len={cfg.max_seq_len}")
    capture = set(capture)
    if any(not 0 <= layer < cfg.n_layers for layer in capture):
        raise ContractError(f"capture layers {sorted(capture)} outside [0, {cfg.n_layers})")

    pad = batch.segment_ids == PAD
    if mask is None:
        mask = causal_mask(batch)
    else:
        mask = mask.to(torch.bool)
        if mask.dim() == 2:
            mask = mask.expand(b, s, s)
        if tuple(mask.shape) != (b, s, s):
            raise ContractError(f"mask shape {tuple(mask.shape)} incompatible with batch {(b, s)}")
        if (mask & pad[:, None, :]).any():
            raise ContractError("mask permits attention to a PAD position")
    # PAD query rows only need to stay finite; point them at position 0.
    empty = ~mask.any(dim=-1)
    if (empty & ~pad).any():
        raise ContractError("a non-PAD query has no attendable key")
    if empty.any():
        mask = mask.clone()
        mask[..., 0] |= empty

    logits, weights = model(batch.tokens, batch.position_ids, mask, capture, embed_delta)
    check_finite(logits, "logits")
    return logits, AttentionTrace(weights)


def head_aggregate(att: torch.Tensor, how: str = "mean") -> torch.Tensor:
    return att.mean(dim=1) if how == "mean" else att.max(dim=1).values


def extract_instruction_to_vision_attention(
    trace: AttentionTrace,
    batch: SequenceBatch,
    layer: int,
    head_agg: str = "mean",
) -> torch.Tensor:
    """Head-aggregated instruction-to-visual attention, ``[batch, N_i, N_v]``.

    All rows must share segment sizes (true for one grid size).
    """
    if layer not in trace.weights:
        raise ContractError(f"layer {layer} was not captured (have {sorted(trace.weights)})")
    att = head_aggregate(trace.weights[layer], head_agg)
    out = []
    for row in range(len(batch)):
        vis = batch.segment_index(row, VISUAL)
        ins = batch.segment_index(row, INSTRUCTION)
        if len(vis) == 0 or len(ins) == 0:
            raise DegenerateInputError("need at least one visual and one instruction position")
        out.append(att[row][ins][:, vis])
    shapes = {tuple(a.shape) for a in out}
    if len(shapes) != 1:
        raise ContractError(f"rows disagree on (N_i, N_v): {sorted(shapes)}")
    return torch.stack(out)


def instruction_to_vision_signature(
    trace: AttentionTrace,
    batch: SequenceBatch,
    layer: int,
    head_agg: str = "mean",
) -> torch.Tensor:
    """``[batch, N_v]``: each row's instruction-to-visual attention averaged over its instruction positions.

    Unlike the full extraction, rows may have different instruction lengths.
    """
    if layer not in trace.weights:
        raise ContractError(f"layer {layer} was not captured (have {sorted(trace.weights)})")
    att = head_aggregate(trace.weights[layer], head_agg)
    out = []
    for row in range(len(batch)):
        vis = batch.segment_index(row, VISUAL)
        ins = batch.segment_index(row, INSTRUCTION)
        if len(vis) == 0 or len(ins) == 0:
            raise DegenerateInputError("need at least one visual and one instruction position")
        out.append(att[row][ins][:, vis].mean(dim=0))
    if len({len(a) for a in out}) != 1:
        raise ContractError("rows disagree on N_v")
    return torch.stack(out)


def prompt_batch(rows: Sequence[tuple[Sequence[int], Sequence[int]]]) -> SequenceBatch:
    return SequenceBatch.from_segments([(v, q, ()) for v, q in rows])


def nucleus_filter(probs: torch.Tensor, p: float) -> torch.Tensor:
    """Zero out the tail beyond cumulative mass ``p`` and renormalize (last axis)."""
    if not 0.0 < p <= 1.0:
        raise ContractError(f"nucleus p={p} outside (0, 1]")
    sorted_p, order = torch.sort(probs, dim=-1, descending=True, stable=True)
    cum = sorted_p.cumsum(dim=-1)
    keep_sorted = (cum - sorted_p) < p
    keep_sorted[..., 0] = True
    keep = torch.zeros_like(keep_sorted).scatter(-1, order, keep_sorted)
    out = torch.where(keep, probs, torch.zeros_like(probs))
    return out / out.sum(dim=-1, keepdim=True)


def sample_tokens(probs: torch.Tensor, rng: np.random.Generator, n: int = 1) -> torch.Tensor:
    """``n`` draws with replacement per row of a ``[rows, vocab]`` matrix."""
    p = probs.detach().cpu().numpy()
    out = np.empty((p.shape[0], n), dtype=np.int64)
    for i, row in enumerate(p):
        row = row / row.sum()
        out[i] = rng.choice(len(row), size=n, replace=True, p=row)
    return torch.from_numpy(out)


@torch.no_grad()
def generate(
    model: TinyTransformer,
    prompts: Sequence[tuple[Sequence[int], Sequence[int]]],
    max_new: int,
    strategy: str = "greedy",
    nucleus_p: float = 0.9,
    rng: np.random.Generator | None = None,
    stop_at_eos: bool = True,
) -> list[list[int]]:
    """Autoregressive continuation of ``(visual, instruction)`` prompts.

    Prompts are grouped by length so no row carries interior padding. With
    ``stop_at_eos`` a finished row keeps its EOS as the last token.
    """
    if strategy not in ("greedy", "nucleus"):
        raise ContractError(f"unknown strategy {strategy!r}")
    if strategy == "nucleus" and rng is None:
        raise ContractError("nucleus sampling needs an rng")
    results: list[list[int] | None] = [None] * len(prompts)
    groups: dict[int, list[int]] = {}
    for i, (v, q) in enumerate(prompts):
        groups.setdefault(len(v) + len(q), []).append(i)
    for _, idx in sorted(groups.items()):
        batch = prompt_batch([prompts[i] for i in idx])
        tokens = batch.tokens
        gen = [[] for _ in idx]
        done = torch.zeros(len(idx), dtype=torch.bool)
        for _ in range(max_new):
            s = tokens.shape[1]
            seg = torch.cat([batch.segment_ids, torch.full((len(idx), s - batch.segment_ids.shape[1]), RESPONSE)], 1)
            cur = SequenceBatch(tokens, seg, torch.arange(s).expand(len(idx), s).clone(),
                                torch.zeros_like(tokens, dtype=torch.bool))
            logits, _ = forward_pass(model, cur)
            probs = softmax(logits[:, -1])
            if strategy == "greedy":
                nxt = probs.argmax(dim=-1)
            else:
                nxt = sample_tokens(nucleus_filter(probs, nucleus_p), rng)[:, 0]
            for j, t in enumerate(nxt.tolist()):
                if not done[j]:
                    gen[j].append(t)
                    if stop_at_eos and t == EOS_ID:
                        done[j] = True
            tokens = torch.cat([tokens, nxt[:, None]], dim=1)
            if done.all():
                break
        for j, i in enumerate(idx):
            results[i] = gen[j]
    return results


def save_checkpoint(model: TinyTransformer, path: str | Path, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` and a little-endian float64 ``params.bin``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, t in model.state_dict().items():
        arr = t.detach().cpu().numpy().astype("<f8", copy=False)
        chunks.append(arr.tobytes(order="C"))
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        offset += arr.nbytes
    manifest = {
        "format_version": CHECKPOINT_FORMAT,
        "dtype": "<f8",
        "config": asdict(model.cfg),
        "seed": model.cfg.seed,
        "params": entries,
        "extra": extra or {},
    }
    (path / "params.bin").write_bytes(b"".join(chunks))
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path: str | Path) -> TinyTransformer:
    path = Path(path)
    manifest_file = path / "manifest.json"
    if not manifest_file.exists():
        raise ContractError(f"no checkpoint manifest at {manifest_file}")
    manifest = json.loads(manifest_file.read_text())
    if manifest.get("format_version") != CHECKPOINT_FORMAT:
        raise ContractError(f"unsupported checkpoint format {manifest.get('format_version')}")
    model = TinyTransformer(ModelConfig(**manifest["config"]))
    blob = (path / "params.bin").read_bytes()
    state = model.state_dict()
    if {e["name"] for e in manifest["params"]} != set(state):
        raise ContractError("checkpoint parameter names do not match the model")
    loaded = {}
    for e in manifest["params"]:
        expect = list(state[e["name"]].shape)
        if e["shape"] != expect:
            raise ContractError(f"{e['name']}: manifest shape {e['shape']} != model shape {expect}")
        raw = blob[e["offset"] : e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise ContractError(f"{e['name']}: truncated parameter blob")
        loaded[e["name"]] = torch.from_numpy(np.frombuffer(raw, dtype="<f8").reshape(e["shape"]).copy())
    model.load_state_dict(loaded)
    return model


def checkpoint_extra(path: str | Path) -> dict:
    return json.loads((Path(path) / "manifest.json").read_text()).get("extra", {})
