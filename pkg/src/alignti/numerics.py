"""Float64 tensor helpers, seeded RNG, and finite-difference gradient checks.

Tensors are plain ``torch.Tensor`` objects in float64; torch autograd plays the
role of the computation tape. What lives here is the thin layer every other
module relies on: finiteness guards, stabilized softmax / log-space KL, a
counter-based RNG, and an independent central-difference gradient checker.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import torch

from .errors import ContractError, NumericDomainError

DTYPE = torch.float64

torch.set_default_dtype(DTYPE)


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Philox generator keyed by ``seed`` and optional sub-stream ``keys``.

    Every stochastic routine in the package takes one of these (or the seed
    to build one); nothing draws from global state.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) & 0xFFFFFFFFFFFFFFFF for k in keys)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 63-bit child seed for a named sub-stream."""
    return int(make_rng(seed, *keys).integers(0, 2**63 - 1))


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        bad = (~torch.isfinite(t)).sum().item()
        raise NumericDomainError(f"{what} has {bad} non-finite entries")
    return t


def softmax(logits: torch.Tensor) -> torch.Tensor:
    """Max-subtracted softmax over the last axis."""
    check_finite(logits, "logits")
    if logits.shape[-1] < 1:
        raise ContractError("softmax needs a non-empty last axis")
    z = logits - logits.max(dim=-1, keepdim=True).values.detach()
    e = torch.exp(z)
    return e / e.sum(dim=-1, keepdim=True)


def log_softmax(logits: torch.Tensor) -> torch.Tensor:
    check_finite(logits, "logits")
    z = logits - logits.max(dim=-1, keepdim=True).values.detach()
    return z - torch.logsumexp(z, dim=-1, keepdim=True)


def kl_divergence(p_logits: torch.Tensor, q_logits: torch.Tensor) -> torch.Tensor:
    """KL(p || q) per last-axis slice, computed from logits in log space.

    Returns a tensor with the last axis reduced away (0-d for vector input).
    Gradients flow into whichever argument requires them; callers detach the
    teacher side themselves.
    """
    if p_logits.shape != q_logits.shape:
        raise ContractError(f"shape mismatch: {tuple(p_logits.shape)} vs {tuple(q_logits.shape)}")
    log_p = log_softmax(p_logits)
    log_q = log_softmax(q_logits)
    return (log_p.exp() * (log_p - log_q)).sum(dim=-1)


def gradient_check(
    loss_fn: Callable[[], torch.Tensor],
    params: Sequence[torch.Tensor] | Iterable[torch.Tensor],
    eps: float = 1e-5,
    n_coords: int = 64,
    seed: int = 0,
) -> float:
    """Max relative error between autograd and central differences.

    ``loss_fn`` takes no arguments and reads ``params`` (leaf tensors) from
    its closure; it must be deterministic. Up to ``n_coords`` coordinates are
    sampled across all parameters. The error at a coordinate is
    ``|analytic - numeric| / max(1, |numeric|)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ContractError(f"eps={eps} outside [1e-7, 1e-3]")
    params = list(params)

    with torch.no_grad():
        first = float(loss_fn())
        second = float(loss_fn())
    if first != second:
        raise ContractError(f"loss_fn is not deterministic ({first!r} != {second!r})")

    for p in params:
        p.grad = None
    loss = loss_fn()
    if loss.requires_grad:
        analytic = torch.autograd.grad(loss, params, allow_unused=True)
    else:
        analytic = [None] * len(params)
    analytic = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, analytic)]

    sizes = np.array([p.numel() for p in params])
    total = int(sizes.sum())
    rng = make_rng(seed)
    flat_ids = np.arange(total) if total <= n_coords else np.sort(rng.choice(total, n_coords, replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    with torch.no_grad():
        for flat in flat_ids:
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            idx = int(flat - offsets[which])
            view = params[which].view(-1)
            orig = view[idx].item()
            view[idx] = orig + eps
            up = float(loss_fn())
            view[idx] = orig - eps
            down = float(loss_fn())
            view[idx] = orig
            numeric = (up - down) / (2 * eps)
            got = analytic[which].view(-1)[idx].item()
            worst = max(worst, abs(got - numeric) / max(1.0, abs(numeric)))
    return worst
