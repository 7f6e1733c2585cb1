"""Supervision losses.

Each loss has a probability-space form that mirrors its formula directly and,
where training needs it, a ``*_from_logits`` form built on log-softmax /
log-sigmoid for numerical stability. Inputs may be unbatched or carry a
leading batch axis; batched losses are averaged over the batch.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

NORM_TOL = 1e-4
CO_CLAMP = 1e-7


@dataclass
class LossValue:
    total: torch.Tensor
    components: dict[str, torch.Tensor]
    weights: dict[str, float] = field(default_factory=dict)

    def breakdown(self) -> dict[str, float]:
        return {k: float(v.detach()) for k, v in self.components.items()}


def _batched(x: torch.Tensor, unbatched_dim: int) -> torch.Tensor:
    return x.unsqueeze(0) if x.dim() == unbatched_dim else x


def _check_rows(probs: torch.Tensor, name: str) -> None:
    dev = (probs.detach().sum(-1) - 1).abs().max() if probs.numel() else torch.tensor(0.0)
    if float(dev) > NORM_TOL:
        raise ValueError(f"{name}: probability rows do not sum to 1 (max deviation {float(dev):.2e})")
    if float(probs.detach().min()) < 0:
        raise ValueError(f"{name}: negative probability")


def cc_loss(cc_probs: torch.Tensor, counts: torch.Tensor) -> torch.Tensor:
    """-(1/S) sum_c log p[c, counts[c]]; ``cc_probs`` is ``(B x) S x (L+1)``."""
    _check_rows(cc_probs, "cc_loss")
    p = _batched(cc_probs, 2)
    c = _batched(torch.as_tensor(counts), 1).long()
    picked = p.gather(-1, c.unsqueeze(-1)).squeeze(-1)
    return -torch.log(picked).mean(-1).mean()


def cc_loss_from_logits(cc_logits: torch.Tensor, counts: torch.Tensor) -> torch.Tensor:
    logp = torch.log_softmax(_batched(cc_logits, 2), dim=-1)
    c = _batched(torch.as_tensor(counts), 1).long()
    return -logp.gather(-1, c.unsqueeze(-1)).squeeze(-1).mean(-1).mean()


def ace_loss(pos_probs: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Aggregation cross-entropy.

    ``pos_probs`` is ``(B x) L x (S+1)`` per-slot class probabilities (symbols,
    then pad); ``target`` holds the class fractions ``N_c / L`` and must sum to 1.
    Loss is ``-sum_c w_c log(sum_l p[l, c] / L)``.
    """
    _check_rows(pos_probs, "ace_loss")
    p = _batched(pos_probs, 2)
    w = _batched(torch.as_tensor(target, dtype=p.dtype), 1)
    if float((w.sum(-1) - 1).abs().max()) > 1e-9:
        raise ValueError("ace_loss: target weights must sum to 1")
    L = p.shape[-2]
    agg = (p.sum(-2) / L).clamp_min(torch.finfo(p.dtype).tiny)
    return -torch.special.xlogy(w, agg).sum(-1).mean()


def rec_probs_to_ace(rec_probs: torch.Tensor, eos_id: int, pad_id: int) -> torch.Tensor:
    """Fold ``<eos>`` mass into the pad class: ``(B x) L x V`` to ``(B x) L x (S+1)``."""
    S = min(eos_id, pad_id)
    sym = rec_probs[..., :S]
    pad = rec_probs[..., eos_id:eos_id + 1] + rec_probs[..., pad_id:pad_id + 1]
    return torch.cat([sym, pad], dim=-1)


def co_loss(co_probs: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Binary CE over the L slots, probabilities clamped to [1e-7, 1 - 1e-7]."""
    p = _batched(co_probs, 1).clamp(CO_CLAMP, 1 - CO_CLAMP)
    y = _batched(torch.as_tensor(mask), 1).to(p.dtype)
    return -(y * torch.log(p) + (1 - y) * torch.log(1 - p)).mean(-1).mean()


def co_loss_from_logits(co_logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    x = _batched(co_logits, 1)
    y = _batched(torch.as_tensor(mask), 1).to(x.dtype)
    return F.binary_cross_entropy_with_logits(x, y, reduction="none").mean(-1).mean()


def rec_loss(rec_probs: torch.Tensor, slots: torch.Tensor) -> torch.Tensor:
    """-(1/L) sum_l log p[l, slots[l]] over every slot, ``<eos>`` and ``<pad>`` included."""
    _check_rows(rec_probs, "rec_loss")
    p = _batched(rec_probs, 2)
    y = _batched(torch.as_tensor(slots), 1).long()
    return -torch.log(p.gather(-1, y.unsqueeze(-1)).squeeze(-1)).mean(-1).mean()


def rec_loss_from_logits(rec_logits: torch.Tensor, slots: torch.Tensor) -> torch.Tensor:
    logp = torch.log_softmax(_batched(rec_logits, 2), dim=-1)
    y = _batched(torch.as_tensor(slots), 1).long()
    return -logp.gather(-1, y.unsqueeze(-1)).squeeze(-1).mean(-1).mean()


def _nll_steps(logp: torch.Tensor, slots: torch.Tensor, pad_id: int) -> torch.Tensor:
    y = _batched(torch.as_tensor(slots), 1).long()
    keep = (y != pad_id).to(logp.dtype)
    nll = -logp.gather(-1, y.unsqueeze(-1)).squeeze(-1) * keep
    return (nll.sum(-1) / keep.sum(-1)).mean()


def ar_nll(step_probs: torch.Tensor, slots: torch.Tensor, pad_id: int) -> torch.Tensor:
    """Mean -log p(y_t | prefix) over steps 1..N+1 (characters and ``<eos>``); pad steps skipped."""
    _check_rows(step_probs, "ar_nll")
    return _nll_steps(torch.log(_batched(step_probs, 2)), slots, pad_id)


def ar_nll_from_logits(step_logits: torch.Tensor, slots: torch.Tensor, pad_id: int) -> torch.Tensor:
    return _nll_steps(torch.log_softmax(_batched(step_logits, 2), dim=-1), slots, pad_id)


def total_loss(cc=None, co=None, rec=None, side=None, lambda_cc: float = 1.0, lambda_co: float = 1.0,
               lambda_rec: float = 1.0, lambda_side: float = 1.0) -> LossValue:
    """Weighted sum of the given components; absent components contribute nothing."""
    parts = {"cc": (cc, lambda_cc), "co": (co, lambda_co), "rec": (rec, lambda_rec), "side": (side, lambda_side)}
    components, weights = {}, {}
    total = None
    for name, (value, lam) in parts.items():
        if value is None:
            continue
        value = torch.as_tensor(value)
        components[name] = value
        weights[name] = lam
        term = value * lam
        total = term if total is None else total + term
    if total is None:
        total = torch.tensor(0.0)
    return LossValue(total, components, weights)
