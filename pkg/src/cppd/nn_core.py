"""Small torch building blocks shared by the encoder and every decoder.

Tensors are batch-first ``B x T x D``. Attention probabilities are returned
alongside outputs so callers can record them for inspection.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

INIT_STD = 0.2
GELU_APPROXIMATE = "none"  # exact erf GELU everywhere


@dataclass
class AttnRecord:
    weights: torch.Tensor  # (B x) heads x Q x K, rows sum to 1
    layer: int
    branch: str


def trunc_normal_init(shape, mean: float = 0.0, std: float = INIT_STD,
                      generator: torch.Generator | None = None, dtype=torch.float32) -> torch.Tensor:
    """N(mean, std^2) truncated to [mean - 2 std, mean + 2 std]."""
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    t = torch.empty(shape, dtype=dtype)
    return nn.init.trunc_normal_(t, mean=mean, std=std, a=mean - 2 * std, b=mean + 2 * std,
                                 generator=generator)


def linear(x: torch.Tensor, W: torch.Tensor, b: torch.Tensor | None = None) -> torch.Tensor:
    if x.shape[-1] != W.shape[0]:
        raise ValueError(f"linear: input dim {x.shape[-1]} != weight rows {W.shape[0]}")
    if b is not None and b.shape != (W.shape[1],):
        raise ValueError(f"linear: bias shape {tuple(b.shape)} != ({W.shape[1]},)")
    y = x @ W
    return y + b if b is not None else y


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    z = x - x.amax(dim=axis, keepdim=True)
    e = torch.exp(z)
    return e / e.sum(dim=axis, keepdim=True)


def layer_norm(x: torch.Tensor, gamma: torch.Tensor, beta: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    return F.layer_norm(x, x.shape[-1:], gamma, beta, eps)


def causal_mask(T: int, dtype=torch.float32) -> torch.Tensor:
    """Additive T x T mask: query t may see keys 0..t."""
    blocked = torch.triu(torch.ones(T, T, dtype=torch.bool), diagonal=1)
    return torch.zeros(T, T, dtype=dtype).masked_fill(blocked, float("-inf"))


class Linear(nn.Module):
    """Affine map with a ``Din x Dout`` weight (x @ W + b)."""

    def __init__(self, d_in: int, d_out: int, bias: bool = True, generator: torch.Generator | None = None):
        super().__init__()
        bound = 1.0 / math.sqrt(d_in)
        w = torch.empty(d_in, d_out).uniform_(-bound, bound, generator=generator)
        self.weight = nn.Parameter(w)
        self.bias = nn.Parameter(torch.zeros(d_out)) if bias else None

    def forward(self, x):
        return linear(x, self.weight, self.bias)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.eps = eps

    def forward(self, x):
        return layer_norm(x, self.weight, self.bias, self.eps)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, generator: torch.Generator | None = None):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} is not divisible by heads {heads}")
        self.dim, self.heads = dim, heads
        self.head_dim = dim // heads
        self.q_proj = Linear(dim, dim, generator=generator)
        self.k_proj = Linear(dim, dim, generator=generator)
        self.v_proj = Linear(dim, dim, generator=generator)
        self.out_proj = Linear(dim, dim, generator=generator)

    def _split(self, x):
        B, T, _ = x.shape
        return x.view(B, T, self.heads, self.head_dim).transpose(1, 2)

    def project_kv(self, k, v):
        """Key/value projections, reusable across several queries against the same memory."""
        return self._split(self.k_proj(k)), self._split(self.v_proj(v))

    def forward(self, q, k=None, v=None, mask: torch.Tensor | None = None, kv: tuple | None = None):
        """Return ``(output B x Tq x D, probabilities B x heads x Tq x Tk)``.

        ``mask`` is additive (-inf blocks) and broadcasts to ``B x heads x Tq x Tk``;
        a 3-D mask is taken as ``B x Tq x Tk``.
        """
        if q.shape[-1] != self.dim:
            raise ValueError(f"mha: query dim {q.shape[-1]} != module width {self.dim}")
        if kv is None:
            if k.shape[-1] != self.dim or v.shape[-1] != self.dim:
                raise ValueError("mha: key/value dims do not match the module width")
            if k.shape[-2] != v.shape[-2]:
                raise ValueError(f"mha: {k.shape[-2]} keys but {v.shape[-2]} values")
            kv = self.project_kv(k, v)
        B, Tq, _ = q.shape
        qh = self._split(self.q_proj(q))
        kh, vh = kv
        scores = qh @ kh.transpose(-1, -2) / math.sqrt(self.head_dim)
        if mask is not None:
            if mask.dim() == 3:
                mask = mask.unsqueeze(1)
            scores = scores + mask
        probs = torch.softmax(scores, dim=-1)
        out = (probs @ vh).transpose(1, 2).reshape(B, Tq, self.dim)
        return self.out_proj(out), probs


def mha(q, k, v, module: MultiHeadAttention, mask=None):
    """Functional form: unbatched ``T x D`` inputs are accepted and returned unbatched."""
    squeeze = q.dim() == 2
    if squeeze:
        q, k, v = q.unsqueeze(0), k.unsqueeze(0), v.unsqueeze(0)
    out, probs = module(q, k, v, mask=mask)
    if squeeze:
        return out[0], probs[0]
    return out, probs


class MLP(nn.Module):
    def __init__(self, dim: int, hidden_ratio: float = 4.0, generator: torch.Generator | None = None):
        super().__init__()
        hidden = int(round(dim * hidden_ratio))
        self.fc1 = Linear(dim, hidden, generator=generator)
        self.fc2 = Linear(hidden, dim, generator=generator)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x), approximate=GELU_APPROXIMATE))


class SelfAttentionBlock(nn.Module):
    """Pre-norm transformer block: x + MHSA(LN x), then x + MLP(LN x)."""

    def __init__(self, dim, heads, mlp_ratio=4.0, generator=None):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, generator=generator)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio, generator=generator)

    def forward(self, x, mask=None):
        h = self.norm1(x)
        a, probs = self.attn(h, h, h, mask=mask)
        x = x + a
        x = x + self.mlp(self.norm2(x))
        return x, probs


class CrossAttentionBlock(nn.Module):
    """Pre-norm block where queries attend a separate memory, then an MLP."""

    def __init__(self, dim, heads, mlp_ratio=4.0, generator=None):
        super().__init__()
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, generator=generator)
        self.norm2 = LayerNorm(dim)
        self.mlp = MLP(dim, mlp_ratio, generator=generator)

    def memory_kv(self, memory):
        m = self.norm_kv(memory)
        return self.attn.project_kv(m, m)

    def forward(self, q, memory, mask=None, kv=None):
        if kv is None:
            kv = self.memory_kv(memory)
        a, probs = self.attn(self.norm_q(q), None, None, mask=mask, kv=kv)
        x = q + a
        x = x + self.mlp(self.norm2(x))
        return x, probs


def grad_check(fn: Callable[[], torch.Tensor], params: Sequence[torch.Tensor], eps: float = 1e-4,
               analytic: Sequence[torch.Tensor] | None = None, max_coords: int | None = None,
               rng: np.random.Generator | None = None) -> float:
    """Largest relative error between analytic and central-difference gradients.

    ``fn`` re-evaluates the scalar objective from the current contents of
    ``params``; the parameters are perturbed in place and restored. Relative
    error uses ``max(1, |a|, |n|)`` as denominator. With ``max_coords`` only
    that many randomly chosen coordinates of each parameter are probed.
    """
    params = list(params)
    if analytic is None:
        for p in params:
            p.grad = None
        loss = fn()
        grads = torch.autograd.grad(loss, params, allow_unused=True)
        analytic = [torch.zeros_like(p) if g is None else g.detach() for p, g in zip(params, grads)]
    worst = 0.0
    with torch.no_grad():
        for p, a in zip(params, analytic):
            flat = p.view(-1)
            a_flat = a.reshape(-1)
            coords = range(flat.numel())
            if max_coords is not None and flat.numel() > max_coords:
                coords = (rng or np.random.default_rng(0)).choice(flat.numel(), max_coords, replace=False).tolist()
            for i in coords:
                orig = flat[i].item()
                flat[i] = orig + eps
                f_plus = float(fn())
                flat[i] = orig - eps
                f_minus = float(fn())
                flat[i] = orig
                num = (f_plus - f_minus) / (2 * eps)
                ana = float(a_flat[i])
                err = abs(ana - num) / max(1.0, abs(ana), abs(num))
                worst = max(worst, err)
    return worst
