"""Comparison decoders sharing the CPPD encoder.

AR family (two-stream layout): a query stream seeded with a per-step position
embedding attends a fixed context stream ``c_j = tok(y_j) + pos(j)``,
``j = 0..L-1`` with ``y_0`` the start token. Step ``t`` (predicting ``y_t``)
may see context ``j`` only if the mask allows it:

* ``ar``      causal, ``j < t``
* ``ar-p``    the prefix of a sampled reading order (teacher forcing only)
* ``ar-l``    no query-to-context attention; the query is ``c_{t-1} + pos_q(t)``
* ``ar-l-p``  as ``ar-l`` with ``t-1`` replaced by the predecessor in the sampled order

Inference is always left to right.

PD family: learned position queries cross-attend the visual tokens; ``pd-p``
adds a side head on the first (pre-decoding) block.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .config import ModelConfig, VariantKind
from .decoder import CPPDModel, Head
from .encoder import Encoder
from .losses import ar_nll_from_logits, rec_loss_from_logits, total_loss
from .nn_core import (AttnRecord, CrossAttentionBlock, LayerNorm, MultiHeadAttention,
                      trunc_normal_init)
from .vocab import decode_ids


def sample_permutation(T: int, rng: np.random.Generator, p_canonical: float = 0.5) -> list[int]:
    """A reading order of positions ``1..T``.

    With probability ``p_canonical`` the left-to-right order is returned,
    otherwise a uniformly random permutation (which may itself be canonical).
    """
    use_canonical = rng.random() < p_canonical
    perm = rng.permutation(T) + 1
    if use_canonical:
        return list(range(1, T + 1))
    return [int(k) for k in perm]


def context_mask(perm: list[int], L: int) -> np.ndarray:
    """Boolean ``L x L`` visibility: row ``t-1`` (step t) may attend context ``j``.

    Character steps follow ``perm``; the ``<eos>`` step ``N+1`` sees ``0..N``;
    steps past it fall back to the causal rule.
    """
    allow = np.tril(np.ones((L, L), dtype=bool))  # step t sees j <= t-1
    seen = [0]
    for k in perm:
        row = np.zeros(L, dtype=bool)
        row[seen] = True
        allow[k - 1] = row
        seen.append(k)
    return allow


def previous_index(perm: list[int], L: int) -> np.ndarray:
    """Context index feeding each step for the limited-context variants."""
    prev = np.arange(L)  # step t reads c_{t-1}
    before = 0
    for k in perm:
        prev[k - 1] = before
        before = k
    N = len(perm)
    if N + 1 <= L:
        prev[N] = before
    return prev


@dataclass
class PDOutput:
    rec_logits: torch.Tensor
    side_logits: torch.Tensor | None = None
    attn: list[AttnRecord] = field(default_factory=list)


class ARBlock(nn.Module):
    """Pre-norm decoder block for the query stream: context attention (optional), visual attention, MLP."""

    def __init__(self, dim, heads, mlp_ratio, with_context: bool, generator=None):
        super().__init__()
        if with_context:
            self.norm_ctx_q = LayerNorm(dim)
            self.norm_ctx = LayerNorm(dim)
            self.ctx_attn = MultiHeadAttention(dim, heads, generator=generator)
        else:
            self.ctx_attn = None
        self.cross = CrossAttentionBlock(dim, heads, mlp_ratio, generator=generator)

    def forward(self, q, ctx, mem_kv, mask=None):
        ctx_probs = None
        if self.ctx_attn is not None:
            c = self.norm_ctx(ctx)
            a, ctx_probs = self.ctx_attn(self.norm_ctx_q(q), c, c, mask=mask)
            q = q + a
        q, mem_probs = self.cross(q, None, kv=mem_kv)
        return q, ctx_probs, mem_probs


class ARModel(nn.Module):
    def __init__(self, cfg: ModelConfig, enc_gen=None, dec_gen=None):
        super().__init__()
        self.cfg = cfg
        self.kind = VariantKind(cfg.variant)
        if not self.kind.autoregressive:
            raise ValueError(f"{cfg.variant} is not an autoregressive variant")
        self.encoder = Encoder(cfg.encoder_config(), generator=enc_gen)
        D, L = cfg.D, cfg.L
        self.bos_id = cfg.V
        self.tok = nn.Parameter(trunc_normal_init((cfg.V + 1, D), generator=dec_gen))
        self.pos_ctx = nn.Parameter(trunc_normal_init((L, D), generator=dec_gen))
        self.pos_q = nn.Parameter(trunc_normal_init((L, D), generator=dec_gen))
        self.blocks = nn.ModuleList(
            ARBlock(D, cfg.heads, cfg.mlp_ratio, not self.kind.limited, dec_gen) for _ in range(cfg.dec_depth))
        self.head = Head(D, cfg.V, dec_gen)

    def context_tokens(self, rec_slots: torch.Tensor) -> torch.Tensor:
        """Shifted targets ``[BOS, y_1, ..., y_{L-1}]``."""
        bos = torch.full_like(rec_slots[:, :1], self.bos_id)
        return torch.cat([bos, rec_slots[:, :-1]], dim=1)

    def embed_context(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.tok[tokens] + self.pos_ctx[: tokens.shape[1]]

    def _run(self, q, ctx, mem_kvs, mask, records=None):
        for i, blk in enumerate(self.blocks):
            q, ctx_probs, mem_probs = blk(q, ctx, mem_kvs[i], mask)
            if records is not None:
                if ctx_probs is not None:
                    records.append(AttnRecord(ctx_probs.detach(), i, "ctx"))
                records.append(AttnRecord(mem_probs.detach(), i, "mem"))
        return self.head(q)

    def memory(self, images):
        F_v = self.encoder(images)
        return [blk.cross.memory_kv(F_v) for blk in self.blocks]

    def train_forward(self, images, rec_slots, perms: list[list[int]] | None = None, records=None):
        """Teacher-forced logits ``B x L x V``; ``perms`` gives one reading order per sample (1-based)."""
        rec_slots = torch.as_tensor(rec_slots).long()
        B, L = rec_slots.shape
        if L != self.cfg.L:
            raise ValueError(f"labels have {L} slots, model expects {self.cfg.L}")
        mem_kvs = self.memory(images)
        ctx = self.embed_context(self.context_tokens(rec_slots))
        if perms is None:
            lengths = (rec_slots < self.cfg.S).sum(1).tolist()
            perms = [list(range(1, n + 1)) for n in lengths]
        if self.kind.limited:
            prev = torch.as_tensor(np.stack([previous_index(p, L) for p in perms]))
            q = torch.gather(ctx, 1, prev.unsqueeze(-1).expand(-1, -1, ctx.shape[-1])) + self.pos_q
            return self._run(q, None, mem_kvs, None, records)
        allow = torch.as_tensor(np.stack([context_mask(p, L) for p in perms]))
        mask = torch.zeros(allow.shape, dtype=ctx.dtype).masked_fill(~allow, float("-inf"))
        q = self.pos_q.expand(B, -1, -1)
        return self._run(q, ctx, mem_kvs, mask, records)

    def loss(self, images, targets, rng: np.random.Generator | None = None):
        slots = torch.as_tensor(targets["rec"]).long()
        perms = None
        if self.kind.permuted:
            if rng is None:
                raise ValueError("permuted variants need an rng for training")
            perms = [sample_permutation(int(n), rng) for n in targets["lengths"]]
        logits = self.train_forward(images, slots, perms)
        rec = ar_nll_from_logits(logits, slots, self.cfg.charset.pad_id)
        return total_loss(rec=rec, lambda_rec=self.cfg.lambda_rec)

    @torch.no_grad()
    def greedy_ids(self, images, max_len: int | None = None, fixed_steps: int | None = None,
                   records: list | None = None) -> torch.Tensor:
        """Left-to-right argmax decoding; returns ``B x steps`` class ids.

        Stops once every sample has emitted ``<eos>`` or after ``max_len`` steps.
        ``fixed_steps`` runs exactly that many steps regardless of ``<eos>``
        (used to time a given emitted length).
        """
        L = self.cfg.L
        steps = min(max_len or L, L) if fixed_steps is None else fixed_steps
        if steps > L:
            raise ValueError(f"cannot decode {steps} steps with capacity {L}")
        mem_kvs = self.memory(images)
        B = mem_kvs[0][0].shape[0]
        eos = self.cfg.charset.eos_id
        tokens = torch.full((B, 1), self.bos_id, dtype=torch.long)
        done = torch.zeros(B, dtype=torch.bool)
        out = []
        for t in range(1, steps + 1):
            ctx = self.embed_context(tokens)
            if self.kind.limited:
                q = (ctx[:, t - 1] + self.pos_q[t - 1]).unsqueeze(1)
                logits = self._run(q, None, mem_kvs, None, records)
            else:
                q = self.pos_q[t - 1].expand(B, 1, -1)
                logits = self._run(q, ctx, mem_kvs, None, records)
            nxt = logits[:, 0].argmax(-1)
            out.append(nxt)
            tokens = torch.cat([tokens, nxt.unsqueeze(1)], dim=1)
            done |= nxt == eos
            if fixed_steps is None and bool(done.all()):
                break
        return torch.stack(out, dim=1)

    def predict(self, images, max_len: int | None = None) -> list[str]:
        ids = self.greedy_ids(images, max_len=max_len)
        return [decode_ids(row, self.cfg.charset) for row in ids.tolist()]


class PDModel(nn.Module):
    def __init__(self, cfg: ModelConfig, enc_gen=None, dec_gen=None):
        super().__init__()
        self.cfg = cfg
        self.kind = VariantKind(cfg.variant)
        if self.kind not in (VariantKind.PD, VariantKind.PD_P):
            raise ValueError(f"{cfg.variant} is not a parallel variant")
        self.encoder = Encoder(cfg.encoder_config(), generator=enc_gen)
        self.pos = nn.Parameter(trunc_normal_init((cfg.L, cfg.D), generator=dec_gen))
        self.blocks = nn.ModuleList(
            CrossAttentionBlock(cfg.D, cfg.heads, cfg.mlp_ratio, generator=dec_gen) for _ in range(cfg.dec_depth))
        self.head = Head(cfg.D, cfg.V, dec_gen)
        self.side_head = Head(cfg.D, cfg.V, dec_gen) if self.kind is VariantKind.PD_P else None

    def forward(self, images, record: bool = False, side_heads: bool = True) -> PDOutput:
        records = [] if record else None
        F_v = self.encoder(images)
        x = self.pos.expand(F_v.shape[0], -1, -1)
        side = None
        for i, blk in enumerate(self.blocks):
            x, probs = blk(x, F_v)
            if records is not None:
                records.append(AttnRecord(probs.detach(), i, "pd"))
            if i == 0 and side_heads and self.side_head is not None:
                side = self.side_head(x)
        return PDOutput(self.head(x), side, records or [])

    def loss(self, images, targets, rng=None):
        out = self(images)
        rec = rec_loss_from_logits(out.rec_logits, targets["rec"])
        side = rec_loss_from_logits(out.side_logits, targets["rec"]) if out.side_logits is not None else None
        return total_loss(rec=rec, side=side, lambda_rec=self.cfg.lambda_rec, lambda_side=self.cfg.lambda_side)

    @torch.no_grad()
    def predict(self, images) -> list[str]:
        ids = self(images, side_heads=False).rec_logits.argmax(-1)
        return [decode_ids(row, self.cfg.charset) for row in ids.tolist()]


def generators(seed: int) -> tuple[torch.Generator, torch.Generator]:
    """Independent init streams for the encoder and the decoder.

    The encoder stream depends only on ``seed``, so every variant built with
    the same seed starts from bit-identical encoder weights.
    """
    enc = torch.Generator().manual_seed(seed * 2 + 0)
    dec = torch.Generator().manual_seed(seed * 2 + 1)
    return enc, dec


def build_model(cfg: ModelConfig, seed: int = 0) -> nn.Module:
    enc, dec = generators(seed)
    kind = VariantKind(cfg.variant)
    if kind is VariantKind.CPPD:
        return CPPDModel(cfg, enc, dec)
    if kind.autoregressive:
        return ARModel(cfg, enc, dec)
    return PDModel(cfg, enc, dec)
