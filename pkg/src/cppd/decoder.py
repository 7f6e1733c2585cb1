"""Context perception parallel decoder.

Data flow for one forward pass::

    image -> encoder -> F_v
    [F_v; E_cc] -> counting module  -> (F_cc, E_cc')  -> count head
    [F_v; E_co] -> ordering module  -> (F_co, E_co')  -> occupancy head
    cross-attention(query=E_co', key/value=F_cc) -> G -> recognition head

The count and occupancy heads only feed side losses; the recognition path
never reads their outputs.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
from torch import nn

from .config import ModelConfig, VariantKind
from .encoder import Encoder
from .losses import cc_loss_from_logits, co_loss_from_logits, rec_loss_from_logits, total_loss
from .nn_core import AttnRecord, CrossAttentionBlock, LayerNorm, Linear, SelfAttentionBlock, trunc_normal_init
from .vocab import decode_ids


@dataclass
class CPPDOutput:
    cc_logits: torch.Tensor | None  # B x S x (L+1)
    co_logits: torch.Tensor | None  # B x L
    rec_logits: torch.Tensor  # B x L x V
    attn: list[AttnRecord] = field(default_factory=list)


def init_embeddings(S: int, L: int, D: int, generator: torch.Generator | None = None):
    """Counting queries ``S x D`` and ordering queries ``L x D``, trunc-normal(0, 0.2)."""
    return trunc_normal_init((S, D), generator=generator), trunc_normal_init((L, D), generator=generator)


class CPPDBlock(nn.Module):
    """Concatenate visual tokens and queries, run one MHSA block, slice them apart again."""

    def __init__(self, dim, heads, mlp_ratio=4.0, generator=None):
        super().__init__()
        self.block = SelfAttentionBlock(dim, heads, mlp_ratio, generator=generator)

    def forward(self, E: torch.Tensor, F_vis: torch.Tensor):
        if E.shape[-1] != F_vis.shape[-1]:
            raise ValueError(f"cppd_block: query dim {E.shape[-1]} != visual dim {F_vis.shape[-1]}")
        Tv = F_vis.shape[-2]
        x, probs = self.block(torch.cat([F_vis, E], dim=-2))
        return x[..., Tv:, :], x[..., :Tv, :], probs


class ContextModule(nn.Module):
    """``depth`` chained CPPD blocks; used for both the counting and the ordering branch."""

    def __init__(self, dim, heads, depth, mlp_ratio=4.0, generator=None):
        super().__init__()
        self.blocks = nn.ModuleList(CPPDBlock(dim, heads, mlp_ratio, generator) for _ in range(depth))

    def forward(self, E, F_vis, records=None, branch=""):
        for i, blk in enumerate(self.blocks):
            E, F_vis, probs = blk(E, F_vis)
            if records is not None:
                records.append(AttnRecord(probs.detach(), i, branch))
        return E, F_vis


class Head(nn.Module):
    def __init__(self, dim, out, generator=None):
        super().__init__()
        self.norm = LayerNorm(dim)
        self.proj = Linear(dim, out, generator=generator)

    def forward(self, x):
        return self.proj(self.norm(x))


class CPPDModel(nn.Module):
    kind = VariantKind.CPPD

    def __init__(self, cfg: ModelConfig, enc_gen: torch.Generator | None = None,
                 dec_gen: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg.encoder_config(), generator=enc_gen)
        D, heads, r = cfg.D, cfg.heads, cfg.mlp_ratio
        E_cc, E_co = init_embeddings(cfg.S, cfg.L, D, generator=dec_gen)
        self.E_cc = nn.Parameter(E_cc)
        self.E_co = nn.Parameter(E_co)
        self.cc_module = ContextModule(D, heads, cfg.dec_depth, r, dec_gen) if cfg.use_cc_module else None
        self.co_module = ContextModule(D, heads, cfg.dec_depth, r, dec_gen) if cfg.use_co_module else None
        self.fuse_block = CrossAttentionBlock(D, heads, r, generator=dec_gen)
        self.cc_head = Head(D, cfg.L + 1, dec_gen) if cfg.use_cc_module else None
        self.co_head = Head(D, 1, dec_gen) if cfg.use_co_module else None
        self.rec_head = Head(D, cfg.V, dec_gen)

    def cc_branch(self, F_v, records=None):
        E = self.E_cc.expand(F_v.shape[0], -1, -1)
        if self.cc_module is None:
            return E, F_v
        return self.cc_module(E, F_v, records, "cc")

    def co_branch(self, F_v, records=None):
        E = self.E_co.expand(F_v.shape[0], -1, -1)
        if self.co_module is None:
            return E, F_v
        return self.co_module(E, F_v, records, "co")

    def fuse(self, E_co_hat, F_cc, records=None):
        G, probs = self.fuse_block(E_co_hat, F_cc)
        if records is not None:
            records.append(AttnRecord(probs.detach(), 0, "fuse"))
        return G

    def forward(self, images: torch.Tensor, record: bool = False, side_heads: bool = True) -> CPPDOutput:
        records = [] if record else None
        F_v = self.encoder(images)
        E_cc_hat, F_cc = self.cc_branch(F_v, records)
        E_co_hat, _F_co = self.co_branch(F_v, records)
        G = self.fuse(E_co_hat, F_cc, records)
        rec_logits = self.rec_head(G)
        cc_logits = co_logits = None
        if side_heads:
            if self.cc_head is not None:
                cc_logits = self.cc_head(E_cc_hat)
            if self.co_head is not None:
                co_logits = self.co_head(E_co_hat).squeeze(-1)
        return CPPDOutput(cc_logits, co_logits, rec_logits, records or [])

    def loss(self, images, targets, rng=None):
        out = self(images)
        cfg = self.cfg
        cc = cc_loss_from_logits(out.cc_logits, targets["cc"]) if out.cc_logits is not None else None
        co = co_loss_from_logits(out.co_logits, targets["co"]) if out.co_logits is not None else None
        rec = rec_loss_from_logits(out.rec_logits, targets["rec"])
        return total_loss(cc=cc, co=co, rec=rec, lambda_cc=cfg.lambda_cc, lambda_co=cfg.lambda_co,
                          lambda_rec=cfg.lambda_rec)

    @torch.no_grad()
    def predict(self, images) -> list[str]:
        ids = self(images, side_heads=False).rec_logits.argmax(-1)
        return [decode_ids(row, self.cfg.charset) for row in ids.tolist()]
