from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .nn_core import AttnRecord, LayerNorm, SelfAttentionBlock, trunc_normal_init

PATCH_H, PATCH_W = 16, 4


@dataclass(frozen=True)
class EncoderConfig:
    H: int = 32
    W: int = 100
    D: int = 64
    depth: int = 2
    heads: int = 4
    mlp_ratio: float = 4.0
    channels: int = 1

    def __post_init__(self):
        if self.H % PATCH_H or self.W % PATCH_W:
            raise ValueError(f"image {self.H}x{self.W} must be divisible by {PATCH_H}x{PATCH_W}")
        if self.D % self.heads:
            raise ValueError(f"D={self.D} not divisible by heads={self.heads}")

    @property
    def grid(self) -> tuple[int, int]:
        return self.H // PATCH_H, self.W // PATCH_W

    @property
    def tokens(self) -> int:
        gh, gw = self.grid
        return gh * gw


class Encoder(nn.Module):
    """Patchify with a 16x4 kernel (= stride), add positions, mix with pre-norm MHSA blocks.

    ``calls`` counts forward invocations; decoders use it to prove a single
    encoder pass per image.
    """

    def __init__(self, cfg: EncoderConfig, generator: torch.Generator | None = None):
        super().__init__()
        self.cfg = cfg
        fan_in = cfg.channels * PATCH_H * PATCH_W
        bound = fan_in ** -0.5
        self.patch_weight = nn.Parameter(
            torch.empty(cfg.D, cfg.channels, PATCH_H, PATCH_W).uniform_(-bound, bound, generator=generator))
        self.patch_bias = nn.Parameter(torch.zeros(cfg.D))
        self.pos = nn.Parameter(trunc_normal_init((cfg.tokens, cfg.D), generator=generator))
        self.blocks = nn.ModuleList(
            SelfAttentionBlock(cfg.D, cfg.heads, cfg.mlp_ratio, generator=generator) for _ in range(cfg.depth))
        self.norm = LayerNorm(cfg.D)
        self.calls = 0

    def forward(self, images: torch.Tensor, records: list | None = None) -> torch.Tensor:
        """``B x H x W`` (or ``B x C x H x W``) images to ``B x T_v x D`` tokens, row-major over the grid."""
        self.calls += 1
        if images.dim() == 3:
            images = images.unsqueeze(1)
        cfg = self.cfg
        if tuple(images.shape[1:]) != (cfg.channels, cfg.H, cfg.W):
            raise ValueError(f"encoder expects (*, {cfg.channels}, {cfg.H}, {cfg.W}), got {tuple(images.shape)}")
        x = nn.functional.conv2d(images, self.patch_weight, self.patch_bias, stride=(PATCH_H, PATCH_W))
        x = x.flatten(2).transpose(1, 2) + self.pos
        for i, blk in enumerate(self.blocks):
            x, probs = blk(x)
            if records is not None:
                records.append(AttnRecord(probs.detach(), i, "enc"))
        return self.norm(x)
