"""Attention maps as grayscale PGM files.

One file per (branch, layer, head, query row), named
``attn_<branch>_L<layer>_H<head>_Q<row>.pgm``. Keys that are visual tokens
are laid out on the ``(H/16) x (W/4)`` patch grid; other keys (the AR context
stream) become a single-row strip. Each map is min-max normalized to 0..255.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import VariantKind
from .encoder import PATCH_H, PATCH_W
from .io_utils import atomic_write_bytes
from .synthgen import encode_pgm
from .vocab import batch_targets, decode_ids


@dataclass
class AttnMap:
    branch: str
    layer: int
    head: int
    row: int
    image: np.ndarray  # 2-D float

    @property
    def filename(self) -> str:
        return f"attn_{self.branch}_L{self.layer}_H{self.head}_Q{self.row}.pgm"


def normalize(a: np.ndarray) -> np.ndarray:
    """Min-max to uint8; a constant map becomes all zeros."""
    lo, hi = float(a.min()), float(a.max())
    if hi - lo <= 0:
        return np.zeros(a.shape, dtype=np.uint8)
    return np.round((a - lo) / (hi - lo) * 255.0).astype(np.uint8)


def _records(model, image: torch.Tensor):
    kind = VariantKind(model.cfg.variant)
    with torch.no_grad():
        if kind.autoregressive:
            ids = model.greedy_ids(image)
            text = decode_ids(ids[0].tolist(), model.cfg.charset)
            slots = torch.from_numpy(batch_targets([text], model.cfg.charset, model.cfg.L)["rec"])
            records = []
            model.train_forward(image, slots, records=records)
            return records
        return model(image, record=True, side_heads=False).attn


def attention_maps(model, image: np.ndarray) -> list[AttnMap]:
    """Run ``model`` on one ``H x W`` image and collect every recorded attention row."""
    cfg = model.cfg
    gh, gw = cfg.H // PATCH_H, cfg.W // PATCH_W
    Tv = gh * gw
    model.eval()
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))[None]
    maps = []
    for rec in _records(model, x):
        probs = rec.weights[0].double().numpy()  # heads x Tq x Tk
        Tq, Tk = probs.shape[1:]
        if rec.branch in ("cc", "co"):
            rows = range(Tv, Tq)  # query embeddings follow the visual tokens
            visual = True
        else:
            rows = range(Tq)
            visual = rec.branch != "ctx"
        for h in range(probs.shape[0]):
            for r in rows:
                if visual:
                    img = probs[h, r, :Tv].reshape(gh, gw)
                else:
                    img = probs[h, r, :Tk].reshape(1, Tk)
                maps.append(AttnMap(rec.branch, rec.layer, h, r - (Tv if rec.branch in ("cc", "co") else 0), img))
    return maps


def dump_attention(model, image: np.ndarray, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for m in attention_maps(model, image):
        p = out / m.filename
        atomic_write_bytes(p, encode_pgm(normalize(m.image)))
        paths.append(p)
    return paths
