"""Procedural glyph text images and the on-disk dataset format.

Layout of a dataset directory::

    manifest.tsv        <id>\\t<text> per line
    charset.txt         one symbol per line
    images/<id>.pgm     binary PGM (P5), maxval 255
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .io_utils import atomic_write_bytes, atomic_write_text
from .vocab import CharSet, LabelError, load_charset, save_charset_text

log = logging.getLogger(__name__)

MAX_ATLAS_RETRIES = 64


class DatasetError(RuntimeError):
    pass


@dataclass(frozen=True)
class GlyphAtlas:
    glyph_h: int
    glyph_w: int
    bitmaps: np.ndarray  # S x glyph_h x glyph_w, uint8 in {0, 1}
    spacing: int = 1

    @property
    def pitch(self) -> int:
        return self.glyph_w + self.spacing


@dataclass
class SampleRecord:
    id: str
    text: str
    image: np.ndarray  # H x W float32 in [0, 1]


@dataclass(frozen=True)
class AugmentConfig:
    p_rotate: float = 0.5
    max_angle: float = 5.0
    p_blur: float = 0.5
    blur_width: int = 3
    p_noise: float = 0.5
    noise_sigma: float = 0.1
    # sample sigma uniformly in (0, noise_sigma] instead of using it as-is
    random_sigma: bool = True


NO_AUGMENT = AugmentConfig(p_rotate=0.0, p_blur=0.0, p_noise=0.0)


def _glyph(atlas_seed: int, index: int, attempt: int, h: int, w: int) -> np.ndarray:
    rng = np.random.default_rng([atlas_seed, index, attempt])
    while True:
        bits = (rng.random((h, w)) < 0.5).astype(np.uint8)
        if bits.any():
            return bits


def build_atlas(charset: CharSet, glyph_h: int = 12, glyph_w: int = 7, atlas_seed: int = 0,
                spacing: int = 1) -> GlyphAtlas:
    if glyph_h < 3 or glyph_w < 3:
        raise ValueError(f"glyph must be at least 3x3, got {glyph_h}x{glyph_w}")
    seen: set[bytes] = set()
    bitmaps = []
    for i in range(charset.S):
        for attempt in range(MAX_ATLAS_RETRIES):
            g = _glyph(atlas_seed, i, attempt, glyph_h, glyph_w)
            key = g.tobytes()
            if key not in seen:
                break
        else:
            raise RuntimeError(f"could not find a distinct glyph for symbol {charset.symbols[i]!r}")
        seen.add(key)
        bitmaps.append(g)
    return GlyphAtlas(glyph_h, glyph_w, np.stack(bitmaps), spacing)


def render(text: str, atlas: GlyphAtlas, H: int, W: int, charset: CharSet) -> np.ndarray:
    """Draw ``text`` left to right starting one spacing in, vertically centred."""
    img = np.zeros((H, W), dtype=np.float32)
    if not text:
        return img
    width = atlas.spacing + len(text) * atlas.pitch
    if width > W or atlas.glyph_h > H:
        raise ValueError(f"text {text!r} needs {width}x{atlas.glyph_h} px, image is {W}x{H}")
    top = (H - atlas.glyph_h) // 2
    x = atlas.spacing
    for ch in text:
        img[top:top + atlas.glyph_h, x:x + atlas.glyph_w] = atlas.bitmaps[charset.index(ch)]
        x += atlas.pitch
    return img


def max_text_len(atlas: GlyphAtlas, W: int) -> int:
    return (W - atlas.spacing) // atlas.pitch


def augment(image: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()) -> np.ndarray:
    # every draw happens unconditionally so the rng stream does not depend on branch outcomes
    u = rng.random(3)
    angle = rng.uniform(-cfg.max_angle, cfg.max_angle)
    sigma = rng.uniform(0.0, cfg.noise_sigma) if cfg.random_sigma else cfg.noise_sigma
    noise = rng.standard_normal(image.shape)

    out = image.astype(np.float32, copy=True)
    if u[0] < cfg.p_rotate:
        out = ndimage.rotate(out, angle, reshape=False, order=1, mode="constant", cval=0.0)
    if u[1] < cfg.p_blur and cfg.blur_width > 1:
        out = ndimage.uniform_filter1d(out, size=cfg.blur_width, axis=1, mode="constant")
    if u[2] < cfg.p_noise and sigma > 0:
        out = out + sigma * noise.astype(np.float32)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def quantize(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_pgm(image: np.ndarray) -> bytes:
    """Binary P5 bytes; float input is quantized with round(v * 255)."""
    data = image if image.dtype == np.uint8 else quantize(image)
    h, w = data.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def decode_pgm(raw: bytes, name: str = "<bytes>") -> np.ndarray:
    """Parse a binary P5 PGM with maxval 255 into float32 values in [0, 1]."""
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DatasetError(f"{name}: truncated PGM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte before the raster
    if fields[0] != b"P5":
        raise DatasetError(f"{name}: not a binary PGM (magic {fields[0]!r})")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise DatasetError(f"{name}: malformed PGM header") from None
    if maxval != 255:
        raise DatasetError(f"{name}: unsupported maxval {maxval}")
    body = raw[pos:pos + w * h]
    if len(body) != w * h:
        raise DatasetError(f"{name}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float32) / 255.0


def sample_text(rng: np.random.Generator, charset: CharSet, len_min: int, len_max: int) -> str:
    n = int(rng.integers(len_min, len_max + 1))
    return "".join(charset.symbols[i] for i in rng.integers(0, charset.S, size=n))


def make_sample(i: int, seed: int, charset: CharSet, atlas: GlyphAtlas, len_min: int, len_max: int,
                H: int, W: int, augment_cfg: AugmentConfig | None) -> SampleRecord:
    """Sample ``i`` of the stream defined by ``seed``; independent of every other index."""
    rng = np.random.default_rng([seed, i])
    text = sample_text(rng, charset, len_min, len_max)
    image = render(text, atlas, H, W, charset)
    if augment_cfg is not None:
        image = augment(image, rng, augment_cfg)
    return SampleRecord(f"{i:06d}", text, image)


def generate_dataset(n: int, charset: CharSet, len_min: int, len_max: int, H: int, W: int, seed: int,
                     augment_flag: bool, out_dir, atlas: GlyphAtlas | None = None,
                     augment_cfg: AugmentConfig | None = None) -> Path:
    """Write ``n`` samples to ``out_dir`` and return the manifest path."""
    if not 0 <= len_min <= len_max:
        raise ValueError(f"bad length range [{len_min}, {len_max}]")
    atlas = atlas or build_atlas(charset)
    if len_max > max_text_len(atlas, W):
        raise ValueError(f"len_max={len_max} does not fit width {W} (max {max_text_len(atlas, W)})")
    aug = (augment_cfg or AugmentConfig()) if augment_flag else None

    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetError(f"cannot create dataset directory {out}: {e}") from e
    if not os.access(out, os.W_OK):
        raise DatasetError(f"dataset directory {out} is not writable")

    lines = []
    for i in range(n):
        rec = make_sample(i, seed, charset, atlas, len_min, len_max, H, W, aug)
        atomic_write_bytes(out / "images" / f"{rec.id}.pgm", encode_pgm(rec.image))
        lines.append(f"{rec.id}\t{rec.text}\n")
    atomic_write_text(out / "charset.txt", save_charset_text(charset))
    manifest = out / "manifest.tsv"
    atomic_write_text(manifest, "".join(lines))
    log.info("wrote %d samples to %s", n, out)
    return manifest


def load_dataset(path, charset: CharSet | None = None) -> list[SampleRecord]:
    root = Path(path)
    manifest = root / "manifest.tsv"
    if not manifest.is_file():
        raise DatasetError(f"missing manifest: {manifest}")
    stored = load_charset(root / "charset.txt") if (root / "charset.txt").is_file() else None
    if charset is not None and stored is not None and stored.symbols != charset.symbols:
        raise DatasetError(f"{root}: dataset charset differs from the requested charset")
    cs = charset or stored
    if cs is None:
        raise DatasetError(f"{root}: no charset.txt and no charset given")

    records = []
    for lineno, line in enumerate(manifest.read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        try:
            sid, text = line.split("\t")
        except ValueError:
            raise DatasetError(f"{manifest}:{lineno}: expected '<id>\\t<text>'") from None
        for ch in text:
            if ch not in cs:
                raise DatasetError(f"sample {sid}: symbol {ch!r} not in charset")
        img_path = root / "images" / f"{sid}.pgm"
        try:
            raw = img_path.read_bytes()
        except FileNotFoundError:
            raise DatasetError(f"sample {sid}: missing image {img_path}") from None
        records.append(SampleRecord(sid, text, decode_pgm(raw, name=f"sample {sid}")))
    return records


def stack_images(records: list[SampleRecord]) -> np.ndarray:
    if not records:
        return np.zeros((0, 0, 0), dtype=np.float32)
    return np.stack([r.image for r in records]).astype(np.float32)


__all__ = [
    "AugmentConfig", "DatasetError", "GlyphAtlas", "LabelError", "NO_AUGMENT", "SampleRecord",
    "augment", "build_atlas", "decode_pgm", "encode_pgm", "generate_dataset", "load_dataset",
    "make_sample", "max_text_len", "render", "stack_images",
]
