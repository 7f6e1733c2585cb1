import itertools

import numpy as np
import pytest

from cppd.synthgen import (
    NO_AUGMENT, AugmentConfig, DatasetError, augment, build_atlas, decode_pgm, encode_pgm, generate_dataset,
    load_dataset, make_sample, max_text_len, render,
)
from cppd.vocab import build_charset, encode_all

HEX = build_charset("0123456789abcdef")


def test_atlas_deterministic():
    cs = build_charset("ab")
    a, b = build_atlas(cs, atlas_seed=7), build_atlas(cs, atlas_seed=7)
    assert np.array_equal(a.bitmaps, b.bitmaps)


def test_atlas_distinct_glyphs():
    atlas = build_atlas(HEX, glyph_h=7, glyph_w=5)
    for i, j in itertools.combinations(range(16), 2):
        assert not np.array_equal(atlas.bitmaps[i], atlas.bitmaps[j])


def test_atlas_single_symbol():
    assert build_atlas(build_charset("x")).bitmaps.shape[0] == 1


def test_atlas_glyph_depends_only_on_index():
    small = build_atlas(build_charset("ab"), atlas_seed=3)
    big = build_atlas(build_charset("abcd"), atlas_seed=3)
    assert np.array_equal(small.bitmaps, big.bitmaps[:2])


def test_render_examples():
    atlas = build_atlas(HEX)
    assert not render("", atlas, 32, 100, HEX).any()
    assert np.array_equal(render("a", atlas, 32, 100, HEX), render("a", atlas, 32, 100, HEX))
    assert (render("ab", atlas, 32, 100, HEX) != render("ba", atlas, 32, 100, HEX)).any()


def test_render_too_wide():
    atlas = build_atlas(HEX)
    with pytest.raises(ValueError):
        render("0" * (max_text_len(atlas, 100) + 1), atlas, 32, 100, HEX)


def test_augment_identity_and_determinism():
    img = render("abc", build_atlas(HEX), 32, 100, HEX)
    assert np.array_equal(augment(img, np.random.default_rng(0), NO_AUGMENT), img)
    a = augment(img, np.random.default_rng(5))
    b = augment(img, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_augment_noise_statistics():
    img = render("abc", build_atlas(HEX), 32, 100, HEX)
    cfg = AugmentConfig(p_rotate=0, p_blur=0, p_noise=1.0, noise_sigma=0.05, random_sigma=False)
    deltas = [np.abs(augment(img, np.random.default_rng(i), cfg) - img).mean() for i in range(100)]
    assert 0 < np.mean(deltas) < 0.1


def test_pgm_round_trip():
    img = np.random.default_rng(0).random((32, 100)).astype(np.float32)
    back = decode_pgm(encode_pgm(img))
    assert np.array_equal(back, np.round(img * 255) / np.float32(255))
    assert decode_pgm(encode_pgm(np.full((2, 2), 255, np.uint8)))[0, 0] == 1.0


def test_pgm_rejects_bad_magic():
    with pytest.raises(DatasetError):
        decode_pgm(b"P2\n1 1\n255\n0")


def test_generate_empty(tmp_path):
    m = generate_dataset(0, HEX, 1, 8, 32, 100, 0, False, tmp_path)
    assert m.read_text() == ""
    assert load_dataset(tmp_path) == []


def test_generate_load_round_trip(tmp_path):
    generate_dataset(20, HEX, 1, 11, 32, 100, 3, True, tmp_path)
    recs = load_dataset(tmp_path, HEX)
    assert len(recs) == 20
    for i, r in enumerate(recs):
        iso = make_sample(i, 3, HEX, build_atlas(HEX), 1, 11, 32, 100, AugmentConfig())
        assert r.text == iso.text
        assert encode_pgm(r.image) == encode_pgm(iso.image)
        encode_all(r.text, HEX, 12)  # every label is valid for L=12


def test_isolated_sample_matches_dataset(tmp_path):
    generate_dataset(43, HEX, 1, 8, 32, 100, 3, False, tmp_path)
    iso = make_sample(42, 3, HEX, build_atlas(HEX), 1, 8, 32, 100, None)
    raw = (tmp_path / "images" / f"{iso.id}.pgm").read_bytes()
    assert raw == encode_pgm(iso.image)


def test_length_distribution(tmp_path):
    generate_dataset(1000, HEX, 1, 8, 32, 100, 0, False, tmp_path)
    lengths = [len(r.text) for r in load_dataset(tmp_path)]
    assert abs(np.mean(lengths) - 4.5) <= 0.3


def test_missing_image_names_id(tmp_path):
    generate_dataset(3, HEX, 1, 4, 32, 100, 0, False, tmp_path)
    victim = sorted((tmp_path / "images").iterdir())[1]
    victim.unlink()
    with pytest.raises(DatasetError, match=victim.stem):
        load_dataset(tmp_path)


def test_charset_mismatch(tmp_path):
    generate_dataset(2, HEX, 1, 4, 32, 100, 0, False, tmp_path)
    with pytest.raises(DatasetError):
        load_dataset(tmp_path, build_charset("xyz"))
