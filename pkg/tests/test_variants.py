import itertools
from collections import Counter

import numpy as np
import pytest
import torch

from cppd.config import ModelConfig
from cppd.losses import ar_nll_from_logits, rec_loss_from_logits
from cppd.variants import ARModel, PDModel, build_model, context_mask, previous_index, sample_permutation
from cppd.vocab import batch_targets

f64 = torch.float64
SYMS = "abcdef"


def cfg(variant, **kw):
    base = dict(symbols=SYMS, variant=variant, L=6, H=16, W=16, D=8, heads=2, mlp_ratio=2.0, enc_depth=1,
                dec_depth=2)
    base.update(kw)
    return ModelConfig(**base)


def model(variant, seed=0, **kw):
    return build_model(cfg(variant, **kw), seed).double().eval()


def rand_images(n, seed=0):
    return torch.tensor(np.random.default_rng(seed).random((n, 16, 16)), dtype=f64)


def rand_slots(rng, n, L=6, V=8):
    return torch.tensor(rng.integers(0, V, size=(n, L)))


# permutations and masks

def test_sample_permutation_basics():
    rng = np.random.default_rng(0)
    assert sample_permutation(1, rng) == [1]
    for T in range(1, 8):
        for _ in range(20):
            assert sorted(sample_permutation(T, rng)) == list(range(1, T + 1))


def test_sample_permutation_frequencies():
    rng = np.random.default_rng(1)
    draws = [tuple(sample_permutation(3, rng, p_canonical=0.0)) for _ in range(10_000)]
    counts = Counter(draws)
    assert set(counts) == set(itertools.permutations([1, 2, 3]))
    for c in counts.values():
        assert abs(c - 10_000 / 6) <= 0.1 * 10_000 / 6
    mixed = [tuple(sample_permutation(3, rng)) for _ in range(10_000)]
    canon = sum(d == (1, 2, 3) for d in mixed) / 10_000
    assert abs(canon - (0.5 + 0.5 / 6)) < 0.02


def test_context_mask_canonical_is_causal():
    L = 6
    for N in range(L):
        assert np.array_equal(context_mask(list(range(1, N + 1)), L), np.tril(np.ones((L, L), bool)))
    assert np.array_equal(context_mask([1], L), context_mask([1], L))


def test_context_mask_permuted():
    allow = context_mask([2, 1], 4)
    assert allow[1].tolist() == [True, False, False, False]  # slot 2 is read first
    assert allow[0].tolist() == [True, False, True, False]  # slot 1 sees BOS and slot 2
    assert allow[2].tolist() == [True, True, True, False]  # <eos> step sees all characters


def test_previous_index():
    assert previous_index([1, 2, 3], 5).tolist() == [0, 1, 2, 3, 4]
    assert previous_index([2, 1], 4).tolist() == [2, 0, 1, 3]


# AR family structure

def _perturbation_cases(variant, check):
    m = model(variant, seed=1)
    rng = np.random.default_rng(7)
    for case in range(20):
        x = rand_images(1, seed=case)
        slots = rand_slots(rng, 1)
        t = int(rng.integers(1, 7))  # step being inspected (1-based)
        with torch.no_grad():
            base = m.train_forward(x, slots, perms=[list(range(1, 7))])[0, t - 1]
            check(m, x, slots, t, base, rng)


def test_ar_causal_mask_perturbation():
    def check(m, x, slots, t, base, rng):
        # context token j is y_j; step t may only read y_0..y_{t-1}, i.e. slots[:t-1]
        changed = slots.clone()
        changed[0, t - 1:] = torch.tensor(rng.integers(0, 8, size=6 - (t - 1)))
        out = m.train_forward(x, changed, perms=[list(range(1, 7))])[0, t - 1]
        assert torch.equal(out, base)
        if t > 1:
            earlier = slots.clone()
            earlier[0, t - 2] = (earlier[0, t - 2] + 1) % 8
            assert not torch.equal(m.train_forward(x, earlier, perms=[list(range(1, 7))])[0, t - 1], base)

    _perturbation_cases("ar", check)


def test_ar_l_context_restriction_perturbation():
    def check(m, x, slots, t, base, rng):
        changed = torch.tensor(rng.integers(0, 8, size=(1, 6)))
        if t > 1:
            changed[0, t - 2] = slots[0, t - 2]
        out = m.train_forward(x, changed, perms=[list(range(1, 7))])[0, t - 1]
        assert torch.equal(out, base)

    _perturbation_cases("ar-l", check)


def test_single_step_variants_agree():
    x = rand_images(2)
    slots = torch.tensor([[0, 6, 7, 7, 7, 7], [3, 6, 7, 7, 7, 7]])
    a = model("ar", seed=3)
    p = model("ar-p", seed=3)
    with torch.no_grad():
        assert torch.equal(a.train_forward(x, slots, perms=[[1], [1]]), p.train_forward(x, slots, perms=[[1], [1]]))
        assert torch.equal(a.train_forward(x, slots), a.train_forward(x, slots, perms=[[1], [1]]))
        al = model("ar-l", seed=3)
        alp = model("ar-l-p", seed=3)
        assert torch.equal(al.train_forward(x, slots, perms=[[1], [1]])[:, 0],
                           alp.train_forward(x, slots, perms=[[1], [1]])[:, 0])


@pytest.mark.parametrize("variant", ["ar", "ar-l"])
def test_ar_batched_matches_unbatched_step_oracle(variant):
    """Teacher-forced batch logits vs one query at a time with only the visible prefix present."""
    m = model(variant, seed=4)
    x = rand_images(2, seed=4)
    cs = m.cfg.charset
    tg = batch_targets(["abc", "f"], cs, 6)
    slots = torch.from_numpy(tg["rec"])
    with torch.no_grad():
        batched = m.train_forward(x, slots)
        loss = ar_nll_from_logits(batched, slots, cs.pad_id)
        per_sample = []
        for b in range(2):
            mem = m.memory(x[b:b + 1])
            ctx_all = m.embed_context(m.context_tokens(slots[b:b + 1]))
            steps = []
            for t in range(1, 7):
                if m.kind.limited:
                    q = (ctx_all[:, t - 1] + m.pos_q[t - 1]).unsqueeze(1)
                    steps.append(m._run(q, None, mem, None)[0, 0])
                else:
                    q = m.pos_q[t - 1].view(1, 1, -1)
                    steps.append(m._run(q, ctx_all[:, :t], mem, None)[0, 0])
            logits = torch.stack(steps)
            assert torch.allclose(logits, batched[b], atol=1e-5)
            per_sample.append(ar_nll_from_logits(logits[None], slots[b:b + 1], cs.pad_id))
    assert float(loss) == pytest.approx(float(sum(per_sample) / 2), abs=1e-5)


def test_greedy_all_eos_gives_empty():
    m = model("ar")
    with torch.no_grad():
        m.head.proj.weight.zero_()
        m.head.proj.bias.zero_()
        m.head.proj.bias[m.cfg.charset.eos_id] = 10.0
    assert m.predict(rand_images(3)) == ["", "", ""]


@pytest.mark.parametrize("variant", ["ar", "ar-p", "ar-l", "ar-l-p"])
def test_greedy_deterministic_and_self_consistent(variant):
    m = model(variant, seed=2)
    x = rand_images(4, seed=9)
    with torch.no_grad():
        ids = m.greedy_ids(x, fixed_steps=6)
        assert torch.equal(ids, m.greedy_ids(x, fixed_steps=6))
        tf = m.train_forward(x, ids).argmax(-1)
    assert torch.equal(tf, ids)


def test_fixed_steps_controls_length():
    m = model("ar")
    with torch.no_grad():
        assert m.greedy_ids(rand_images(1), fixed_steps=3).shape == (1, 3)
        with pytest.raises(ValueError):
            m.greedy_ids(rand_images(1), fixed_steps=7)


def test_permuted_loss_needs_rng():
    m = model("ar-p")
    tg = {k: torch.from_numpy(v) for k, v in batch_targets(["ab"], m.cfg.charset, 6).items()}
    with pytest.raises(ValueError):
        m.loss(rand_images(1), tg)
    assert torch.isfinite(m.loss(rand_images(1), tg, rng=np.random.default_rng(0)).total)


# parallel variants

def test_pd_forward_shapes_and_single_pass():
    m = model("pd")
    before = m.encoder.calls
    out = m(rand_images(3), record=True)
    assert out.rec_logits.shape == (3, 6, 8)
    assert m.encoder.calls - before == 1
    assert len(out.attn) == m.cfg.dec_depth
    for r in out.attn:
        assert torch.allclose(r.weights.sum(-1), torch.ones((), dtype=f64), atol=1e-5)


def test_pd_matches_naive_cross_attention_chain():
    m = model("pd", seed=6)
    x = rand_images(1)
    with torch.no_grad():
        F_v = m.encoder(x)
        q = m.pos[None]
        for blk in m.blocks:
            q, _ = blk(q, F_v)
        ref = m.head(q)
        assert torch.allclose(m(x).rec_logits, ref, atol=1e-6)


def test_pd_p_side_head():
    m = model("pd-p", seed=1)
    x = rand_images(2)
    out = m(x)
    assert out.side_logits.shape == out.rec_logits.shape
    plain = model("pd", seed=1)
    plain.load_state_dict({k: v for k, v in m.state_dict().items() if not k.startswith("side_head")})
    assert torch.equal(plain(x).rec_logits, out.rec_logits)
    assert plain.predict(x) == m.predict(x)
    tg = {k: torch.from_numpy(v) for k, v in batch_targets(["ab", "c"], m.cfg.charset, 6).items()}
    lv = m.loss(x, tg)
    manual = rec_loss_from_logits(out.rec_logits, tg["rec"]) + rec_loss_from_logits(out.side_logits, tg["rec"])
    assert lv.total.item() == pytest.approx(manual.item(), rel=1e-12)


def test_build_model_types():
    assert isinstance(build_model(cfg("ar-l-p"), 0), ARModel)
    assert isinstance(build_model(cfg("pd-p"), 0), PDModel)
