"""One test per acceptance criterion; each prints a ``CRITERION n PASS/FAIL`` line.

Criteria 5 and 6 train real models and take tens of minutes on one CPU core.
"""
import copy
import statistics
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import torch

from cppd.bench import bench_lengths, length_images
from cppd.checkpoint import load_checkpoint
from cppd.config import Config, EncoderSection, ModelConfig, ModelSection, TrainConfig, load_config
from cppd.gradcheck import check_losses, check_tiny_cppd
from cppd.losses import ace_loss, ar_nll, cc_loss, co_loss, rec_loss
from cppd.synthgen import AugmentConfig, build_atlas, make_sample
from cppd.train import ArrayDataset, evaluate, train_model
from cppd.variants import build_model
from cppd.vocab import ALNUM36, build_charset, encode_all
from oracles import naive_ace, naive_ar, naive_cc, naive_co, naive_rec, rand_rows, random_instance, rel

DESK_CFG = Path(__file__).parent.parent / "configs" / "desk.cfg"
HEX = build_charset("0123456789abcdef")
HARD = AugmentConfig(p_rotate=1.0, p_blur=1.0, p_noise=1.0)
f64 = torch.float64


def records(n, seed, aug=None, charset=HEX, len_max=11):
    atlas = build_atlas(charset)
    return ArrayDataset.from_records([make_sample(i, seed, charset, atlas, 1, len_max, 32, 100, aug)
                                      for i in range(n)])


# 1. label oracles

def test_criterion_1_labels_arteta(criterion):
    t0 = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "cppd.cli", "labels", "arteta"], capture_output=True,
                          text=True, timeout=30)
    secs = time.perf_counter() - t0
    expected = ["CC a:2 e:1 r:1 t:2", "CO 111111 0*19", "REC a r t e t a <eos> <pad>*18",
                "ACE a:2/25 e:1/25 r:1/25 t:2/25 <pad>:19/25"]
    cs = build_charset(ALNUM36)
    b = encode_all("arteta", cs, 25)
    counts = {s: b.cc.counts[cs.index(s)] for s in ALNUM36}
    ok_struct = (counts == {s: {"a": 2, "e": 1, "r": 1, "t": 2}.get(s, 0) for s in ALNUM36}
                 and list(b.co.mask) == [1] * 6 + [0] * 19
                 and list(b.rec.slots) == [cs.index(c) for c in "arteta"] + [cs.eos_id] + [cs.pad_id] * 18
                 and sum(b.ace.weights) == 1)
    ok = proc.returncode == 0 and proc.stdout.splitlines() == expected and ok_struct and secs < 1.0
    criterion(1, ok, f"labels arteta exact={proc.stdout.splitlines() == expected} structure={ok_struct} "
                     f"runtime={secs:.2f}s (<1s)")


# 2. loss formula oracles

def test_criterion_2_loss_oracles(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        cs, L, text = random_instance(rng)
        b = encode_all(text, cs, L)
        P = rand_rows(rng, cs.S, L + 1)
        worst = max(worst, rel(float(cc_loss(torch.tensor(P, dtype=f64), torch.tensor(b.cc.counts))),
                               naive_cc(P, b.cc.counts)))
        Pa = rand_rows(rng, L, cs.S + 1)
        w = [float(x) for x in b.ace.weights]
        got = float(ace_loss(torch.tensor(Pa, dtype=f64), torch.tensor(w, dtype=f64)))
        worst = max(worst, abs(got - naive_ace(Pa, w)) / max(1.0, abs(got)))
        p = rng.random(L)
        worst = max(worst, rel(float(co_loss(torch.tensor(p, dtype=f64), torch.tensor(b.co.mask))),
                               naive_co(p, b.co.mask)))
        Pr = rand_rows(rng, L, cs.V)
        slots = torch.tensor(b.rec.slots)
        worst = max(worst, rel(float(rec_loss(torch.tensor(Pr, dtype=f64), slots)), naive_rec(Pr, b.rec.slots)))
        worst = max(worst, rel(float(ar_nll(torch.tensor(Pr, dtype=f64), slots, cs.pad_id)),
                               naive_ar(Pr, b.rec.slots, cs.pad_id)))
    secs = time.perf_counter() - t0
    criterion(2, worst <= 1e-10 and secs < 10, f"5 losses x 100 instances max rel err={worst:.2e} (<=1e-10) "
                                               f"runtime={secs:.2f}s (<10s)")


# 3. gradient checks

def test_criterion_3_gradient_checks(criterion):
    t0 = time.perf_counter()
    results = check_losses(instances=20, tol=1e-5)
    model = check_tiny_cppd(images=5, tol=1e-4)
    secs = time.perf_counter() - t0
    ok = all(r.passed for r in results) and model.passed and secs < 120
    worst = max(r.max_rel_err for r in results)
    criterion(3, ok, f"losses max rel err={worst:.2e} (<1e-5), tiny CPPD={model.max_rel_err:.2e} (<1e-4) "
                     f"runtime={secs:.1f}s (<120s)")


# 4. structural invariants

def _tiny(variant):
    return ModelConfig(symbols="abcdef", variant=variant, L=6, H=16, W=16, D=8, heads=2, mlp_ratio=2.0,
                       enc_depth=1, dec_depth=2)


def _images(n, seed):
    return torch.tensor(np.random.default_rng(seed).random((n, 16, 16)), dtype=f64)


def _ar_perturbation_failures(variant):
    """Count cases where step-t logits react to tokens they must not see (or ignore ones they must)."""
    m = build_model(_tiny(variant), 1).double().eval()
    canon = [list(range(1, 7))]
    rng = np.random.default_rng(77)
    failures = 0
    with torch.no_grad():
        for case in range(20):
            x = _images(1, 100 + case)
            slots = torch.tensor(rng.integers(0, 8, size=(1, 6)))
            t = int(rng.integers(1, 7))
            base = m.train_forward(x, slots, perms=canon)[0, t - 1]
            if variant == "ar":
                # step t may read y_0..y_{t-1}; everything from slot t on is hidden
                changed = slots.clone()
                changed[0, t - 1:] = torch.tensor(rng.integers(0, 8, size=7 - t))
            else:
                # step t may read only y_{t-1}
                changed = torch.tensor(rng.integers(0, 8, size=(1, 6)))
                if t > 1:
                    changed[0, t - 2] = slots[0, t - 2]
            failures += not torch.equal(m.train_forward(x, changed, perms=canon)[0, t - 1], base)
            if t > 1:
                seen = slots.clone()
                seen[0, t - 2] = (seen[0, t - 2] + 1) % 8
                failures += torch.equal(m.train_forward(x, seen, perms=canon)[0, t - 1], base)
    return failures


def test_criterion_4_structural_invariants(criterion):
    m = build_model(_tiny("cppd"), 0).double().eval()
    x = _images(3, 0)
    with torch.no_grad():
        before = m.encoder.calls
        out = m(x, record=True)
        calls = m.encoder.calls - before
        stripped = copy.deepcopy(m)
        stripped.cc_head = None
        stripped.co_head = None
        identical = torch.equal(stripped(x).rec_logits, out.rec_logits)
        records_all = list(out.attn)
        for v in ("ar", "ar-l", "pd", "pd-p"):
            mv = build_model(_tiny(v), 0).double().eval()
            if v.startswith("ar"):
                recs = []
                mv.train_forward(x, mv.greedy_ids(x, fixed_steps=6), records=recs)
                records_all += recs
            else:
                records_all += list(mv(x, record=True).attn)
    row_err = max(float((r.weights.sum(-1) - 1).abs().max()) for r in records_all)
    ar_fail = _ar_perturbation_failures("ar")
    arl_fail = _ar_perturbation_failures("ar-l")
    ok = calls == 1 and identical and ar_fail == 0 and arl_fail == 0 and row_err <= 1e-5
    criterion(4, ok, f"encoder calls={calls} rec_logits identical without cc/co heads={identical} "
                     f"AR mask failures={ar_fail}/20 AR-L failures={arl_fail}/20 "
                     f"max |row sum-1|={row_err:.1e} over {len(records_all)} maps")


# 5. desk-scale learning

def _desk_train(variant, train_data, val_data, out_dir, seed=0, sets=()):
    cfg = load_config(DESK_CFG, [f"model.variant={variant}", f"train.seed={seed}", *sets])
    torch.set_num_threads(1)
    model = build_model(cfg.model_config(HEX), seed)
    res = train_model(model, cfg, train_data, val_data, out_dir)
    return load_checkpoint(res.checkpoint), res


def test_criterion_5_desk_scale_learning(criterion, tmp_path):
    train_data = records(8000, 0)
    val_data = records(500, 2)
    test_data = records(1000, 1)
    t0 = time.perf_counter()
    cppd, _ = _desk_train("cppd", train_data, val_data, tmp_path / "cppd")
    t_cppd = time.perf_counter() - t0
    acc_cppd = evaluate(cppd, test_data)
    t0 = time.perf_counter()
    ar, _ = _desk_train("ar", train_data, val_data, tmp_path / "ar")
    t_ar = time.perf_counter() - t0
    acc_ar = evaluate(ar, test_data)
    ok = acc_cppd >= 0.98 and acc_ar >= 0.95
    criterion(5, ok, f"clean test word acc CPPD={acc_cppd:.4f} (>=0.98, {t_cppd / 60:.1f} min) "
                     f"AR={acc_ar:.4f} (>=0.95, {t_ar / 60:.1f} min), 30 epochs, 8k train")


# 6. ablation direction

# same data size and 30-epoch desk recipe as criterion 5, with training-time augmentation
ABLATION_TRAIN = 8000
ABLATION_ARMS = {
    "full": [],
    "pd": ["model.use_cc_module=false", "model.use_co_module=false"],
    "no-side": ["model.lambda_cc=0", "model.lambda_co=0"],
}


def test_criterion_6_ablation_direction(criterion, tmp_path):
    train_data = records(ABLATION_TRAIN, 11)
    val_data = records(200, 13, HARD)
    test_data = records(500, 12, HARD)
    sets = ["train.augment=true"]
    accs = {arm: [] for arm in ABLATION_ARMS}
    for seed in range(3):
        for arm, extra in ABLATION_ARMS.items():
            model, _ = _desk_train("cppd", train_data, val_data, tmp_path / f"{arm}{seed}", seed, sets + extra)
            accs[arm].append(evaluate(model, test_data))
    med = {arm: statistics.median(v) for arm, v in accs.items()}
    ok = med["full"] >= med["pd"] and med["full"] >= med["no-side"]
    detail = " ".join(f"{arm}={med[arm]:.3f}{[round(a, 3) for a in accs[arm]]}" for arm in ABLATION_ARMS)
    criterion(6, ok, f"hard-split median acc over 3 seeds: {detail}")


# 7. latency

BENCH_LENGTHS = (2, 8, 16, 24)


def test_criterion_7_latency(criterion):
    t0 = time.perf_counter()
    cs = build_charset(ALNUM36)
    models = {v: build_model(ModelConfig(symbols=ALNUM36, variant=v, L=25, H=32, W=100, D=64, heads=4,
                                         enc_depth=2, dec_depth=2), 0) for v in ("ar", "cppd")}
    imgs = length_images(cs, 32, 100, BENCH_LENGTHS, 300, seed=7)
    report = bench_lengths(models, imgs)
    print(report.format_table("ar", "cppd"))
    ar = [report.get("ar", n) for n in BENCH_LENGTHS]
    cp = [report.get("cppd", n) for n in BENCH_LENGTHS]
    mono = all(b.mean_ms >= a.mean_ms - max(a.std_ms, b.std_ms) for a, b in zip(ar, ar[1:]))
    spread = max(e.mean_ms for e in cp) / min(e.mean_ms for e in cp) - 1
    speedup = report.mean_over("ar") / report.mean_over("cppd")
    secs = time.perf_counter() - t0
    ok = mono and spread < 0.10 and speedup >= 3.0 and secs < 300
    criterion(7, ok, f"(a) AR nondecreasing={mono} {[round(e.mean_ms, 2) for e in ar]} ms "
                     f"(b) CPPD spread={spread:.1%} (<10%) (c) speedup={speedup:.2f}x (>=3) runtime={secs:.0f}s")


# 8. reproducibility

def _repro_cfg(variant):
    return Config(encoder=EncoderSection(H=32, W=100, depth=1),
                  model=ModelSection(variant=variant, L=12, D=32, heads=2, depth=2),
                  train=TrainConfig(epochs=2, warmup_epochs=1, batch_size=16, base_lr=2e-3, lr_ref_batch=16,
                                    augment=True, seed=5, log_every=1))


def test_criterion_8_reproducibility(criterion, tmp_path):
    train_data = records(96, 21)
    eval_data = records(32, 22)
    same = {}
    for variant in ("cppd", "ar-p"):
        runs = []
        for name in ("a", "b"):
            cfg = _repro_cfg(variant)
            torch.set_num_threads(1)
            res = train_model(build_model(cfg.model_config(HEX), 5), cfg, train_data, eval_data,
                              tmp_path / f"{variant}-{name}")
            metrics = [line.rsplit("\t", 1)[0] for line in res.metrics_path.read_text().splitlines()]
            runs.append((res.checkpoint.read_bytes(), Path(f"{res.checkpoint}.cfg").read_bytes(), metrics))
        same[variant] = runs[0] == runs[1]
    criterion(8, all(same.values()), f"bitwise-equal checkpoints and metric logs (minus ms_elapsed): {same}")
