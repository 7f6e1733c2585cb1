"""Naive scalar-loop loss references, written straight from the definitions."""

import math

from cppd.vocab import build_charset


def naive_cc(P, counts):
    S = len(counts)
    s = 0.0
    for c in range(S):
        s += math.log(P[c][counts[c]])
    return -s / S


def naive_ace(P, w):
    L, C = len(P), len(P[0])
    s = 0.0
    for c in range(C):
        agg = 0.0
        for l in range(L):
            agg += P[l][c]
        if w[c] > 0:
            s += w[c] * math.log(agg / L)
    return -s


def naive_co(p, y):
    s = 0.0
    for l in range(len(p)):
        q = min(max(p[l], 1e-7), 1 - 1e-7)
        s += y[l] * math.log(q) + (1 - y[l]) * math.log(1 - q)
    return -s / len(p)


def naive_rec(P, slots):
    s = 0.0
    for l in range(len(slots)):
        s += math.log(P[l][slots[l]])
    return -s / len(slots)


def naive_ar(P, slots, pad_id):
    prod = 1.0
    steps = 0
    for l in range(len(slots)):
        if slots[l] == pad_id:
            continue
        prod *= P[l][slots[l]]
        steps += 1
    return -math.log(prod) / steps


def rand_rows(rng, n, m):
    x = rng.random((n, m)) + 0.05
    return x / x.sum(1, keepdims=True)


def rel(a, b):
    return abs(a - b) / max(abs(b), 1e-300)


def random_instance(rng):
    S = int(rng.integers(1, 9))
    L = int(rng.integers(2, 7))
    cs = build_charset("abcdefgh"[:S])
    n = int(rng.integers(0, L))
    text = "".join(rng.choice(list(cs.symbols), n))
    return cs, L, text
