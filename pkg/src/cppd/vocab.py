"""Character alphabet and supervision targets.

Every target is built from a plain label string and a slot capacity ``L``:

* counting (CC): per-symbol occurrence counts, classes ``0..L``
* ordering (CO): content-free occupancy mask over slots ``1..L``
* recognition (REC): ``L`` slot ids, ``<eos>`` after the text, ``<pad>`` after that
* ACE: aggregated class fractions over symbols plus a pad class
"""
from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Sequence

import numpy as np

EOS_TOKEN = "<eos>"
PAD_TOKEN = "<pad>"

ALNUM36 = tuple(string.digits + string.ascii_lowercase)


class LabelError(ValueError):
    """A label string cannot be encoded under the given charset / capacity."""


@dataclass(frozen=True)
class CharSet:
    symbols: tuple[str, ...]
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        index = {}
        for i, s in enumerate(self.symbols):
            if s in (EOS_TOKEN, PAD_TOKEN):
                raise LabelError(f"reserved marker {s!r} cannot be a symbol")
            if s in index:
                raise LabelError(f"duplicate symbol {s!r}")
            index[s] = i
        object.__setattr__(self, "_index", index)

    @property
    def S(self) -> int:
        return len(self.symbols)

    @property
    def eos_id(self) -> int:
        return len(self.symbols)

    @property
    def pad_id(self) -> int:
        return len(self.symbols) + 1

    @property
    def V(self) -> int:
        return len(self.symbols) + 2

    def index(self, symbol: str) -> int:
        try:
            return self._index[symbol]
        except KeyError:
            raise LabelError(f"unknown symbol {symbol!r}") from None

    def __contains__(self, symbol: str) -> bool:
        return symbol in self._index

    def token(self, class_id: int) -> str:
        if class_id == self.eos_id:
            return EOS_TOKEN
        if class_id == self.pad_id:
            return PAD_TOKEN
        return self.symbols[class_id]


def build_charset(symbols: Iterable[str]) -> CharSet:
    symbols = tuple(symbols)
    if not symbols:
        raise LabelError("charset must contain at least one symbol")
    for s in symbols:
        if not isinstance(s, str) or len(s) != 1 or not s.isprintable() or s.isspace():
            raise LabelError(f"symbol {s!r} is not a single printable character")
    return CharSet(symbols)


def load_charset(path) -> CharSet:
    with open(path, encoding="utf-8") as fh:
        return build_charset(line.rstrip("\n") for line in fh if line.rstrip("\n"))


def save_charset_text(charset: CharSet) -> str:
    return "".join(s + "\n" for s in charset.symbols)


@dataclass(frozen=True)
class CCLabel:
    counts: tuple[int, ...]


@dataclass(frozen=True)
class COLabel:
    mask: tuple[int, ...]


@dataclass(frozen=True)
class RecLabel:
    slots: tuple[int, ...]


@dataclass(frozen=True)
class ACETarget:
    # symbols first, pad class last
    weights: tuple[Fraction, ...]


@dataclass(frozen=True)
class LabelBundle:
    text: str
    cc: CCLabel
    co: COLabel
    rec: RecLabel
    ace: ACETarget


def _check(text: str, charset: CharSet | None, L: int) -> None:
    if L < 1:
        raise LabelError(f"capacity L must be >= 1, got {L}")
    if len(text) > L - 1:
        raise LabelError(f"text of length {len(text)} exceeds capacity L-1={L - 1}")
    if charset is not None:
        for ch in text:
            charset.index(ch)


def encode_cc(text: str, charset: CharSet, L: int) -> CCLabel:
    _check(text, charset, L)
    tally = Counter(text)
    return CCLabel(tuple(tally.get(s, 0) for s in charset.symbols))


def encode_co(text: str, L: int) -> COLabel:
    _check(text, None, L)
    n = len(text)
    return COLabel(tuple(1 if slot < n else 0 for slot in range(L)))


def encode_rec(text: str, charset: CharSet, L: int) -> RecLabel:
    _check(text, charset, L)
    ids = [charset.index(ch) for ch in text]
    ids.append(charset.eos_id)
    ids.extend([charset.pad_id] * (L - len(ids)))
    return RecLabel(tuple(ids))


def encode_ace(text: str, charset: CharSet, L: int) -> ACETarget:
    counts = encode_cc(text, charset, L).counts
    weights = [Fraction(c, L) for c in counts]
    weights.append(Fraction(L - len(text), L))
    return ACETarget(tuple(weights))


def encode_all(text: str, charset: CharSet, L: int) -> LabelBundle:
    return LabelBundle(
        text=text,
        cc=encode_cc(text, charset, L),
        co=encode_co(text, L),
        rec=encode_rec(text, charset, L),
        ace=encode_ace(text, charset, L),
    )


def batch_targets(texts: Sequence[str], charset: CharSet, L: int) -> dict[str, np.ndarray]:
    """Stack per-sample targets into integer arrays (``cc``, ``co``, ``rec``, ``lengths``)."""
    cc = np.zeros((len(texts), charset.S), dtype=np.int64)
    co = np.zeros((len(texts), L), dtype=np.int64)
    rec = np.zeros((len(texts), L), dtype=np.int64)
    for i, t in enumerate(texts):
        cc[i] = encode_cc(t, charset, L).counts
        co[i] = encode_co(t, L).mask
        rec[i] = encode_rec(t, charset, L).slots
    lengths = np.array([len(t) for t in texts], dtype=np.int64)
    return {"cc": cc, "co": co, "rec": rec, "lengths": lengths}


def decode_greedy(rec_probs, charset: CharSet) -> str:
    """Per-slot argmax, stop at the first ``<eos>``; ``<pad>`` before it is skipped."""
    ids = np.asarray(rec_probs).argmax(axis=-1)
    return decode_ids(ids.tolist(), charset)


def decode_ids(ids: Sequence[int], charset: CharSet) -> str:
    out = []
    for i in ids:
        if i == charset.eos_id:
            break
        if i == charset.pad_id:
            continue
        out.append(charset.symbols[i])
    return "".join(out)


def _run_length(tokens: list[str]) -> list[str]:
    out: list[str] = []
    i = 0
    while i < len(tokens):
        j = i
        while j < len(tokens) and tokens[j] == tokens[i]:
            j += 1
        n = j - i
        if n > 1 and tokens[i] in (EOS_TOKEN, PAD_TOKEN):
            out.append(f"{tokens[i]}*{n}")
        else:
            out.extend(tokens[i:j])
        i = j
    return out


def dump_labels(text: str, charset: CharSet, L: int) -> list[str]:
    """Human-readable lines for all four target types of ``text``."""
    bundle = encode_all(text, charset, L)
    cc = " ".join(f"{s}:{c}" for s, c in zip(charset.symbols, bundle.cc.counts) if c)
    n = sum(bundle.co.mask)
    co = " ".join(p for p in ("1" * n, f"0*{L - n}" if L - n else "") if p)
    rec = " ".join(_run_length([charset.token(i) for i in bundle.rec.slots]))
    ace_parts = [
        f"{s}:{w.numerator * (L // w.denominator)}/{L}"
        for s, w in zip(charset.symbols, bundle.ace.weights[:-1])
        if w
    ]
    pad_w = bundle.ace.weights[-1]
    ace_parts.append(f"{PAD_TOKEN}:{pad_w.numerator * (L // pad_w.denominator)}/{L}")
    return [
        f"CC {cc}".rstrip(),
        f"CO {co}".rstrip(),
        f"REC {rec}",
        "ACE " + " ".join(ace_parts),
    ]
