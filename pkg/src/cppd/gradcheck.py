"""Finite-difference checks of the losses and of a tiny end-to-end CPPD model.

Everything runs in float64. Loss checks differentiate with respect to the
logits that feed each loss (softmax for categorical inputs, sigmoid for the
occupancy probabilities), so the probability-space formulas are exercised.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .config import ModelConfig
from .losses import ace_loss, ar_nll, cc_loss, co_loss, rec_loss
from .nn_core import grad_check
from .vocab import batch_targets, encode_ace

LOSS_TOL = 1e-5
MODEL_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name} max_rel_err={self.max_rel_err:.3e} tol={self.tol:.0e}"


def _random_text(rng, symbols: str, n_max: int) -> str:
    n = int(rng.integers(0, n_max + 1))
    return "".join(rng.choice(list(symbols), n))


def loss_instance(name: str, rng: np.random.Generator) -> tuple[Callable[[], torch.Tensor], torch.Tensor]:
    """A random instance of one loss as ``(objective, logits)``; the objective reads ``logits``."""
    from .vocab import build_charset

    S = int(rng.integers(2, 9))
    L = int(rng.integers(2, 7))
    symbols = "abcdefgh"[:S]
    charset = build_charset(symbols)
    text = _random_text(rng, symbols, L - 1)
    tg = batch_targets([text], charset, L)
    f64 = torch.float64
    if name == "cc_loss":
        x = torch.tensor(rng.normal(size=(S, L + 1)), dtype=f64, requires_grad=True)
        counts = torch.from_numpy(tg["cc"][0])
        return (lambda: cc_loss(torch.softmax(x, -1), counts)), x
    if name == "ace_loss":
        x = torch.tensor(rng.normal(size=(L, S + 1)), dtype=f64, requires_grad=True)
        w = torch.tensor([float(f) for f in encode_ace(text, charset, L).weights], dtype=f64)
        return (lambda: ace_loss(torch.softmax(x, -1), w)), x
    if name == "co_loss":
        x = torch.tensor(rng.normal(size=L), dtype=f64, requires_grad=True)
        mask = torch.from_numpy(tg["co"][0])
        return (lambda: co_loss(torch.sigmoid(x), mask)), x
    if name == "rec_loss":
        x = torch.tensor(rng.normal(size=(L, S + 2)), dtype=f64, requires_grad=True)
        slots = torch.from_numpy(tg["rec"][0])
        return (lambda: rec_loss(torch.softmax(x, -1), slots)), x
    if name == "ar_nll":
        x = torch.tensor(rng.normal(size=(L, S + 2)), dtype=f64, requires_grad=True)
        slots = torch.from_numpy(tg["rec"][0])
        return (lambda: ar_nll(torch.softmax(x, -1), slots, charset.pad_id)), x
    raise KeyError(name)


LOSS_NAMES = ("cc_loss", "ace_loss", "co_loss", "rec_loss", "ar_nll")


def check_losses(instances: int = 20, seed: int = 0, tol: float = LOSS_TOL) -> list[CheckResult]:
    results = []
    for name in LOSS_NAMES:
        worst = 0.0
        for i in range(instances):
            fn, x = loss_instance(name, np.random.default_rng([seed, i, LOSS_NAMES.index(name)]))
            worst = max(worst, grad_check(fn, [x], eps=1e-5))
        results.append(CheckResult(name, worst, tol))
    return results


def tiny_cppd_config() -> ModelConfig:
    return ModelConfig(symbols="abcde", variant="cppd", L=4, H=16, W=16, D=8, heads=2, mlp_ratio=2.0,
                       enc_depth=1, dec_depth=2)


def check_tiny_cppd(images: int = 5, seed: int = 0, tol: float = MODEL_TOL,
                    max_coords: int = 6) -> CheckResult:
    """Full-objective gradients of a tiny CPPD wrt the image and a sample of every parameter tensor."""
    from .variants import build_model

    cfg = tiny_cppd_config()
    model = build_model(cfg, seed).double()
    params = [p for p in model.parameters()]
    worst = 0.0
    for i in range(images):
        rng = np.random.default_rng([seed, i])
        img = torch.tensor(rng.random((1, cfg.H, cfg.W)), dtype=torch.float64, requires_grad=True)
        text = _random_text(rng, cfg.symbols, cfg.L - 1)
        targets = {k: torch.from_numpy(v) for k, v in batch_targets([text], cfg.charset, cfg.L).items()}

        def fn():
            return model.loss(img, targets).total

        worst = max(worst, grad_check(fn, [img] + params, eps=1e-5, max_coords=max_coords, rng=rng))
    return CheckResult("tiny_cppd_end_to_end", worst, tol)
