"""Training loop, learning-rate schedule and word-accuracy evaluation."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .config import Config, ModelConfig
from .io_utils import atomic_write_text
from .synthgen import AugmentConfig, SampleRecord, augment, load_dataset, stack_images
from .vocab import CharSet, batch_targets, load_charset

log = logging.getLogger(__name__)

METRICS_HEADER = "# epoch\tstep\tloss_total\tloss_cc\tloss_co\tloss_rec\tloss_side\teval_acc\tms_elapsed"


class TrainingError(RuntimeError):
    pass


def lr_at(step: int, total_steps: int, warmup_steps: int, peak_lr: float) -> float:
    """Linear warm-up from 0 to ``peak_lr``, then cosine decay reaching 0 at ``total_steps``."""
    if total_steps <= 0:
        return 0.0
    if step < warmup_steps:
        return peak_lr * step / warmup_steps
    progress = min(1.0, (step - warmup_steps) / max(1, total_steps - warmup_steps))
    return peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class MetricsRecord:
    epoch: int
    step: int
    losses: dict[str, float] = field(default_factory=dict)
    eval_acc: float | None = None
    ms_elapsed: float = 0.0

    def line(self) -> str:
        def f(name):
            v = self.losses.get(name)
            return "-" if v is None else repr(v)

        acc = "-" if self.eval_acc is None else repr(self.eval_acc)
        return "\t".join([str(self.epoch), str(self.step), f("total"), f("cc"), f("co"), f("rec"), f("side"),
                          acc, f"{self.ms_elapsed:.1f}"])


@dataclass
class TrainResult:
    checkpoint: Path
    metrics_path: Path
    best_acc: float
    history: list[MetricsRecord]


@dataclass
class ArrayDataset:
    images: np.ndarray  # N x H x W float32
    texts: list[str]

    @classmethod
    def from_records(cls, records: list[SampleRecord]) -> "ArrayDataset":
        return cls(stack_images(records), [r.text for r in records])

    def __len__(self):
        return len(self.texts)


def predict_texts(model, images: np.ndarray, batch_size: int = 256) -> list[str]:
    model.eval()
    preds: list[str] = []
    with torch.no_grad():
        for i in range(0, len(images), batch_size):
            preds.extend(model.predict(torch.from_numpy(images[i:i + batch_size])))
    return preds


def word_accuracy(preds: list[str], labels: list[str]) -> float:
    if not labels:
        raise ValueError("empty eval set")
    if len(preds) != len(labels):
        raise ValueError(f"{len(preds)} predictions for {len(labels)} labels")
    return sum(p == t for p, t in zip(preds, labels)) / len(labels)


def evaluate(model, data: ArrayDataset | list[SampleRecord], batch_size: int = 256) -> float:
    """Exact full-string match rate under the model's own greedy decoding."""
    if isinstance(data, list):
        data = ArrayDataset.from_records(data)
    if len(data) == 0:
        raise ValueError("empty eval set")
    return word_accuracy(predict_texts(model, data.images, batch_size), data.texts)


def _check_dataset(data: ArrayDataset, cfg: ModelConfig, name: str) -> None:
    if len(data) and data.images.shape[1:] != (cfg.H, cfg.W):
        raise TrainingError(f"{name}: images are {data.images.shape[1:]}, model expects {(cfg.H, cfg.W)}")
    for t in data.texts:
        if len(t) > cfg.L - 1:
            raise TrainingError(f"{name}: label {t!r} longer than L-1={cfg.L - 1}")


def _param_groups(model, weight_decay: float):
    decay, no_decay = [], []
    for _, p in model.named_parameters():
        (decay if p.dim() >= 2 else no_decay).append(p)
    return [{"params": decay, "weight_decay": weight_decay}, {"params": no_decay, "weight_decay": 0.0}]


def train_model(model, cfg: Config, train_data: ArrayDataset, eval_data: ArrayDataset, out_dir,
                augment_cfg: AugmentConfig | None = None) -> TrainResult:
    """Train ``model`` in place; the best checkpoint by eval accuracy lands in ``out_dir/model.ckpt``."""
    tc = cfg.train
    mcfg: ModelConfig = model.cfg
    charset: CharSet = mcfg.charset
    _check_dataset(train_data, mcfg, "train set")
    _check_dataset(eval_data, mcfg, "eval set")
    if len(eval_data) == 0:
        raise TrainingError("empty eval set")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "model.ckpt"
    metrics_path = out / "metrics.tsv"

    targets = batch_targets(train_data.texts, charset, mcfg.L)
    n = len(train_data)
    steps_per_epoch = math.ceil(n / tc.batch_size) if n else 0
    total_steps = steps_per_epoch * tc.epochs
    warmup_steps = steps_per_epoch * tc.warmup_epochs
    opt = torch.optim.AdamW(_param_groups(model, tc.weight_decay), lr=0.0, betas=(tc.beta1, tc.beta2),
                            eps=tc.adam_eps)
    aug = (augment_cfg or AugmentConfig()) if tc.augment else None

    history: list[MetricsRecord] = []
    lines = [METRICS_HEADER]
    best_acc = -1.0
    t0 = time.perf_counter()
    step = 0
    if tc.epochs == 0 or n == 0:
        save_checkpoint(model, ckpt)
    for epoch in range(tc.epochs):
        model.train()
        order = np.random.default_rng([tc.seed, epoch]).permutation(n)
        for b in range(steps_per_epoch):
            idx = order[b * tc.batch_size:(b + 1) * tc.batch_size]
            batch_rng = np.random.default_rng([tc.seed, epoch, b])
            imgs = train_data.images[idx]
            if aug is not None:
                imgs = np.stack([augment(im, batch_rng, aug) for im in imgs])
            batch_t = {k: torch.from_numpy(v[idx]) for k, v in targets.items()}
            for g in opt.param_groups:
                g["lr"] = lr_at(step, total_steps, warmup_steps, tc.peak_lr)
            lv = model.loss(torch.from_numpy(imgs), batch_t, rng=batch_rng)
            if not torch.isfinite(lv.total):
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step}: {lv.breakdown()}")
            opt.zero_grad(set_to_none=True)
            lv.total.backward()
            if tc.grad_clip > 0:
                torch.nn.utils.clip_grad_norm_(model.parameters(), tc.grad_clip)
            opt.step()
            step += 1
            if step % tc.log_every == 0:
                rec = MetricsRecord(epoch, step, {"total": float(lv.total.detach()), **lv.breakdown()},
                                    ms_elapsed=(time.perf_counter() - t0) * 1000)
                history.append(rec)
                lines.append(rec.line())
        if (epoch + 1) % tc.eval_every == 0 or epoch + 1 == tc.epochs:
            acc = evaluate(model, eval_data)
            rec = MetricsRecord(epoch, step, eval_acc=acc, ms_elapsed=(time.perf_counter() - t0) * 1000)
            history.append(rec)
            lines.append(rec.line())
            log.info("epoch %d step %d eval_acc %.4f", epoch, step, acc)
            if acc > best_acc:
                best_acc = acc
                save_checkpoint(model, ckpt)
        atomic_write_text(metrics_path, "\n".join(lines) + "\n")
    if tc.epochs == 0 or n == 0:
        atomic_write_text(metrics_path, "\n".join(lines) + "\n")
    return TrainResult(ckpt, metrics_path, best_acc, history)


def train(cfg: Config, train_dir, eval_dir, out_dir, augment_cfg: AugmentConfig | None = None) -> TrainResult:
    from .variants import build_model

    charset = load_charset(Path(train_dir) / "charset.txt")
    mcfg = cfg.model_config(charset)
    train_data = ArrayDataset.from_records(load_dataset(train_dir, charset))
    eval_data = ArrayDataset.from_records(load_dataset(eval_dir, charset))
    torch.set_num_threads(1)
    model = build_model(mcfg, cfg.train.seed)
    result = train_model(model, cfg, train_data, eval_data, out_dir, augment_cfg)
    return result
