"""SGD with momentum, the poly schedule and the deterministic training loop."""

from __future__ import annotations

import csv
import logging
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data.augment import TRAIN_SCALES, augment
from .data.synth import SampleRecord
from .errors import ConfigurationError, ConsistencyError, NumericalError, UsageError
from .losses import LossConfig, combined_loss
from .model import DFN, ModelConfig, Param
from .tensor import Tensor, backward

log = logging.getLogger(__name__)

LOG_HEADER = ("iter", "lr", "L", "l_s", "l_b", "seconds")


def derive_seed(seed: int, label: str) -> int:
    """Independent 64-bit seed for a named phase (init, batches, ...)."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, zlib.crc32(label.encode())])
    return int(ss.generate_state(2, np.uint32).view(np.uint64)[0])


@dataclass
class TrainConfig:
    max_iter: int = 2000
    batch_size: int = 4
    base_lr: float = 4e-3
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    loss: LossConfig = field(default_factory=LossConfig)
    scales: tuple[float, ...] = TRAIN_SCALES
    flip: bool = True
    seed: int = 0
    checkpoint_every: int = 0
    log_every: int = 10

    def __post_init__(self):
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.base_lr <= 0:
            raise ConfigurationError(f"base_lr must be positive, got {self.base_lr}")
        if self.power <= 0:
            raise ConfigurationError(f"power must be positive, got {self.power}")
        if self.batch_size < 1 or self.max_iter < 0:
            raise ConfigurationError("batch_size must be >= 1 and max_iter >= 0")
        self.scales = tuple(float(s) for s in self.scales)


@dataclass
class LogRecord:
    iter: int
    lr: float
    L: float
    l_s: float
    l_b: float
    seconds: float


@dataclass
class TrainLog:
    records: list[LogRecord] = field(default_factory=list)
    checkpoint: Path | None = None

    def write_csv(self, path, include_time: bool = False) -> None:
        """Write the log; wall time is left blank unless ``include_time``, keeping files reproducible."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_HEADER)
            for r in self.records:
                w.writerow([r.iter, repr(r.lr), repr(r.L), repr(r.l_s), repr(r.l_b), f"{r.seconds:.3f}" if include_time else ""])


def poly_lr(iter: int, max_iter: int, base_lr: float, power: float) -> float:
    if iter < 0 or iter > max_iter:
        raise UsageError(f"iter {iter} outside [0, {max_iter}]")
    if iter == max_iter:
        return 0.0
    return base_lr * (1.0 - iter / max_iter) ** power


def sgd_step(params: Iterable[Param], lr: float, momentum: float, weight_decay: float) -> None:
    """In-place momentum SGD with L2 weight decay; clears grads afterwards."""
    params = list(params)
    for p in params:
        if p.value.grad is None:
            raise ConsistencyError(f"parameter {p.name} has no gradient")
    for p in params:
        v = p.value.data
        g = p.value.grad + weight_decay * v
        p.momentum_buf = momentum * p.momentum_buf + g
        p.value.data = v - lr * p.momentum_buf
        p.value.grad = None


def make_batch(
    samples: Sequence[SampleRecord],
    it: int,
    cfg: TrainConfig,
    mean,
    thickness: int = 1,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Draw and augment the mini-batch of iteration ``it``; depends only on (seed, it)."""
    rng = np.random.default_rng([derive_seed(cfg.seed, "batch"), it])
    replace = len(samples) < cfg.batch_size
    idx = rng.choice(len(samples), size=cfg.batch_size, replace=replace)
    images, labels, bounds = [], [], []
    for j, i in enumerate(idx):
        aug_rng = np.random.default_rng([derive_seed(cfg.seed, "augment"), it, j])
        s = augment(samples[i], aug_rng, cfg.scales, mean, None if cfg.flip else False, thickness)
        images.append(s.image)
        labels.append(s.labels)
        bounds.append(s.boundary)
    return np.stack(images), np.stack(labels), np.stack(bounds)


def train(
    model_cfg: ModelConfig,
    train_cfg: TrainConfig,
    samples: Sequence[SampleRecord],
    mean=(0.0, 0.0, 0.0),
    out_dir=None,
    resume=None,
    stop_at: int | None = None,
    thickness: int = 1,
    model: DFN | None = None,
    meta: dict[str, str] | None = None,
) -> tuple[DFN, TrainLog]:
    """Train a DFN; returns the model and its log.

    With ``out_dir`` set, checkpoints (``iter_XXXXXX.dfnc`` every
    ``checkpoint_every`` iterations and ``final.dfnc``) and ``train_log.csv``
    are written there. ``resume`` names a checkpoint to continue from;
    ``stop_at`` ends early while keeping the schedule of ``max_iter``.
    ``meta`` adds extra string entries to every checkpoint.
    """
    start = 0
    if resume is not None:
        model, saved = load_checkpoint(resume)
        start = int(saved.get("iter", 0))
        meta = {**saved, **(meta or {})}
        model_cfg = model.cfg
    elif model is None:
        model = DFN(model_cfg)
    end = train_cfg.max_iter if stop_at is None else min(stop_at, train_cfg.max_iter)
    if not samples and end > start:
        raise ConfigurationError("cannot train on an empty dataset")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    meta_base = {**(meta or {}), "mean": ",".join(repr(float(m)) for m in mean)}

    def checkpoint(name: str, it: int) -> Path | None:
        if out is None:
            return None
        path = out / name
        save_checkpoint(path, model, {**meta_base, "iter": str(it)})
        return path

    tlog = TrainLog()
    params = list(model.parameters())
    t0 = time.perf_counter()
    model.train()
    for it in range(start, end):
        lr = poly_lr(it, train_cfg.max_iter, train_cfg.base_lr, train_cfg.power)
        images, labels, bounds = make_batch(samples, it, train_cfg, mean, thickness)
        model.zero_grad()
        output = model(Tensor(images.astype(model.dtype)))
        total, l_s, l_b = combined_loss(output, labels, bounds, train_cfg.loss, model_cfg)
        value = total.item()
        if not np.isfinite(value):
            raise NumericalError(f"non-finite loss {value} at iteration {it + 1}", it + 1)
        backward(total)
        sgd_step(params, lr, train_cfg.momentum, train_cfg.weight_decay)
        done = it + 1
        if done % max(train_cfg.log_every, 1) == 0 or done == end:
            rec = LogRecord(done, lr, value, l_s.item(), l_b.item(), time.perf_counter() - t0)
            tlog.records.append(rec)
            log.info("iter %d lr %.3e L %.4f l_s %.4f l_b %.4f", done, lr, value, rec.l_s, rec.l_b)
        if train_cfg.checkpoint_every and done % train_cfg.checkpoint_every == 0:
            checkpoint(f"iter_{done:06d}.dfnc", done)
    tlog.checkpoint = checkpoint("final.dfnc", max(end, start))
    if out is not None:
        tlog.write_csv(out / "train_log.csv")
    return model, tlog
