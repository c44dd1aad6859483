"""Training loop for mixed-size regimes, with metrics CSV and checkpoints."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, List, Optional

import numpy as np

from . import ops
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import AugmentConfig, Dataset, make_batch
from .model import ResNetConfig, build_resnet, checksum
from .optim import SGD, SGDConfig, lr_schedule
from .sched import SampledStep, make_schedule, mean_stats, scaled_learning_rate
from .tensor import NumericError, Tensor, precision

log = logging.getLogger(__name__)

METRICS_SCHEMA_VERSION = 1
METRICS_FIELDS = ["schema_version", "step", "epoch", "S", "B", "D", "lr", "train_loss",
                  "grad_norm", "smoothed_norm", "wall_ms"]


class MetricsWriter:
    """Per-step CSV rows; header always written, flushed every ``flush_every`` rows."""

    def __init__(self, path: Optional[Path], flush_every: int = 50):
        self.rows: List[dict] = []
        self.flush_every = flush_every
        self._fh = None
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(path, "w", newline="")
            self._w = csv.DictWriter(self._fh, fieldnames=METRICS_FIELDS)
            self._w.writeheader()
            self._fh.flush()

    def write(self, row: dict) -> None:
        row = {"schema_version": METRICS_SCHEMA_VERSION, **row}
        self.rows.append(row)
        if self._fh is not None:
            self._w.writerow(row)
            if len(self.rows) % self.flush_every == 0:
                self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


@dataclass
class TrainResult:
    model: object
    total_steps: int
    steps_per_epoch: List[int]
    metrics: List[dict]
    mean_batch: float
    lr: float
    checkpoint: Optional[Path] = None

    @property
    def checksum(self) -> str:
        return checksum(self.model)


def _fixed_steps(cfg: RunConfig) -> Callable[[int], Iterator[SampledStep]]:
    """Step source with scheduling bypassed: always the base operating point."""
    r = cfg.regime
    S, B, D = r.base_size or 32, r.base_batch or 64, r.base_duplicates or 1

    def epoch_steps(epoch):
        while True:
            yield SampledStep(S, B, D)

    return epoch_steps


def train(cfg: RunConfig, train_set: Dataset, out_dir: Optional[Path] = None,
          model=None, on_epoch: Optional[Callable] = None) -> TrainResult:
    """Run ``cfg.run.epochs`` epochs; every epoch consumes the training set once.

    Three independent RNG streams derive from ``cfg.run.seed``: model init,
    size sampling, and data (shuffling plus per-batch augmentation).
    """
    cfg.validate()
    dtype = np.float64 if cfg.run.precision == "float64" else np.float32
    seed = cfg.run.seed
    with precision(dtype):
        if model is None:
            model = build_resnet(ResNetConfig(cfg.model.depth, cfg.model.width, cfg.model.classes),
                                 np.random.default_rng([seed, 0]))
        dist = cfg.distribution()
        if cfg.regime.enabled:
            schedule = make_schedule(dist, cfg.regime.strategy, cfg.run.epochs,
                                     rng=np.random.default_rng([seed, 1]))
            epoch_steps = schedule.epoch_steps
            mean_b = mean_stats(dist)[1]
        else:
            epoch_steps = _fixed_steps(cfg)
            mean_b = float(cfg.regime.base_batch or 64)
        base_lr = cfg.optim.lr
        if cfg.regime.enabled and cfg.lr_scaling_enabled():
            base_lr = scaled_learning_rate(base_lr, mean_b, dist.base_batch)
        opt = SGD(model.parameters(), SGDConfig(base_lr, cfg.optim.momentum, cfg.optim.weight_decay,
                                                cfg.smoothing_enabled(), cfg.optim.alpha,
                                                cfg.optim.smooth_before_momentum))
        shuffle_rng = np.random.default_rng([seed, 2])
        aug = AugmentConfig()
        writer = MetricsWriter(out_dir / "metrics.csv" if out_dir else None, cfg.run.metrics_flush)
        n = len(train_set)
        steps_per_epoch: List[int] = []
        step = 0
        last_ckpt = None
        model.train()
        try:
            for epoch in range(cfg.run.epochs):
                order = shuffle_rng.permutation(n)
                source = epoch_steps(epoch)
                cursor, epoch_step_count = 0, 0
                while cursor < n:
                    s = next(source)
                    idx = order[cursor:cursor + s.B]
                    frac = epoch + cursor / n
                    lr_t = lr_schedule(cfg.optim.schedule, base_lr, frac, cfg.run.epochs,
                                       cfg.optim.milestones, cfg.optim.gamma)
                    cursor += s.B
                    t0 = time.perf_counter()
                    xb, yb = make_batch(train_set, idx, s.S, s.D, aug,
                                        np.random.default_rng([seed, 3, step]), dtype)
                    opt.zero_grad()
                    loss = ops.softmax_cross_entropy(model(Tensor(xb)), yb)
                    lval = float(loss.data)
                    if not math.isfinite(lval):
                        raise NumericError(f"non-finite loss at step {step}")
                    loss.backward()
                    g_t = opt.step(lr_t)
                    writer.write({"step": step, "epoch": epoch, "S": s.S, "B": len(idx), "D": s.D,
                                  "lr": lr_t, "train_loss": lval, "grad_norm": g_t,
                                  "smoothed_norm": opt.state.g_bar if opt.cfg.smoothing else g_t,
                                  "wall_ms": round(1000 * (time.perf_counter() - t0), 3)})
                    step += 1
                    epoch_step_count += 1
                steps_per_epoch.append(epoch_step_count)
                recent = [r["train_loss"] for r in writer.rows[-epoch_step_count:]]
                log.info("epoch %d: %d steps, mean loss %.4f", epoch, epoch_step_count, float(np.mean(recent)))
                if out_dir is not None and cfg.run.checkpoint_every_epoch:
                    last_ckpt = save_checkpoint(out_dir / f"epoch{epoch:03d}.ckpt", model,
                                                {"epoch": epoch, "step": step})
                if on_epoch is not None:
                    on_epoch(epoch, model)
        finally:
            writer.close()
        ckpt = None
        if out_dir is not None:
            ckpt = save_checkpoint(out_dir / "final.ckpt", model, _meta(cfg, train_set, step))
        return TrainResult(model, step, steps_per_epoch, writer.rows, mean_b, base_lr, ckpt)


def _meta(cfg: RunConfig, train_set: Dataset, steps: int) -> dict:
    return {"config": cfg.to_flat(), "norm_mean": train_set.mean.tolist(),
            "norm_std": train_set.std.tolist(), "total_steps": steps,
            "mixed": cfg.regime.enabled and len(cfg.distribution().entries) > 1}
