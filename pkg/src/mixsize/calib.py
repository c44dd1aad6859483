"""Batch-norm statistics and forward-only calibration at a target image size."""
from __future__ import annotations

from typing import Iterable, Iterator, Tuple

import numpy as np

from .tensor import Tensor, no_grad


class CalibrationRequiredError(RuntimeError):
    """Eval-mode forward hit a batch-norm layer without statistics."""


class BNStats:
    """Per-channel running mean / (biased) variance of one batch-norm layer.

    Two update paths exist: ``update_ema`` during training and ``merge`` during
    calibration. ``merge`` combines batches with the parallel-variance formula,
    so after a calibration pass ``mean``/``var`` are the exact pooled
    statistics over every element seen.
    """

    def __init__(self, num_channels: int):
        self.num_channels = num_channels
        self.reset()

    def reset(self) -> None:
        self.mean = np.zeros(self.num_channels, dtype=np.float64)
        self.var = np.ones(self.num_channels, dtype=np.float64)
        self.count = 0
        self.initialized = False

    def update_ema(self, mean, var, n: int, momentum: float) -> None:
        if not self.initialized:
            self.mean = np.asarray(mean, dtype=np.float64).copy()
            self.var = np.asarray(var, dtype=np.float64).copy()
            self.initialized = True
        else:
            self.mean = (1 - momentum) * self.mean + momentum * mean
            self.var = (1 - momentum) * self.var + momentum * var
        self.count += n

    def merge(self, mean, var, n: int) -> None:
        mean = np.asarray(mean, dtype=np.float64)
        var = np.asarray(var, dtype=np.float64)
        if self.count == 0 or not self.initialized:
            self.mean, self.var, self.count = mean.copy(), var.copy(), n
        else:
            total = self.count + n
            delta = mean - self.mean
            m2 = self.var * self.count + var * n + delta ** 2 * (self.count * n / total)
            self.mean = self.mean + delta * (n / total)
            self.var = m2 / total
            self.count = total
        self.initialized = True

    def state(self) -> dict:
        return {"mean": self.mean.copy(), "var": self.var.copy(),
                "count": self.count, "initialized": self.initialized}

    def load(self, state: dict) -> None:
        self.mean = np.asarray(state["mean"], dtype=np.float64).copy()
        self.var = np.asarray(state["var"], dtype=np.float64).copy()
        self.count = int(state["count"])
        self.initialized = bool(state["initialized"])


def reset_bn(model):
    """Clear every batch-norm layer's statistics (eval then requires calibration)."""
    for _, layer in model.bn_layers():
        layer.stats.reset()
    return model


def calibrate(model, train_stream: Iterable, S: int, num_batches: int = 200,
              batch_size: int | None = None):
    """Re-estimate all batch-norm statistics for input size ``S``.

    ``train_stream`` yields ``images`` arrays/tensors (or ``(images, labels)``
    pairs) already at size ``S``. Statistics are the exact aggregate over the
    first ``num_batches`` batches; no gradient is formed and no parameter is
    touched. ``batch_size`` is only checked against the stream.
    """
    if num_batches < 1:
        raise ValueError("num_batches must be >= 1")
    if S < 8:
        raise ValueError(f"calibration size must be >= 8, got {S}")
    for _, layer in model.bn_layers():
        layer.stats.reset()
    prev = model.mode
    model.set_mode("capture")
    seen = 0
    try:
        with no_grad():
            for batch in _take(train_stream, num_batches):
                images = batch[0] if isinstance(batch, tuple) else batch
                images = images if isinstance(images, Tensor) else Tensor(images)
                if images.shape[-1] != S or images.shape[-2] != S:
                    raise ValueError(f"calibration batch has size {images.shape[-2:]}, expected {S}")
                if batch_size is not None and images.shape[0] > batch_size:
                    raise ValueError("calibration batch larger than batch_size")
                model(images)
                seen += 1
    finally:
        model.set_mode(prev)
    if seen == 0:
        raise ValueError("calibration stream was empty")
    return model


def _take(stream, n) -> Iterator:
    for i, item in enumerate(stream):
        if i >= n:
            break
        yield item


def calibration_stream(dataset, S: int, batch_size: int, seed: int = 0,
                       augment: bool = True) -> Iterator[Tuple[np.ndarray, np.ndarray]]:
    """Endless stream of training batches resized to ``S`` (fixed seed)."""
    from .data import AugmentConfig, make_batch

    rng = np.random.default_rng(seed)
    cfg = AugmentConfig(enabled=augment)
    n = len(dataset)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            idx = order[start:start + batch_size]
            yield make_batch(dataset, idx, S, 1, cfg, rng)
