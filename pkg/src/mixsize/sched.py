"""Mixed image-size distributions, budget-preserving batch derivation and size schedules.

A :class:`MixSizeDistribution` assigns probabilities to square image sizes and
carries the base operating point ``(base_size, base_batch, base_duplicates)``.
For a sampled size ``S`` the per-step cost ``S**2 * B * D`` is kept close to
``base_size**2 * base_batch * base_duplicates`` by growing either the batch
(``B_plus``) or the number of augmented duplicates (``D_plus``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Sequence, Tuple

import numpy as np

MODES = ("fixed", "B_plus", "D_plus")
STRATEGIES = ("per_step", "per_epoch", "progressive")
MIN_SIZE = 8
PROB_TOL = 1e-9


class DistributionError(ValueError):
    pass


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass
class MixSizeDistribution:
    entries: List[Tuple[int, float]]
    base_size: int = 32
    base_batch: int = 64
    base_duplicates: int = 1
    mode: str = "fixed"

    @property
    def sizes(self) -> np.ndarray:
        return np.array([s for s, _ in self.entries], dtype=np.int64)

    @property
    def probs(self) -> np.ndarray:
        return np.array([p for _, p in self.entries], dtype=np.float64)

    def validate(self) -> "MixSizeDistribution":
        return validate(self)

    @classmethod
    def parse(cls, text: str, **kwargs) -> "MixSizeDistribution":
        """Build from ``"40:0.2, 32:0.3, ..."`` (comma or whitespace separated)."""
        entries = []
        for tok in text.replace(",", " ").split():
            size, _, prob = tok.partition(":")
            if not prob:
                raise DistributionError(f"expected size:probability, got {tok!r}")
            entries.append((int(size), float(prob)))
        return cls(entries, **kwargs)

    def format(self) -> str:
        return ", ".join(f"{s}:{p:g}" for s, p in self.entries)


@dataclass(frozen=True)
class SampledStep:
    S: int
    B: int
    D: int
    step_index: int = 0

    @property
    def cost(self) -> int:
        return self.S * self.S * self.B * self.D


def validate(dist: MixSizeDistribution) -> MixSizeDistribution:
    """Raise :class:`DistributionError` unless ``dist`` is a proper distribution."""
    if not dist.entries:
        raise DistributionError("distribution has no entries")
    if dist.mode not in MODES:
        raise DistributionError(f"unknown mode {dist.mode!r}; expected one of {MODES}")
    sizes, probs = dist.sizes, dist.probs
    if len(set(sizes.tolist())) != len(sizes):
        raise DistributionError("duplicate sizes in distribution")
    if np.any(probs < 0):
        raise DistributionError("negative probability")
    if abs(probs.sum() - 1.0) > PROB_TOL:
        raise DistributionError(f"probabilities sum to {probs.sum():.12g}, not 1")
    if np.any(sizes < MIN_SIZE):
        raise DistributionError(f"sizes must be >= {MIN_SIZE}")
    if dist.base_size < MIN_SIZE or dist.base_batch < 1 or dist.base_duplicates < 1:
        raise DistributionError("base size/batch/duplicates out of range")
    return dist


def derive_step(S: int, dist: MixSizeDistribution) -> Tuple[int, int]:
    """Batch size and duplicate count for image size ``S`` under ``dist.mode``.

    In ``D_plus`` mode the duplicate count takes the scale factor; whatever
    rounding leaves over (including sizes above the base where duplicates
    cannot drop below one) is absorbed by the batch so the step cost stays on
    budget.
    """
    b0, d0 = dist.base_batch, dist.base_duplicates
    if dist.mode == "fixed":
        return b0, d0
    scale = (dist.base_size / S) ** 2
    if dist.mode == "B_plus":
        return max(1, round_half_up(b0 * scale)), d0
    d = max(1, round_half_up(d0 * scale))
    return max(1, round_half_up(b0 * d0 * scale / d)), d


def budget_error(step: SampledStep, dist: MixSizeDistribution) -> float:
    base = dist.base_size ** 2 * dist.base_batch * dist.base_duplicates
    return abs(step.cost - base) / base


def sample_step(dist: MixSizeDistribution, rng: np.random.Generator, step_index: int = 0) -> SampledStep:
    S = int(dist.sizes[rng.choice(len(dist.entries), p=dist.probs)])
    B, D = derive_step(S, dist)
    return SampledStep(S, B, D, step_index)


def sample_sizes(dist: MixSizeDistribution, rng: np.random.Generator, n: int) -> np.ndarray:
    """Vectorised draw of ``n`` sizes (same law as :func:`sample_step`)."""
    return dist.sizes[rng.choice(len(dist.entries), size=n, p=dist.probs)]


def mean_stats(dist: MixSizeDistribution) -> Tuple[float, float, float]:
    """Exact expectations of S, B and D under ``dist``."""
    validate(dist)
    probs = dist.probs
    bd = np.array([derive_step(int(s), dist) for s in dist.sizes], dtype=np.float64)
    return (float(probs @ dist.sizes), float(probs @ bd[:, 0]), float(probs @ bd[:, 1]))


def scaled_learning_rate(base_lr: float, mean_batch: float, base_batch: int) -> float:
    if base_batch <= 0:
        raise ValueError("base_batch must be positive")
    return base_lr * mean_batch / base_batch


def progressive_epochs(dist: MixSizeDistribution, total_epochs: int) -> List[Tuple[int, int]]:
    """``(size, epochs)`` in ascending size order; leftovers go to the largest size."""
    order = sorted(dist.entries)
    counts = [round_half_up(p * total_epochs) for _, p in order[:-1]]
    # clip from the front if rounding overshoots the budget
    budget = total_epochs
    clipped = []
    for c in counts:
        c = min(c, budget)
        clipped.append(c)
        budget -= c
    clipped.append(budget)
    return [(s, e) for (s, _), e in zip(order, clipped)]


class SizeSchedule:
    """Sizes for a whole run under one of the three sampling strategies.

    ``epoch_steps(e)`` is an endless iterator of :class:`SampledStep` for epoch
    ``e``; the trainer pulls from it until the epoch's samples run out.
    Iterating the schedule itself yields ``total_epochs * steps_per_epoch``
    steps, which is handy when the step count per epoch is known up front.
    """

    def __init__(self, dist, strategy, total_epochs, steps_per_epoch=None, rng=None):
        validate(dist)
        if strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
        if total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")
        self.dist = dist
        self.strategy = strategy
        self.total_epochs = total_epochs
        self.steps_per_epoch = steps_per_epoch
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._step = 0
        self.epoch_sizes = None
        if strategy == "progressive":
            self.epoch_sizes = [s for s, e in progressive_epochs(dist, total_epochs) for _ in range(e)]
        elif strategy == "per_epoch":
            # every size keeps its share of epochs, in random order
            alloc = [s for s, e in progressive_epochs(dist, total_epochs) for _ in range(e)]
            self.epoch_sizes = [int(s) for s in self.rng.permutation(alloc)]

    def epoch_steps(self, epoch: int) -> Iterator[SampledStep]:
        if self.epoch_sizes is not None:
            S = int(self.epoch_sizes[min(epoch, self.total_epochs - 1)])
            B, D = derive_step(S, self.dist)
            while True:
                yield SampledStep(S, B, D, self._next())
        else:
            while True:
                yield sample_step(self.dist, self.rng, self._next())

    def _next(self) -> int:
        i = self._step
        self._step += 1
        return i

    def __iter__(self) -> Iterator[SampledStep]:
        if self.steps_per_epoch is None:
            raise ValueError("steps_per_epoch is required to iterate a whole schedule")
        for e in range(self.total_epochs):
            it = self.epoch_steps(e)
            for _ in range(self.steps_per_epoch):
                yield next(it)


def make_schedule(dist, strategy="per_step", total_epochs=1, steps_per_epoch=None, rng=None) -> SizeSchedule:
    return SizeSchedule(dist, strategy, total_epochs, steps_per_epoch, rng)


# The S^(224) table lists 0.133 six times; 2/15 is the value that sums to one
# and reproduces the stated mean of 224.
PRESETS: Dict[str, dict] = {
    "cifar28": dict(entries=[(40, 0.2), (32, 0.3), (24, 0.3), (16, 0.2)],
                    base_size=32, base_batch=64),
    "imagenet144": dict(entries=[(256, 0.1), (224, 0.1), (128, 0.6), (96, 0.2)],
                        base_size=224, base_batch=256),
    "imagenet208": dict(entries=[(320, 0.1), (288, 0.1), (256, 0.1), (224, 0.2),
                                 (192, 0.2), (160, 0.1), (128, 0.1), (96, 0.1)],
                        base_size=224, base_batch=256),
    "imagenet224": dict(entries=[(320, 2 / 15), (288, 2 / 15), (256, 2 / 15), (224, 0.2),
                                 (192, 2 / 15), (160, 2 / 15), (128, 2 / 15)],
                        base_size=224, base_batch=256),
}


def preset(name: str, mode: str = "fixed", **overrides) -> MixSizeDistribution:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; known: {sorted(PRESETS)}")
    kw = dict(PRESETS[name])
    kw["entries"] = list(kw["entries"])
    kw.update(mode=mode, **overrides)
    return validate(MixSizeDistribution(**kw))


def point_mass(size: int = 32, batch: int = 64, duplicates: int = 1) -> MixSizeDistribution:
    return MixSizeDistribution([(size, 1.0)], size, batch, duplicates, "fixed")
