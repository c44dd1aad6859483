"""Gradient-correlation measurements, evaluation preprocessing and size sweeps."""
from __future__ import annotations

import copy
import csv
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import ops
from .calib import calibrate, calibration_stream
from .model import model_flops
from .tensor import Tensor, no_grad


class UndefinedCorrelationError(ValueError):
    pass


def rankdata(a) -> np.ndarray:
    """1-based ranks; tied values share the mean of their ranks."""
    a = np.asarray(a)
    order = np.argsort(a, kind="mergesort")
    sorted_a = a[order]
    # run boundaries of equal values
    starts = np.flatnonzero(np.r_[True, sorted_a[1:] != sorted_a[:-1]])
    ends = np.r_[starts[1:], len(a)]
    avg = (starts + ends + 1) / 2.0
    ranks = np.empty(len(a), dtype=np.float64)
    ranks[order] = np.repeat(avg, ends - starts)
    return ranks


def spearman(a, b) -> float:
    """Spearman rank correlation (Pearson correlation of average ranks)."""
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    if len(a) != len(b):
        raise ValueError("vectors differ in length")
    if len(a) < 2:
        raise ValueError("need at least two observations")
    ra, rb = rankdata(a), rankdata(b)
    ra -= ra.mean()
    rb -= rb.mean()
    den = math.sqrt(float(ra @ ra) * float(rb @ rb))
    if den == 0.0:
        raise UndefinedCorrelationError("correlation undefined for a constant vector")
    return float(np.clip((ra @ rb) / den, -1.0, 1.0))


@dataclass
class CorrelationReport:
    rho_same_image_cross_size: float
    rho_diff_image_same_size: float
    var_per_size: Dict[int, float]
    n_pairs: int
    sizes: Tuple[int, int] = (32, 24)
    checkpoint_tag: str = "initial"
    rho_same_std: float = 0.0
    rho_diff_std: float = 0.0

    def summary(self) -> str:
        s1, s2 = self.sizes
        rows = [
            ("Measure", self.checkpoint_tag),
            (f"rho(x^({s1}), x^({s2}))", f"{self.rho_same_image_cross_size:.4g}"),
            (f"rho(x^({s1}), y^({s1}))", f"{self.rho_diff_image_same_size:.4g}"),
        ]
        rows += [(f"V(x^({s}))", f"{v:.3e}") for s, v in sorted(self.var_per_size.items(), reverse=True)]
        width = max(len(r[0]) for r in rows)
        lines = [f"{a:<{width}}  {b}" for a, b in rows]
        lines.insert(1, "-" * len(lines[0]))
        lines.append(f"(n_pairs = {self.n_pairs})")
        return "\n".join(lines)

    def csv_rows(self) -> List[dict]:
        s1, s2 = self.sizes
        rows = [
            {"measure": f"rho_x{s1}_x{s2}", "value": self.rho_same_image_cross_size},
            {"measure": f"rho_x{s1}_y{s1}", "value": self.rho_diff_image_same_size},
        ]
        rows += [{"measure": f"V_x{s}", "value": v} for s, v in sorted(self.var_per_size.items())]
        for r in rows:
            r.update(checkpoint_tag=self.checkpoint_tag, n_pairs=self.n_pairs)
        return rows


def flat_gradient(model, image: np.ndarray, label: int) -> np.ndarray:
    """Whole-network gradient vector for a single image (batch of one)."""
    model.zero_grad()
    x = Tensor(image[None].astype(model.parameters()[0].dtype))
    loss = ops.softmax_cross_entropy(model(x), np.array([label]))
    loss.backward()
    return np.concatenate([p.grad.ravel() if p.grad is not None else np.zeros(p.data.size)
                           for p in model.parameters()]).astype(np.float64)


class _Welford:
    def __init__(self):
        self.n, self.mean, self.m2 = 0, None, None

    def add(self, v):
        self.n += 1
        if self.mean is None:
            self.mean, self.m2 = v.copy(), np.zeros_like(v)
            return
        d = v - self.mean
        self.mean += d / self.n
        self.m2 += d * (v - self.mean)

    def variance(self) -> np.ndarray:
        return self.m2 / (self.n - 1)


def grad_correlation_experiment(model, dataset, S_pair=(32, 24), n_pairs: int = 200, rng=None,
                                checkpoint_tag: str = "initial") -> CorrelationReport:
    """Rank correlation of per-image gradients across sizes and across images.

    For each of ``n_pairs`` random distinct images ``x, y`` the gradients of
    ``x`` at both sizes and of ``y`` at the first size are compared with
    :func:`spearman`. ``var_per_size[S]`` is the mean over coordinates of the
    across-image (unbiased) variance of ``x``'s gradient at size ``S``.
    Batch norm runs in train mode on a private copy of the model.
    """
    if n_pairs < 2:
        raise ValueError("n_pairs must be >= 2")
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    s1, s2 = S_pair
    work = copy.deepcopy(model).train()
    rho_same, rho_diff = [], []
    acc = {s1: _Welford(), s2: _Welford()}
    for _ in range(n_pairs):
        i, j = rng.choice(len(dataset), 2, replace=False)
        x = dataset.normalized([i], np.float64)[0]
        y = dataset.normalized([j], np.float64)[0]
        lx, ly = int(dataset.labels[i]), int(dataset.labels[j])
        gx1 = flat_gradient(work, ops.resize_array(x, s1), lx)
        gx2 = flat_gradient(work, ops.resize_array(x, s2), lx)
        gy1 = flat_gradient(work, ops.resize_array(y, s1), ly)
        rho_same.append(spearman(gx1, gx2))
        rho_diff.append(spearman(gx1, gy1))
        acc[s1].add(gx1)
        acc[s2].add(gx2)
    return CorrelationReport(
        float(np.mean(rho_same)), float(np.mean(rho_diff)),
        {s: float(a.variance().mean()) for s, a in acc.items()},
        n_pairs, (s1, s2), checkpoint_tag,
        float(np.std(rho_same)), float(np.std(rho_diff)),
    )


# -- evaluation ----------------------------------------------------------------

def eval_resize_target(S: int) -> int:
    """Smallest-side length before the center crop: floor(8*S/7)."""
    return (8 * S) // 7


def eval_preprocess(image: np.ndarray, S: int) -> np.ndarray:
    """Resize so the short side is floor(8S/7) (aspect kept), then center-crop SxS."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    c, h, w = img.shape
    target = eval_resize_target(S)
    if h <= w:
        nh, nw = target, int(math.floor(w * target / h + 0.5))
    else:
        nh, nw = int(math.floor(h * target / w + 0.5)), target
    resized = ops.resize_array(img, (nh, nw))
    top, left = (nh - S) // 2, (nw - S) // 2
    return resized[:, top:top + S, left:left + S]


def preprocess_batch(images: np.ndarray, S: int, protocol: str = "crop") -> np.ndarray:
    """Batch version: ``crop`` applies :func:`eval_preprocess`, ``resize`` a plain resize to S."""
    if protocol == "resize":
        return ops.resize_array(images, S)
    if protocol == "crop":
        return np.stack([eval_preprocess(im, S) for im in images]) if len(images) else images
    raise ValueError(f"unknown eval protocol {protocol!r}")


def predict_logits(model, images: np.ndarray, S: int, protocol: str = "crop",
                   batch_size: int = 256) -> np.ndarray:
    prev = model.mode
    model.eval()
    out = []
    dtype = model.parameters()[0].dtype
    try:
        with no_grad():
            for k in range(0, len(images), batch_size):
                xb = preprocess_batch(images[k:k + batch_size], S, protocol).astype(dtype)
                out.append(model(Tensor(xb)).data)
    finally:
        model.set_mode(prev)
    return np.concatenate(out)


def evaluate(model, dataset, S: int, protocol: str = "crop", batch_size: int = 256) -> float:
    """Top-1 accuracy (percent) of ``model`` on ``dataset`` at input size ``S``."""
    logits = predict_logits(model, dataset.normalized(), S, protocol, batch_size)
    return 100.0 * float(np.mean(logits.argmax(axis=1) == dataset.labels))


@dataclass
class SweepRow:
    size: int
    top1: float
    flops: int
    calibrated: bool


SWEEP_FIELDS = ["size", "top1", "flops", "calibrated"]


def eval_size_sweep(model, dataset, sizes: Sequence[int], calibrate_each: bool = True,
                    calib_batches: int = 200, calib_dataset=None, calib_batch_size: int = 64,
                    seed: int = 0, protocol: str = "crop") -> Dict[int, SweepRow]:
    """Accuracy and flops per evaluation size, optionally calibrating BN at each size.

    Calibration works on a copy of ``model`` so the sweep leaves it untouched.
    ``calib_dataset`` (training images) defaults to ``dataset``.
    """
    sizes = list(sizes)
    if not sizes:
        raise ValueError("sizes must not be empty")
    if min(sizes) < 8:
        raise ValueError("evaluation sizes must be >= 8")
    calib_dataset = calib_dataset if calib_dataset is not None else dataset
    results: Dict[int, SweepRow] = {}
    for S in sizes:
        m = model
        if calibrate_each:
            m = copy.deepcopy(model)
            calibrate(m, calibration_stream(calib_dataset, S, calib_batch_size, seed), S,
                      calib_batches, calib_batch_size)
        results[S] = SweepRow(S, evaluate(m, dataset, S, protocol), model_flops(model, S), calibrate_each)
    return results


def write_sweep_csv(rows: Iterable[SweepRow], fh) -> None:
    w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
    w.writeheader()
    for r in rows:
        w.writerow({"size": r.size, "top1": f"{r.top1:.4f}", "flops": r.flops,
                    "calibrated": int(r.calibrated)})


def imagenet_sweep_sizes(center: int = 224, step: int = 32, m: int = 6) -> List[int]:
    return [center + step * k for k in range(-m, m + 1)]
