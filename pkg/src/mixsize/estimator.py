"""scikit-learn compatible wrappers around the training engine."""
from __future__ import annotations

import copy
from typing import Dict, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .analysis import eval_size_sweep, predict_logits, preprocess_batch
from .calib import calibrate as _calibrate, calibration_stream
from .config import RunConfig
from .data import Dataset
from .ops import log_softmax
from .train import train
from .validation import check_images, check_labels, check_size


class MixSizeClassifier(ClassifierMixin, BaseEstimator):
    """ResNet image classifier trained with a mixed image-size regime.

    Parameters
    ----------
    depth, width : int
        ResNet depth (6n+2) and first-stage channel count.
    preset : str or None
        Named size distribution (``cifar28``, ``imagenet144``, ...). Ignored
        when ``entries`` is given.
    entries : str or None
        Explicit distribution as ``"size:prob, ..."``.
    mode : {"fixed", "B_plus", "D_plus"}
        How the step budget is spent when images shrink.
    calibrate : {"auto", True, False}
        Re-estimate batch-norm statistics for each prediction size. ``auto``
        calibrates mixed-size models only.
    eval_size : int or None
        Default prediction size; the base size when None.
    """

    def __init__(self, depth=8, width=16, preset="cifar28", entries=None, mode="D_plus",
                 strategy="per_step", base_size=32, base_batch=64, base_duplicates=1,
                 epochs=30, lr=0.1, momentum=0.9, weight_decay=1e-4, smoothing="auto",
                 alpha=0.99, schedule="cosine", eval_size=None, calibrate="auto",
                 calib_batches=200, eval_protocol="resize", precision="float32", random_state=0):
        self.depth = depth
        self.width = width
        self.preset = preset
        self.entries = entries
        self.mode = mode
        self.strategy = strategy
        self.base_size = base_size
        self.base_batch = base_batch
        self.base_duplicates = base_duplicates
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.smoothing = smoothing
        self.alpha = alpha
        self.schedule = schedule
        self.eval_size = eval_size
        self.calibrate = calibrate
        self.calib_batches = calib_batches
        self.eval_protocol = eval_protocol
        self.precision = precision
        self.random_state = random_state

    def _run_config(self, n_classes: int) -> RunConfig:
        cfg = RunConfig()
        cfg.model.depth, cfg.model.width, cfg.model.classes = self.depth, self.width, n_classes
        r = cfg.regime
        r.preset = "" if self.entries else (self.preset or "")
        r.entries = self.entries or "32:1.0"
        r.mode, r.strategy = self.mode, self.strategy
        r.base_size, r.base_batch, r.base_duplicates = self.base_size, self.base_batch, self.base_duplicates
        o = cfg.optim
        o.lr, o.momentum, o.weight_decay = self.lr, self.momentum, self.weight_decay
        o.smoothing, o.alpha, o.schedule = str(self.smoothing), self.alpha, self.schedule
        cfg.run.epochs, cfg.run.precision = self.epochs, self.precision
        cfg.run.seed = 0 if self.random_state is None else int(self.random_state)
        return cfg.validate()

    def fit(self, X, y):
        X = check_images(X)
        y = check_labels(y, len(X))
        self.classes_, codes = np.unique(y, return_inverse=True)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        cfg = self._run_config(len(self.classes_))
        self.train_set_ = Dataset(X, codes, "train", len(self.classes_))
        result = train(cfg, self.train_set_)
        self.model_ = result.model
        self.n_steps_ = result.total_steps
        self.steps_per_epoch_ = result.steps_per_epoch
        self.distribution_ = cfg.distribution()
        self.mixed_ = len(self.distribution_.entries) > 1
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self._bn_cache: Dict[int, dict] = {}
        return self

    def _should_calibrate(self) -> bool:
        if self.calibrate == "auto":
            return self.mixed_
        return bool(self.calibrate)

    def _model_at(self, S: int):
        if not self._should_calibrate():
            return self.model_
        if S not in self._bn_cache:
            m = copy.deepcopy(self.model_)
            _calibrate(m, calibration_stream(self.train_set_, S, self.base_batch,
                                             seed=self.random_state or 0), S, self.calib_batches)
            self._bn_cache[S] = m.bn_state()
        m = copy.deepcopy(self.model_)
        m.load_bn_state(self._bn_cache[S])
        return m

    def _logits(self, X, size):
        check_is_fitted(self, "model_")
        X = check_images(X)
        S = check_size(size or self.eval_size or self.distribution_.base_size)
        model = self._model_at(S)
        d = self.train_set_
        x = Dataset(X, np.zeros(len(X), dtype=np.int64), "test", d.num_classes, d.mean, d.std).normalized()
        return predict_logits(model, x, S, self.eval_protocol)

    def predict_proba(self, X, size: Optional[int] = None):
        return np.exp(log_softmax(self._logits(X, size).astype(np.float64)))

    def predict(self, X, size: Optional[int] = None):
        logits = self._logits(X, size)
        return self.classes_[logits.argmax(axis=1)]

    def size_sweep(self, X, y, sizes: Sequence[int]):
        """Accuracy and flops per evaluation size (see :func:`~mixsize.analysis.eval_size_sweep`)."""
        check_is_fitted(self, "model_")
        X = check_images(X)
        y = check_labels(y, len(X))
        codes = np.searchsorted(self.classes_, y)
        if np.any(self.classes_[np.clip(codes, 0, len(self.classes_) - 1)] != y):
            raise ValueError("y contains labels unseen during fit")
        d = self.train_set_
        test = Dataset(X, codes, "test", d.num_classes, d.mean, d.std)
        return eval_size_sweep(self.model_, test, sizes, self._should_calibrate(), self.calib_batches,
                               calib_dataset=d, calib_batch_size=self.base_batch,
                               seed=self.random_state or 0, protocol=self.eval_protocol)


class EvalPreprocessor(TransformerMixin, BaseEstimator):
    """Stateless evaluation resize: ``crop`` (short side to floor(8S/7), center SxS) or ``resize``."""

    def __init__(self, size=224, protocol="crop"):
        self.size = size
        self.protocol = protocol

    def fit(self, X, y=None):
        check_size(self.size)
        self.n_features_in_ = int(np.prod(np.shape(X)[1:]))
        return self

    def transform(self, X):
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 4:
            raise ValueError(f"expected [N, C, H, W], got shape {X.shape}")
        return preprocess_batch(X, check_size(self.size), self.protocol)
