"""Input checks shared by the estimator API and the CLI."""
from __future__ import annotations

import numpy as np

from .model import MIN_SIZE


def check_images(X, channels: int = 3, min_size: int = MIN_SIZE) -> np.ndarray:
    """Validate an image batch [N, C, H, W] of raw pixel values in [0, 255].

    Integer arrays are taken as-is; float arrays must hold whole pixel values.
    Returns a uint8 array.
    """
    X = np.asarray(X)
    if X.ndim != 4:
        raise ValueError(f"expected a 4-D array [N, C, H, W], got shape {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("empty image batch")
    if X.shape[1] != channels:
        raise ValueError(f"expected {channels} channels, got {X.shape[1]}")
    if min(X.shape[2:]) < min_size:
        raise ValueError(f"images must be at least {min_size}x{min_size}")
    if X.dtype == np.uint8:
        return X
    if not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"non-numeric image dtype {X.dtype}")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or Inf")
    if X.min() < 0 or X.max() > 255:
        raise ValueError("pixel values must lie in [0, 255]")
    if not np.all(X == np.round(X)):
        raise ValueError("float images must hold whole pixel values in [0, 255]")
    return X.astype(np.uint8)


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or len(y) != n:
        raise ValueError(f"expected {n} labels in a 1-D array, got shape {y.shape}")
    return y


def check_size(S, name: str = "size") -> int:
    if isinstance(S, bool) or not isinstance(S, (int, np.integer)):
        raise TypeError(f"{name} must be an integer, got {type(S).__name__}")
    if S < MIN_SIZE:
        raise ValueError(f"{name} must be >= {MIN_SIZE}, got {S}")
    return int(S)
