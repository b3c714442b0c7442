"""Input checks shared by the estimator and the command line."""
from __future__ import annotations

from typing import Sequence

import numpy as np


def check_images(X, name: str = "X") -> list[np.ndarray]:
    """Return ``X`` as a list of H x W x 3 uint8 arrays.

    Accepts an N x H x W x 3 array or a sequence of H x W x 3 arrays, either
    uint8 or floating point in [0, 1].
    """
    if isinstance(X, np.ndarray):
        if X.ndim != 4:
            raise ValueError(f"{name} must be N x H x W x 3, got shape {X.shape}")
        items: Sequence = list(X)
    else:
        items = list(X)
    if not items:
        raise ValueError(f"{name} is empty")
    out = []
    for i, im in enumerate(items):
        im = np.asarray(im)
        if im.ndim != 3 or im.shape[-1] != 3:
            raise ValueError(f"{name}[{i}] must be H x W x 3, got shape {im.shape}")
        if im.dtype == np.uint8:
            out.append(im)
        elif np.issubdtype(im.dtype, np.floating):
            if not np.isfinite(im).all() or im.min() < 0 or im.max() > 1:
                raise ValueError(f"{name}[{i}]: floating images must lie in [0, 1]")
            out.append(np.round(im * 255).astype(np.uint8))
        else:
            raise ValueError(f"{name}[{i}]: unsupported dtype {im.dtype}")
    return out


def check_labels(y, n: int, name: str = "y") -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 1 or y.shape[0] != n:
        raise ValueError(f"{name} must be a 1-d array of length {n}, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValueError(f"{name} must hold integer class labels")
    y = y.astype(np.int64)
    bad = set(np.unique(y).tolist()) - {0, 1}
    if bad:
        raise ValueError(f"{name} must hold labels 0 (real) or 1 (fake); found {sorted(bad)}")
    return y
