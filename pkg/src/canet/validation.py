"""Input checks shared by the estimator wrapper."""
from __future__ import annotations

from typing import Tuple

import numpy as np

__all__ = ["check_pair_array", "check_label_map", "check_dataset_id"]


def check_pair_array(X, channels: int = 3, multiple: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Split stacked bitemporal images into (x1, x2), each (n, c, h, w) float32.

    Accepts (n, 2, c, h, w) or (n, 2c, h, w). Values must be finite and
    inside [0, 1]; spatial dims must be multiples of ``multiple``.
    """
    X = np.asarray(X)
    if X.dtype == np.uint8:
        X = X.astype(np.float32) / np.float32(255)
    if not np.issubdtype(X.dtype, np.number):
        raise TypeError(f"expected a numeric array, got dtype {X.dtype}")
    if X.ndim == 5:
        if X.shape[1] != 2 or X.shape[2] != channels:
            raise ValueError(f"expected shape (n, 2, {channels}, h, w), got {X.shape}")
        x1, x2 = X[:, 0], X[:, 1]
    elif X.ndim == 4:
        if X.shape[1] != 2 * channels:
            raise ValueError(f"expected shape (n, {2 * channels}, h, w), got {X.shape}")
        x1, x2 = X[:, :channels], X[:, channels:]
    else:
        raise ValueError(f"expected a 4-d or 5-d array of image pairs, got {X.ndim} dims")
    if X.shape[0] == 0:
        raise ValueError("no samples")
    h, w = x1.shape[-2:]
    if h % multiple or w % multiple:
        raise ValueError(f"image size {h}x{w} must be divisible by {multiple}")
    if not np.isfinite(X).all():
        raise ValueError("input contains NaN or infinity")
    if X.min() < 0 or X.max() > 1:
        raise ValueError("pixel values must lie in [0, 1] (or be uint8)")
    return np.ascontiguousarray(x1, dtype=np.float32), np.ascontiguousarray(x2, dtype=np.float32)


def check_label_map(y, n: int, shape: Tuple[int, int]) -> np.ndarray:
    """Binary (n, h, w) change labels as uint8; 255 is read as 1."""
    y = np.asarray(y)
    if y.shape != (n,) + tuple(shape):
        raise ValueError(f"labels have shape {y.shape}, expected {(n,) + tuple(shape)}")
    if y.dtype == np.bool_:
        return y.astype(np.uint8)
    values = np.unique(y)
    if set(values.tolist()) <= {0, 1}:
        return y.astype(np.uint8)
    if set(values.tolist()) <= {0, 255}:
        return (y > 0).astype(np.uint8)
    raise ValueError(f"labels must be binary (0/1 or 0/255), found values {values[:5].tolist()}")


def check_dataset_id(dataset_id) -> str:
    if not isinstance(dataset_id, str) or not dataset_id:
        raise ValueError(f"dataset id must be a non-empty string, got {dataset_id!r}")
    return dataset_id
