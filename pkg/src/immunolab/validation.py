"""Input checks for image batches, in the spirit of ``sklearn.utils.check_array``."""

from __future__ import annotations

import numpy as np


def check_images(X, *, allow_single: bool = False, range_check: bool = True) -> np.ndarray:
    """Validate an image batch of shape ``(N, 3, H, W)`` with values in ``[0, 1]``.

    With ``allow_single`` a ``(3, H, W)`` image is promoted to a batch of one.
    Returns a floating array (float32 unless the input is float64).
    """
    arr = np.asarray(X)
    if arr.dtype.kind not in "fiu":
        raise ValueError(f"expected numeric image data, got dtype {arr.dtype}")
    if arr.dtype != np.float64:
        arr = arr.astype(np.float32)
    if allow_single and arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise ValueError(f"expected images of shape (N, 3, H, W), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("images contain NaN or Inf")
    if range_check and arr.size and (arr.min() < -1e-6 or arr.max() > 1 + 1e-6):
        raise ValueError(f"image values must lie in [0, 1], got [{arr.min():.4f}, {arr.max():.4f}]")
    return arr


def check_same_shape(a, b, what: str = "inputs") -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")
    return a, b
