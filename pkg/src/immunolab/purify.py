"""Purification analogs: block-DCT quantization, box smoothing and diffusion re-denoising.

``jpeg_lite`` is not a codec: it reproduces only the lossy quantization step
(8x8 orthonormal DCT, scaled luminance table, no entropy coding).
"""

from __future__ import annotations

import numpy as np
from scipy.fft import dctn, idctn
from sklearn.base import BaseEstimator, TransformerMixin

from .data import mean_filter
from .diffusion import ToyLdmBundle, sample_from
from .validation import check_images

# Standard luminance quantization table (ITU T.81, Annex K).
LUMINANCE_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)


def quant_table(quality: int) -> np.ndarray:
    """IJG quality scaling of the luminance table, entries clipped to [1, 255]."""
    if not 1 <= quality <= 100:
        raise ValueError(f"quality must lie in [1, 100], got {quality}")
    s = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    return np.clip(np.floor((LUMINANCE_TABLE * s + 50.0) / 100.0), 1, 255)


def _blocks(plane: np.ndarray) -> np.ndarray:
    # (..., H, W) with H, W multiples of 8 -> (..., H/8, W/8, 8, 8)
    *lead, h, w = plane.shape
    return plane.reshape(*lead, h // 8, 8, w // 8, 8).swapaxes(-3, -2)


def _unblocks(blocks: np.ndarray) -> np.ndarray:
    *lead, bh, bw, _, _ = blocks.shape
    return blocks.swapaxes(-3, -2).reshape(*lead, bh * 8, bw * 8)


def block_dct(plane: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D DCT-II of every 8x8 block; dims must be multiples of 8."""
    return dctn(_blocks(plane), type=2, norm="ortho", axes=(-2, -1))


def block_idct(coeffs: np.ndarray) -> np.ndarray:
    return _unblocks(idctn(coeffs, type=2, norm="ortho", axes=(-2, -1)))


def jpeg_lite(x, quality: int = 75) -> np.ndarray:
    """Quantize 8x8 DCT blocks of each channel with the scaled luminance table."""
    table = quant_table(quality)
    arr = np.asarray(x, dtype=np.float64)
    h, w = arr.shape[-2:]
    ph, pw = (-h) % 8, (-w) % 8
    if ph or pw:
        arr = np.pad(arr, [(0, 0)] * (arr.ndim - 2) + [(0, ph), (0, pw)], mode="edge")
    coeffs = block_dct(arr * 255.0 - 128.0)
    coeffs = np.round(coeffs / table) * table
    out = (block_idct(coeffs) + 128.0) / 255.0
    out = out[..., :h, :w]
    return np.clip(out, 0.0, 1.0).astype(np.asarray(x).dtype if np.asarray(x).dtype.kind == "f" else np.float32)


def mean_smooth(x, kernel: int = 3, iterations: int = 1) -> np.ndarray:
    """Edge-replicated box filter applied ``iterations`` times."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"kernel must be odd and >= 1, got {kernel}")
    out = np.asarray(x)
    for _ in range(iterations):
        out = mean_filter(out, kernel)
    return out


def diffpure_lite(bundle: ToyLdmBundle, x, k_p: int, prompt: str = "", seed: int = 0) -> np.ndarray:
    """Encode, noise to ``k_p``, denoise conditioned on ``prompt``, decode."""
    if not 1 <= k_p <= bundle.schedule.k_max:
        raise ValueError(f"k_p must lie in [1, {bundle.schedule.k_max}], got {k_p}")
    arr = np.asarray(x)
    single = arr.ndim == 3
    xb = check_images(arr[None] if single else arr).astype(bundle.dtype)
    z0 = bundle.encode(xb).data
    z = sample_from(bundle, z0, k_p, bundle.embed(prompt), None, bundle.schedule.k_max, seed)
    out = np.clip(bundle.decode(z).data, 0.0, 1.0)
    return out[0] if single else out


def _per_input(X, fn):
    # single (3, H, W) in, single out
    single = np.ndim(X) == 3
    out = fn(check_images(X, allow_single=True))
    return out[0] if single else out


class JpegLite(TransformerMixin, BaseEstimator):
    def __init__(self, quality=75):
        self.quality = quality

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return _per_input(X, lambda x: jpeg_lite(x, self.quality))


class MeanSmooth(TransformerMixin, BaseEstimator):
    def __init__(self, kernel=3, iterations=1):
        self.kernel = kernel
        self.iterations = iterations

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        return _per_input(X, lambda x: mean_smooth(x, self.kernel, self.iterations))


class DiffPureLite(TransformerMixin, BaseEstimator):
    def __init__(self, bundle=None, k_p=10, prompt="", seed=0):
        self.bundle = bundle
        self.k_p = k_p
        self.prompt = prompt
        self.seed = seed

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        if self.bundle is None:
            raise ValueError("DiffPureLite needs a bundle")
        return _per_input(X, lambda x: diffpure_lite(self.bundle, x, self.k_p, self.prompt, self.seed))


PURIFIERS = {"jpeg": JpegLite, "smooth": MeanSmooth, "diffpure": DiffPureLite}


def make_purifier(kind: str, param: int, bundle: ToyLdmBundle | None = None, prompt: str = "", seed: int = 0):
    """Build a purifier from a CLI-style ``kind`` and its integer parameter."""
    if kind == "jpeg":
        return JpegLite(quality=int(param))
    if kind == "smooth":
        return MeanSmooth(kernel=int(param))
    if kind == "diffpure":
        if bundle is None:
            raise ValueError("diffpure needs a model bundle")
        return DiffPureLite(bundle, k_p=int(param), prompt=prompt, seed=seed)
    raise ValueError(f"unknown purifier kind {kind!r}; choose from {sorted(PURIFIERS)}")
