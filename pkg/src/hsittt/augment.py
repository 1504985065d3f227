"""Spectral Mixup: convex blend of a cube with a random re-mixing of its own bands.

    mixed = lam * X + (1 - lam) * B @ X      (per pixel spectrum)

``B`` is S x S with i.i.d. U[0, 1) entries, each row divided by its sum, so
every output band is a convex combination of input bands and values stay in
the input range. Spatial structure is untouched. ``lam`` defaults to 0.5.
"""
from __future__ import annotations

import numpy as np

from .cube import HSICube, downsample

DEFAULT_LAMBDA = 0.5


def sample_mixing_matrix(bands: int, rng: np.random.Generator) -> np.ndarray:
    """Row-stochastic S x S matrix. A zero row (probability zero) is redrawn."""
    if bands < 1:
        raise ValueError(f"bands must be >= 1, got {bands}")
    mat = rng.random((bands, bands))
    sums = mat.sum(axis=1)
    while np.any(sums == 0.0):
        zero = sums == 0.0
        mat[zero] = rng.random((int(zero.sum()), bands))
        sums = mat.sum(axis=1)
    return mat / sums[:, None]


def _check(mixing: np.ndarray, bands: int, lam: float) -> np.ndarray:
    mixing = np.asarray(mixing, dtype=np.float64)
    if mixing.shape != (bands, bands):
        raise ValueError(f"mixing matrix {mixing.shape} does not match {bands} bands")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return mixing


def mix_bands(data, mixing, lam: float = DEFAULT_LAMBDA):
    """Array-level mixup on S x H x W numpy arrays or torch tensors."""
    bands = data.shape[0]
    mixing = _check(mixing, bands, lam)
    if hasattr(data, "detach"):  # torch tensor
        import torch

        b = torch.as_tensor(mixing, dtype=data.dtype)
        return lam * data + (1.0 - lam) * torch.einsum("st,thw->shw", b, data)
    data = np.asarray(data)
    mixed = np.einsum("st,thw->shw", mixing, data.astype(np.float64))
    return (lam * data + (1.0 - lam) * mixed).astype(data.dtype)


def spectral_mixup(cube: HSICube, mixing, lam: float = DEFAULT_LAMBDA) -> HSICube:
    # convex combinations of in-range values can still overshoot by rounding
    out = np.clip(mix_bands(cube.data, mixing, lam), 0.0, 1.0)
    return HSICube(out, wavelengths_nm=cube.wavelengths_nm)


def make_augmented_pair(hr: HSICube, mixing, lam: float, factor):
    """(downsample(mixed), mixed) with the shared degradation operator."""
    hr_aug = spectral_mixup(hr, mixing, lam)
    return downsample(hr_aug, factor), hr_aug
