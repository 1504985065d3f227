"""L1 + spatial-spectral total variation objective.

Both terms are mean-reduced: the L1 term over all entries and each directional
TV term over its own number of differences. This keeps loss magnitudes
independent of image size; with no weighting constant between the two terms,
only their relative weight is affected by the choice.
"""
from __future__ import annotations

from typing import NamedTuple

import torch

from .cube import as_array


def _tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(as_array(x), dtype=torch.float64)


def _check_shapes(pred, target):
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(target.shape)}")


def l1_loss(pred, target) -> torch.Tensor:
    pred, target = _tensor(pred), _tensor(target)
    _check_shapes(pred, target)
    return (pred - target).abs().mean()


def _mean_abs(diff: torch.Tensor) -> torch.Tensor:
    # an axis of length 1 has no differences along it
    if diff.numel() == 0:
        return diff.new_zeros(())
    return diff.abs().mean()


def sstv_loss(pred) -> torch.Tensor:
    """Spatial-spectral TV of an S x H x W cube or an N x S x H x W batch.

    Open-boundary forward differences along height, width and bands. For a
    batch of equally sized cubes the per-direction mean over the batch equals
    the per-image mean averaged over N.
    """
    x = _tensor(pred)
    if x.dim() == 3:
        x = x.unsqueeze(0)
    if x.dim() != 4:
        raise ValueError(f"expected S x H x W or N x S x H x W, got {tuple(x.shape)}")
    d_h = x[:, :, 1:, :] - x[:, :, :-1, :]
    d_w = x[:, :, :, 1:] - x[:, :, :, :-1]
    d_c = x[:, 1:, :, :] - x[:, :-1, :, :]
    return _mean_abs(d_h) + _mean_abs(d_w) + _mean_abs(d_c)


class LossValue(NamedTuple):
    total: torch.Tensor
    l1: torch.Tensor
    sstv: torch.Tensor

    def floats(self) -> tuple:
        return float(self.total.detach()), float(self.l1.detach()), float(self.sstv.detach())


def total_loss(pred, target) -> LossValue:
    """L1(pred, target) + SSTV(pred); the regulariser sees the prediction only."""
    pred, target = _tensor(pred), _tensor(target)
    _check_shapes(pred, target)
    l1 = l1_loss(pred, target)
    tv = sstv_loss(pred)
    return LossValue(l1 + tv, l1, tv)
