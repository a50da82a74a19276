"""Training losses: masked reconstruction plus Fourier-sparsity regularization.

Both losses divide by the full N*T grid size rather than the masked cell
count, so magnitudes shrink with sparser masks; the default regularization
weight is calibrated to that convention. Leading batch dimensions are
averaged, which keeps per-window values comparable across batch sizes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, abs_, add, mul, reduce_sum, scale, sub
from .errors import ContractError, DimensionError
from .spectral import spectrum_l1

DEFAULT_FOURIER_WEIGHT = 0.01
FOURIER_WEIGHT_SWEEP = (0.0, 0.001, 0.01, 0.1, 1.0)


@dataclass
class LossBreakdown:
    recon: Tensor
    fourier: Tensor
    total: Tensor
    weight: float

    def values(self):
        return {"recon": self.recon.item(), "fourier": self.fourier.item(),
                "total": self.total.item()}


def _as_mask(mask, shape, name):
    arr = mask.data if isinstance(mask, Tensor) else np.asarray(mask, dtype=np.float64)
    if arr.shape != shape:
        raise DimensionError(f"{name} shape {arr.shape} != prediction shape {shape}")
    if not np.all((arr == 0) | (arr == 1)):
        raise ContractError(f"{name} must be binary")
    return arr.astype(np.float64)


def _grid_cells(shape):
    # Per-window normalizer: N*T times the number of leading batch elements.
    return int(np.prod(shape))


def masked_l1_loss(pred, target, hidden_mask, observed_mask=None):
    """Mean absolute error over deliberately hidden observed cells.

    Normalized by the full grid size. When ``observed_mask`` is supplied,
    every hidden cell must be observed -- the guard that keeps evaluation
    cells out of supervision.
    """
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(target)
    if target.shape != pred.shape:
        raise DimensionError(f"target shape {target.shape} != prediction shape {pred.shape}")
    hidden = _as_mask(hidden_mask, pred.shape, "hidden_mask")
    if observed_mask is not None:
        observed = _as_mask(observed_mask, pred.shape, "observed_mask")
        if np.any(hidden > observed):
            raise ContractError("hidden_mask marks cells outside the observed set")
    residual = mul(sub(pred, target), Tensor(hidden))
    return scale(reduce_sum(abs_(residual)), 1.0 / _grid_cells(pred.shape))


def fourier_sparsity_loss(pred, target, missing_mask):
    """Spectrum l1 of the observation-completed matrix.

    Predictions fill the missing cells, ground observations fill the rest;
    gradient reaches the prediction only through missing cells.
    """
    if not isinstance(pred, Tensor):
        pred = Tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(target)
    if target.shape != pred.shape:
        raise DimensionError(f"target shape {target.shape} != prediction shape {pred.shape}")
    missing = _as_mask(missing_mask, pred.shape, "missing_mask")
    completed = add(mul(pred, Tensor(missing)), mul(target, Tensor(1.0 - missing)))
    return spectrum_l1(completed)


def combined_loss(pred, target, hidden_mask, missing_mask, weight,
                  observed_mask=None) -> LossBreakdown:
    """recon + weight * fourier, sharing one arithmetic path with its parts."""
    if weight < 0:
        raise ContractError(f"fourier weight must be >= 0, got {weight}")
    recon = masked_l1_loss(pred, target, hidden_mask, observed_mask=observed_mask)
    fourier = fourier_sparsity_loss(pred, target, missing_mask)
    total = add(recon, scale(fourier, weight))
    return LossBreakdown(recon=recon, fourier=fourier, total=total, weight=float(weight))
