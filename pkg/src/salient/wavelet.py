"""Single-level orthonormal 2D Haar transform and band utilities.

Band order is always ``[LL, LH, HL, HH]``. For each 2x2 block ``[[a, b], [c, d]]``::

    LL = (a + b + c + d) / 2
    LH = ((a + b) - (c + d)) / 2
    HL = ((a - b) + (c - d)) / 2
    HH = ((a - b) - (c - d)) / 2

The functions accept numpy arrays or torch tensors with arbitrary leading batch
dimensions; torch inputs stay differentiable.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from scipy import ndimage

from .errors import DimensionError, ValidationError

BANDS = ("LL", "LH", "HL", "HH")
LOG_EPS = 1e-6
DEFAULT_BASE_WEIGHTS = (1.0, 1.0, 1.0, 0.7)


def _stack(arrays, axis):
    if isinstance(arrays[0], torch.Tensor):
        return torch.stack(arrays, dim=axis)
    return np.stack(arrays, axis=axis)


def _all_finite(x) -> bool:
    if isinstance(x, torch.Tensor):
        return bool(torch.isfinite(x).all())
    return bool(np.isfinite(x).all())


def dwt2(x, check: bool = True):
    """Haar analysis of ``(..., H, W)`` into ``(..., 4, H/2, W/2)``."""
    h, w = x.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"dwt2 needs even dimensions, got {h}x{w}")
    if check and not _all_finite(x):
        raise ValidationError("dwt2 input contains non-finite values")
    a = x[..., 0::2, 0::2]
    b = x[..., 0::2, 1::2]
    c = x[..., 1::2, 0::2]
    d = x[..., 1::2, 1::2]
    ll = (a + b + c + d) / 2
    lh = ((a + b) - (c + d)) / 2
    hl = ((a - b) + (c - d)) / 2
    hh = ((a - b) - (c - d)) / 2
    return _stack([ll, lh, hl, hh], -3)


def idwt2(coeffs):
    """Exact inverse of :func:`dwt2`.

    ``coeffs`` is a ``(..., 4, h, w)`` stack or a sequence of four band arrays.
    """
    if isinstance(coeffs, (list, tuple)):
        shapes = {tuple(b.shape) for b in coeffs}
        if len(coeffs) != 4 or len(shapes) != 1:
            raise DimensionError(f"idwt2 needs four equally shaped bands, got {[tuple(b.shape) for b in coeffs]}")
        coeffs = _stack(list(coeffs), -3)
    if coeffs.ndim < 3 or coeffs.shape[-3] != 4:
        raise DimensionError(f"idwt2 expects (..., 4, h, w) bands, got shape {tuple(coeffs.shape)}")
    ll, lh, hl, hh = (coeffs[..., i, :, :] for i in range(4))
    a = (ll + lh + hl + hh) / 2
    b = (ll + lh - hl - hh) / 2
    c = (ll - lh + hl - hh) / 2
    d = (ll - lh - hl + hh) / 2
    h, w = ll.shape[-2:]
    lead = tuple(ll.shape[:-2])
    top = _stack([a, b], -1).reshape(*lead, h, 2 * w)
    bottom = _stack([c, d], -1).reshape(*lead, h, 2 * w)
    return _stack([top, bottom], -2).reshape(*lead, 2 * h, 2 * w)


def energy(x) -> float:
    if isinstance(x, torch.Tensor):
        return float((x.double() ** 2).sum())
    return float(np.sum(np.asarray(x, dtype=np.float64) ** 2))


@dataclass(frozen=True)
class BandStats:
    mean: np.ndarray
    std: np.ndarray
    log_std: np.ndarray

    def as_dict(self) -> dict[str, dict[str, float]]:
        return {
            band: {"mean": float(self.mean[i]), "std": float(self.std[i]), "log_std": float(self.log_std[i])}
            for i, band in enumerate(BANDS)
        }


def band_stats(coeffs) -> BandStats:
    """Per-band mean, population std and ``ln(std + 1e-6)`` of a ``(4, h, w)`` stack."""
    c = np.asarray(coeffs, dtype=np.float64)
    if c.ndim != 3 or c.shape[0] != 4 or c.shape[1] * c.shape[2] == 0:
        raise DimensionError(f"band_stats expects nonempty (4, h, w) coefficients, got {c.shape}")
    flat = c.reshape(4, -1)
    mean = flat.mean(axis=1)
    std = flat.std(axis=1)
    return BandStats(mean=mean, std=std, log_std=np.log(std + LOG_EPS))


def torch_band_moments(coeffs: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable per-sample, per-band mean and log-std of ``(N, 4, h, w)``.

    The variance is floored at 1e-24 before the square root so constant bands
    keep a finite gradient; the resulting std shift is far below ``LOG_EPS``.
    """
    flat = coeffs.flatten(-2)
    mean = flat.mean(-1)
    var = ((flat - mean.unsqueeze(-1)) ** 2).mean(-1)
    std = torch.sqrt(var.clamp_min(1e-24))
    return mean, torch.log(std + LOG_EPS)


_SQUARE = np.ones((3, 3), dtype=bool)


def morphological_gradient(mask: np.ndarray) -> np.ndarray:
    """Dilation minus erosion with a 3x3 square; outside the grid counts as zero."""
    m = np.asarray(mask).astype(bool)
    dil = ndimage.binary_dilation(m, structure=_SQUARE, border_value=0)
    ero = ndimage.binary_erosion(m, structure=_SQUARE, border_value=0)
    return dil & ~ero


def boundary_weight_map(mask_ds, base=DEFAULT_BASE_WEIGHTS, beta: float = 2.0, dilation: int = 2) -> np.ndarray:
    """Per-band weights ``base[b] * (1 + beta * boundary)`` on the half-resolution grid."""
    base = np.asarray(base, dtype=np.float64)
    if base.shape != (4,):
        raise ValidationError(f"need 4 base weights, got {base.shape}")
    if (base < 0).any() or beta < 0:
        raise ValidationError("base weights and beta must be nonnegative")
    if dilation < 0:
        raise ValidationError("dilation must be >= 0")
    m = np.asarray(mask_ds)
    if m.ndim != 2 or not np.isin(m, (0, 1)).all():
        raise ValidationError("mask_ds must be a binary 2D grid")
    boundary = morphological_gradient(m)
    if dilation:
        boundary = ndimage.binary_dilation(boundary, structure=_SQUARE, iterations=dilation, border_value=0)
    gain = 1.0 + beta * boundary.astype(np.float64)
    return base[:, None, None] * gain[None]


def downsample_mask(mask):
    """2x2 max-pool of a binary ``(..., H, W)`` mask."""
    m = np.asarray(mask)
    h, w = m.shape[-2:]
    if h % 2 or w % 2:
        raise DimensionError(f"mask dimensions must be even, got {h}x{w}")
    return m.reshape(*m.shape[:-2], h // 2, 2, w // 2, 2).max(axis=(-3, -1))
