"""Flat-field vignetting estimation and exact-variance correction.

The vignetting map is the flat-field measurement normalized by its own
maximum, per channel and without smoothing (dust shadows must survive).
Correction divides the mean by V and the variance by V^2, so the
coefficient of variation is invariant.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imgcore import UncertainImage

__all__ = ["VignettingMap", "estimate_vignette", "correct_vignette"]


@dataclass
class VignettingMap:
    """Per-channel relative transmission in (0, 1], max exactly 1."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 2:
            self.values = self.values[None]
        if self.values.ndim != 3 or self.values.shape[0] not in (1, 3):
            raise ValueError(f"vignetting map must be (C,H,W), got {self.values.shape}")
        if np.any(self.values <= 0):
            raise ValueError("vignetting map must be strictly positive")
        for ch in range(self.values.shape[0]):
            if not np.isclose(self.values[ch].max(), 1.0, rtol=0, atol=1e-9):
                raise ValueError("each vignetting channel must peak at exactly 1")

    @property
    def channels(self):
        return self.values.shape[0]

    def to_image(self):
        return UncertainImage(self.values.copy(), np.zeros_like(self.values), "diag")


def estimate_vignette(flat, extra_flats=()):
    """Estimate a vignetting map from one or more flat-field measurements.

    ``flat`` (and any ``extra_flats``) are HDR-merged, MTF-inverted
    captures of a uniform source.  Multiple captures are averaged
    element-wise before the per-channel max normalization.
    """
    captures = [flat, *extra_flats]
    means = []
    for cap in captures:
        if isinstance(cap, UncertainImage):
            if cap.mode != "diag":
                raise ValueError("flat fields must be diagonal-mode images")
            means.append(cap.mean)
        else:
            arr = np.asarray(cap, dtype=np.float64)
            means.append(arr[None] if arr.ndim == 2 else arr)
    stacked = means[0]
    for m in means[1:]:
        if m.shape != stacked.shape:
            raise ValueError("all flat fields must share dimensions")
    avg = np.mean(means, axis=0)

    out = np.empty_like(avg)
    for ch in range(avg.shape[0]):
        peak = avg[ch].max()
        if peak <= 0:
            raise ValueError(f"flat field channel {ch} has non-positive maximum")
        out[ch] = avg[ch] / peak
    if np.any(out <= 0):
        raise ValueError("flat field contains non-positive values")
    return VignettingMap(out)


def correct_vignette(img, vmap):
    """Divide mean by V and variance by V^2 (the map is treated as exact)."""
    if not isinstance(img, UncertainImage):
        raise TypeError("correct_vignette expects an UncertainImage")
    if img.mode != "diag":
        raise ValueError("vignetting correction applies to diagonal-mode images")
    v = vmap.values
    if v.shape[0] == 1 and img.channels == 3:
        v = np.broadcast_to(v, img.mean.shape)
    if v.shape != img.mean.shape:
        raise ValueError(f"vignetting map {v.shape} does not match image {img.mean.shape}")
    if np.any(v <= 0):
        raise ValueError("vignetting map must be strictly positive")
    return UncertainImage(
        img.mean / v,
        img.uncertainty / v**2,
        "diag",
        None if img.valid is None else img.valid.copy(),
    )
