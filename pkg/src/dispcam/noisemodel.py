"""Sensor noise model and its two-stage parameter estimation.

A RAW digital value in channel ``c`` is modeled as

    I_c ~ k_c * ( Pois((psi + d) * t) * g + N(0, s2_read_c) * g + N(0, s2_adc_c) )

with exposure time ``t`` in seconds and gain ``g = ISO/100``.  The
implied variance of I as a function of its mean is

    var(I) = mean(I) * g * k_c + s2_read_c * g^2 * k_c^2 + s2_adc_c * k_c^2

which is what the two fitting stages below estimate: stage 1 fits the
linear mean/variance relationship of bright uniform fields to recover
k_c, stage 2 fits a quadratic in g on dark frames to recover the read
and ADC variances.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "CHANNELS",
    "NoiseParams",
    "ExposureMeta",
    "predict_variance",
    "fit_gain",
    "fit_read_adc",
    "ReadAdcFit",
]

CHANNELS = ("r", "g", "b")


@dataclass(frozen=True)
class NoiseParams:
    """Per-channel noise parameters plus an optional dark offset.

    k: DN per photo-electron; sigma2_read in e-^2; sigma2_adc in DN^2.
    The dark offset is kept for completeness but defaults to 0 (dark
    current below measurement noise in the calibrated exposure range).
    """

    k: tuple[float, float, float]
    sigma2_read: tuple[float, float, float]
    sigma2_adc: tuple[float, float, float]
    dark_offset: float = 0.0

    def __post_init__(self):
        for name in ("k", "sigma2_read", "sigma2_adc"):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) != 3:
                raise ValueError(f"{name} must have 3 entries")
            object.__setattr__(self, name, vals)
        if any(v <= 0 for v in self.k):
            raise ValueError("k must be positive for every channel")
        if any(v < 0 for v in self.sigma2_read) or any(v < 0 for v in self.sigma2_adc):
            raise ValueError("noise variances must be non-negative")

    def channel(self, c):
        i = CHANNELS.index(c) if isinstance(c, str) else int(c)
        return self.k[i], self.sigma2_read[i], self.sigma2_adc[i]


@dataclass(frozen=True)
class ExposureMeta:
    """Exposure time in seconds and gain = ISO/100."""

    t: float
    g: float

    def __post_init__(self):
        if not (self.t > 0):
            raise ValueError(f"exposure time must be positive, got {self.t}")
        if not (self.g > 0):
            raise ValueError(f"gain must be positive, got {self.g}")


def predict_variance(mean_dn, meta, params, channel):
    """Variance of a RAW value given its mean, exposure meta and noise params.

    Accepts scalars or arrays for ``mean_dn``.
    """
    mean_dn = np.asarray(mean_dn, dtype=np.float64)
    if np.any(mean_dn < 0):
        raise ValueError("mean DN must be non-negative")
    k, s2_read, s2_adc = params.channel(channel)
    g = meta.g
    out = mean_dn * g * k + s2_read * g * g * k * k + s2_adc * k * k
    return out if out.ndim else float(out)


def fit_gain(samples, g, mean_floor=50.0):
    """Stage-1 fit: recover k from (mean, variance) pairs of bright fields.

    ``samples`` is a sequence of (mean_DN, var_DN2) pairs measured at
    fixed gain ``g``.  An ordinary least-squares line is fitted through
    the pairs with mean above ``mean_floor`` (where the constant dark
    terms are negligible); k is the slope divided by g.
    """
    pts = np.asarray(list(samples), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("samples must be (mean, var) pairs")
    keep = pts[:, 0] >= mean_floor
    pts = pts[keep]
    means = pts[:, 0]
    if len(np.unique(means)) < 2:
        raise ValueError(
            "gain fit needs at least 2 distinct mean levels above the floor"
        )
    design = np.column_stack([means, np.ones_like(means)])
    coef, *_ = np.linalg.lstsq(design, pts[:, 1], rcond=None)
    slope = coef[0]
    if slope <= 0:
        raise ValueError(f"fitted mean/variance slope {slope:g} is not positive")
    return slope / float(g)


@dataclass
class ReadAdcFit:
    sigma2_read: float
    sigma2_adc: float
    clamped_read: bool = False
    clamped_adc: bool = False


def fit_read_adc(samples, k):
    """Stage-2 fit: recover read/ADC variances from dark-frame statistics.

    ``samples`` is a sequence of (g, var_DN2) pairs measured with the lens
    covered (mean DN ~ 0) at varying gain.  Fits
    ``var = s2_read * g^2 * k^2 + s2_adc * k^2`` by least squares.
    Negative solutions are clamped to 0 with a warning flag.
    """
    pts = np.asarray(list(samples), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError("samples must be (g, var) pairs")
    gains = pts[:, 0]
    if np.any(gains <= 0):
        raise ValueError("gains must be positive")
    if len(np.unique(gains)) < 2:
        raise ValueError("read/ADC fit needs at least 2 distinct gains")
    k = float(k)
    design = np.column_stack([gains**2 * k * k, np.full_like(gains, k * k)])
    coef, *_ = np.linalg.lstsq(design, pts[:, 1], rcond=None)
    s2_read, s2_adc = float(coef[0]), float(coef[1])
    result = ReadAdcFit(s2_read, s2_adc)
    if s2_read < 0:
        warnings.warn("fitted read variance was negative; clamped to 0")
        result.sigma2_read = 0.0
        result.clamped_read = True
    if s2_adc < 0:
        warnings.warn("fitted ADC variance was negative; clamped to 0")
        result.sigma2_adc = 0.0
        result.clamped_adc = True
    return result
