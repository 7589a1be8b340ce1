"""Exposure-stack merging into a radiance estimate with per-pixel variance.

Each frame contributes its relative radiance x = I/(t*g); the merged
estimate and its variance are

    mean = sum_i k_c x_i t_i / sum_i t_i
    var  = sum_i [k_c^2 x_i t_i + k_c^2 s2_read + k_c^2 s2_adc / g_i^2] / (sum_i t_i)^2

with saturated samples excluded per pixel.  Pixels with no usable sample
are flagged invalid.  The DN -> relative-radiance division lives here and
nowhere else.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imgcore import UncertainImage
from .noisemodel import ExposureMeta, NoiseParams

__all__ = ["ExposureStack", "merge", "DEFAULT_SATURATION_FRACTION"]

DEFAULT_SATURATION_FRACTION = 0.98


@dataclass
class ExposureStack:
    """Ordered exposure frames in relative-radiance units plus noise params.

    ``frames`` is a list of (x, meta) where x has shape (C, H, W) holding
    I/(t*g) and meta is the frame's :class:`ExposureMeta`.  ``valid``
    holds one boolean (C, H, W) mask per frame marking non-saturated
    samples (all True when built from unclipped data).
    """

    frames: list
    params: NoiseParams
    valid: list | None = None

    def __post_init__(self):
        if not self.frames:
            raise ValueError("exposure stack is empty")
        shape = None
        frames = []
        for x, meta in self.frames:
            x = np.asarray(x, dtype=np.float64)
            if x.ndim == 2:
                x = x[None]
            if x.ndim != 3 or x.shape[0] not in (1, 3):
                raise ValueError(f"frame must be (C,H,W) with C in (1,3), got {x.shape}")
            if shape is None:
                shape = x.shape
            elif x.shape != shape:
                raise ValueError(f"frame shape {x.shape} != first frame {shape}")
            if not isinstance(meta, ExposureMeta):
                meta = ExposureMeta(*meta)
            frames.append((x, meta))
        self.frames = frames
        if self.valid is not None:
            masks = []
            for m in self.valid:
                m = np.asarray(m, dtype=bool)
                if m.ndim == 2:
                    m = np.broadcast_to(m[None], shape).copy()
                if m.shape != shape:
                    raise ValueError(f"valid mask shape {m.shape} != frames {shape}")
                masks.append(m)
            if len(masks) != len(self.frames):
                raise ValueError("one valid mask per frame required")
            self.valid = masks

    @classmethod
    def from_raw(cls, frames_dn, metas, params, clip_level=None,
                 saturation_fraction=DEFAULT_SATURATION_FRACTION):
        """Build a stack from RAW DN frames, excluding saturated samples.

        A sample is saturated when its DN reaches
        ``saturation_fraction * clip_level``.  With ``clip_level=None``
        no sample is excluded.
        """
        frames = []
        masks = []
        for dn, meta in zip(frames_dn, metas):
            dn = np.asarray(dn, dtype=np.float64)
            if dn.ndim == 2:
                dn = dn[None]
            if not isinstance(meta, ExposureMeta):
                meta = ExposureMeta(*meta)
            frames.append((dn / (meta.t * meta.g), meta))
            if clip_level is None:
                masks.append(np.ones(dn.shape, dtype=bool))
            else:
                masks.append(dn < saturation_fraction * float(clip_level))
        return cls(frames, params, masks)

    @property
    def shape(self):
        return self.frames[0][0].shape


def merge(stack):
    """Merge an exposure stack into a diagonal-mode :class:`UncertainImage`.

    Pixels where every sample is saturated are flagged invalid (their
    mean/variance are set to 0).
    """
    if not isinstance(stack, ExposureStack):
        raise TypeError("merge expects an ExposureStack")
    shape = stack.shape
    channels = shape[0]
    k = np.asarray(stack.params.k[:channels] if channels == 3 else
                   (stack.params.k[0],), dtype=np.float64)
    s2_read = np.asarray(stack.params.sigma2_read[:channels] if channels == 3 else
                         (stack.params.sigma2_read[0],), dtype=np.float64)
    s2_adc = np.asarray(stack.params.sigma2_adc[:channels] if channels == 3 else
                        (stack.params.sigma2_adc[0],), dtype=np.float64)
    kc = k[:, None, None]
    rc = s2_read[:, None, None]
    ac = s2_adc[:, None, None]

    num = np.zeros(shape)
    var_num = np.zeros(shape)
    t_sum = np.zeros(shape)
    masks = stack.valid or [np.ones(shape, dtype=bool)] * len(stack.frames)
    for (x, meta), mask in zip(stack.frames, masks):
        t, g = meta.t, meta.g
        m = mask.astype(np.float64)
        num += m * kc * x * t
        var_num += m * (kc**2 * x * t + kc**2 * rc + kc**2 * ac / g**2)
        t_sum += m * t

    usable = t_sum > 0
    mean = np.zeros(shape)
    var = np.zeros(shape)
    np.divide(num, t_sum, out=mean, where=usable)
    np.divide(var_num, t_sum**2, out=var, where=usable)
    # the plug-in variance can dip below zero at near-dark pixels where a
    # sampled x is negative; variance is a non-negative quantity
    np.maximum(var, 0.0, out=var)

    valid = usable.all(axis=0)
    return UncertainImage(mean, var, "diag", None if valid.all() else valid)
