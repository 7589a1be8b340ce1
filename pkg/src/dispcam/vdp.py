"""Structural visual-difference predictor producing JOD scores and distributions.

The backbone follows the usual full-reference shape: XYZ inputs are
transformed into an opponent (DKL-style) space, each channel is
decomposed by a Laplacian pyramid, band contrasts are weighted by a
log-parabola contrast sensitivity function and passed through a masked
transducer, and the per-pixel responses are beta-pooled over space,
bands and channels into a quality score on the JOD scale (10 means
identical).  Parameter values are configuration, not calibration: tests
assert invariants and orderings, never absolute scores.

Measurement uncertainty is propagated by Monte Carlo: test images are
drawn from the per-pixel multivariate normal produced by the camera
pipeline and scored under an ensemble of parameter sets.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imgcore import ImagePlane, UncertainImage

__all__ = [
    "ViewingConfig",
    "VdpParamSet",
    "JodDistribution",
    "BASE_PARAMS",
    "xyz_to_dkl",
    "laplacian_pyramid",
    "collapse_pyramid",
    "jod_score",
    "jod_distribution",
    "jitter_paramsets",
    "rescale_small_stimulus_jod",
    "sample_full_covariance",
    "save_paramsets",
    "load_paramsets",
]

# Hunt-Pointer-Estevez XYZ -> LMS (equal-energy normalization)
_XYZ_TO_LMS = np.array(
    [
        [0.38971, 0.68898, -0.07868],
        [-0.22981, 1.18340, 0.04641],
        [0.0, 0.0, 1.0],
    ]
)
_D65_XYZ = np.array([0.95047, 1.0, 1.08883])


def _dkl_matrix():
    lms_w = _XYZ_TO_LMS @ _D65_XYZ
    lw, mw, sw = lms_w
    # rows: achromatic (L+M), red-green (L - (Lw/Mw) M), yellow-violet
    # (S - (Sw/(Lw+Mw)) (L+M)); all vanish on the D65 gray axis except the
    # first, which is normalized to equal Y for D65-chromaticity input
    opp = np.array(
        [
            [1.0, 1.0, 0.0],
            [1.0, -lw / mw, 0.0],
            [-sw / (lw + mw), -sw / (lw + mw), 1.0],
        ]
    )
    m = opp @ _XYZ_TO_LMS
    m[0] /= lw + mw
    return m

_XYZ_TO_DKL = _dkl_matrix()


def xyz_to_dkl(xyz):
    """Map an XYZ image (3,H,W) to opponent planes (achromatic, RG, YV).

    The transform is linear; D65-chromaticity input lands on the
    achromatic axis (RG = YV = 0) with the achromatic plane equal to Y.
    """
    xyz = np.asarray(xyz, dtype=np.float64)
    if xyz.ndim != 3 or xyz.shape[0] != 3:
        raise ValueError(f"expected (3,H,W) XYZ image, got {xyz.shape}")
    return np.einsum("ij,jhw->ihw", _XYZ_TO_DKL, xyz)


_PYR_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def _blur_sep(plane, kernel):
    pad = len(kernel) // 2
    padded = np.pad(plane, ((pad, pad), (0, 0)), mode="reflect")
    out = np.zeros_like(plane)
    for i, k in enumerate(kernel):
        out += k * padded[i : i + plane.shape[0], :]
    padded = np.pad(out, ((0, 0), (pad, pad)), mode="reflect")
    out2 = np.zeros_like(plane)
    for i, k in enumerate(kernel):
        out2 += k * padded[:, i : i + plane.shape[1]]
    return out2


def _reduce(plane):
    return _blur_sep(plane, _PYR_KERNEL)[::2, ::2]


def _expand(plane, shape):
    up = np.zeros(shape)
    up[::2, ::2] = plane
    return _blur_sep(up, 2.0 * _PYR_KERNEL)


def laplacian_pyramid(plane, levels):
    """Decompose a plane into ``levels`` band-pass bands plus a low-pass base.

    ``collapse_pyramid`` reconstructs the input to float round-off.
    """
    plane = np.asarray(plane, dtype=np.float64)
    if plane.ndim != 2:
        raise ValueError("pyramid input must be a 2-D plane")
    max_levels = int(math.log2(min(plane.shape))) - 2
    if levels < 1 or levels > max_levels:
        raise ValueError(
            f"levels must be in [1, {max_levels}] for shape {plane.shape}"
        )
    bands = []
    g = plane
    for _ in range(levels):
        down = _reduce(g)
        bands.append(g - _expand(down, g.shape))
        g = down
    return bands, g


def collapse_pyramid(bands, base):
    """Invert :func:`laplacian_pyramid`."""
    g = base
    for band in reversed(bands):
        g = band + _expand(g, band.shape)
    return g


@dataclass(frozen=True)
class ViewingConfig:
    """Angular resolution and luminance context of the observation."""

    ppd: float
    peak_luminance: float = 200.0
    mean_luminance: float = 100.0

    def __post_init__(self):
        if not (self.ppd > 0):
            raise ValueError("pixels-per-degree must be positive")


@dataclass(frozen=True)
class VdpParamSet:
    """Per-channel log-parabola CSF plus masking and pooling exponents.

    Channels are ordered (achromatic, RG, YV); the chromatic channels use
    the low-pass truncation of the log-parabola.  ``jod_slope`` converts
    pooled contrast difference to JOD loss.
    """

    csf_peak_sensitivity: tuple = (120.0, 160.0, 75.0)
    csf_peak_frequency: tuple = (3.0, 0.5, 0.35)
    csf_bandwidth: tuple = (1.1, 1.4, 1.4)
    masking_p: float = 2.2
    masking_q: float = 2.0
    pooling_beta: float = 2.5
    jod_slope: float = 0.8

    def __post_init__(self):
        for name in ("csf_peak_sensitivity", "csf_peak_frequency", "csf_bandwidth"):
            vals = tuple(float(v) for v in getattr(self, name))
            if len(vals) != 3 or any(v <= 0 for v in vals):
                raise ValueError(f"{name} must be 3 positive values")
            object.__setattr__(self, name, vals)
        if self.pooling_beta < 1:
            raise ValueError("pooling exponent must be >= 1")
        if self.masking_p < 1 or self.masking_q < 0:
            raise ValueError("masking exponents out of range")
        if self.jod_slope <= 0:
            raise ValueError("jod slope must be positive")

    def csf(self, frequency, channel):
        """Sensitivity at ``frequency`` cyc/deg for channel 0..2."""
        s_pk = self.csf_peak_sensitivity[channel]
        f_pk = self.csf_peak_frequency[channel]
        bw = self.csf_bandwidth[channel]
        f = max(float(frequency), 1e-6)
        if channel > 0 and f < f_pk:
            return s_pk  # low-pass chromatic channels
        return s_pk * 10.0 ** (-(((math.log10(f) - math.log10(f_pk)) / bw) ** 2))


BASE_PARAMS = VdpParamSet()


@dataclass
class JodDistribution:
    """Sampled JOD values with summary statistics and a difference heatmap."""

    samples: np.ndarray
    mean: float
    std: float
    min: float
    max: float
    heatmap: ImagePlane

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if np.any(self.samples > 10.0 + 1e-12):
            raise ValueError("JOD samples cannot exceed 10")
        stats = (self.samples.mean(), self.samples.std(), self.samples.min(),
                 self.samples.max())
        for val, ref in zip((self.mean, self.std, self.min, self.max), stats):
            if not math.isclose(val, ref, rel_tol=1e-9, abs_tol=1e-9):
                raise ValueError("summary statistics inconsistent with samples")


def _mean_planes(img):
    if isinstance(img, UncertainImage):
        return img.mean
    arr = np.asarray(img, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError("expected an UncertainImage or a (3,H,W) array")
    return arr


def _auto_levels(shape):
    return max(1, int(math.log2(min(shape))) - 2)


def jod_score(test, ref, view, params=BASE_PARAMS, levels=None):
    """Score the perceptual difference between test and reference XYZ images.

    Returns (jod, heatmap): ``jod`` is 10 for identical inputs and
    decreases with distortion magnitude; ``heatmap`` is the per-pixel
    pooled difference before spatial pooling.
    """
    test = _mean_planes(test)
    ref = _mean_planes(ref)
    if test.shape != ref.shape:
        raise ValueError(f"test {test.shape} and reference {ref.shape} differ")
    h, w = test.shape[1:]
    if levels is None:
        levels = _auto_levels((h, w))

    dkl_t = xyz_to_dkl(test)
    dkl_r = xyz_to_dkl(ref)

    # local adaptation from the reference achromatic channel
    adapt_floor = max(1e-4 * max(float(np.abs(dkl_r[0]).max()), 1e-12),
                      1e-3 * view.mean_luminance * 1e-3)
    beta = params.pooling_beta
    band_pools = []
    heat = np.zeros((h, w))

    pyr_t = [laplacian_pyramid(dkl_t[c], levels) for c in range(3)]
    pyr_r = [laplacian_pyramid(dkl_r[c], levels) for c in range(3)]
    gauss_r = [dkl_r[0]]
    for _ in range(levels):
        gauss_r.append(_reduce(gauss_r[-1]))

    for lev in range(levels + 1):
        rho = view.ppd / 2.0 ** (lev + 1)
        if lev < levels:
            bands_t = [pyr_t[c][0][lev] for c in range(3)]
            bands_r = [pyr_r[c][0][lev] for c in range(3)]
            adapt = _expand(gauss_r[lev + 1], bands_r[0].shape)
        else:
            # base band: residual low-pass lands here
            bands_t = [pyr_t[c][1] for c in range(3)]
            bands_r = [pyr_r[c][1] for c in range(3)]
            adapt = gauss_r[levels]
        adapt = np.maximum(np.abs(adapt), adapt_floor)

        level_heat = np.zeros(bands_r[0].shape)
        for ch in range(3):
            sens = params.csf(rho, ch)
            c_t = bands_t[ch] / adapt * sens
            c_r = bands_r[ch] / adapt * sens
            d = np.abs(c_t - c_r)
            m = np.abs(c_r)
            response = d**params.masking_p / (1.0 + m**params.masking_q)
            band_pools.append(float(np.mean(response**beta)))
            level_heat += response**beta
        scale = (h / level_heat.shape[0], w / level_heat.shape[1])
        rows = np.minimum((np.arange(h) / scale[0]).astype(int),
                          level_heat.shape[0] - 1)
        cols = np.minimum((np.arange(w) / scale[1]).astype(int),
                          level_heat.shape[1] - 1)
        heat += level_heat[rows[:, None], cols[None, :]]

    pooled = float(np.mean(band_pools)) ** (1.0 / beta)
    jod = 10.0 - params.jod_slope * pooled
    heatmap = ImagePlane((heat / (levels + 1)) ** (1.0 / beta))
    return jod, heatmap


def jitter_paramsets(base, n, seed=0, rel_sigma=0.1):
    """An ensemble of parameter sets log-jittered around ``base``.

    Emulates train-split variability when no trained sets are available;
    all invariants (positivity, beta >= 1) are preserved by construction.
    """
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(77,)))
    sets = []
    for _ in range(n):
        def lj(v):
            return float(v) * math.exp(rel_sigma * rng.standard_normal())

        sets.append(
            VdpParamSet(
                csf_peak_sensitivity=tuple(lj(v) for v in base.csf_peak_sensitivity),
                csf_peak_frequency=tuple(lj(v) for v in base.csf_peak_frequency),
                csf_bandwidth=tuple(lj(v) for v in base.csf_bandwidth),
                masking_p=1.0 + (base.masking_p - 1.0) * math.exp(
                    rel_sigma * rng.standard_normal()
                ),
                masking_q=lj(base.masking_q),
                pooling_beta=1.0 + (base.pooling_beta - 1.0) * math.exp(
                    rel_sigma * rng.standard_normal()
                ),
                jod_slope=lj(base.jod_slope),
            )
        )
    return sets


def _cholesky_3x3(cov):
    """Vectorized lower-Cholesky of per-pixel 3x3 covariances (N,3,3).

    Raises naming the first offending pixel when a matrix is not PSD
    (beyond a small numerical tolerance).
    """
    c = cov.copy()
    scale = np.maximum(c[:, 0, 0] + c[:, 1, 1] + c[:, 2, 2], 1e-300)
    tol = 1e-10 * scale

    def fail(mask, what):
        if np.any(mask):
            idx = int(np.nonzero(mask)[0][0])
            raise ValueError(f"covariance not positive semidefinite at pixel {idx} ({what})")

    l = np.zeros_like(c)
    d0 = c[:, 0, 0]
    fail(d0 < -tol, "var_x < 0")
    l[:, 0, 0] = np.sqrt(np.maximum(d0, 0.0))
    safe0 = l[:, 0, 0] > 0
    for i in (1, 2):
        l[:, i, 0] = np.where(safe0, c[:, i, 0] / np.where(safe0, l[:, 0, 0], 1.0), 0.0)
        fail(~safe0 & (np.abs(c[:, i, 0]) > tol), "rank deficiency with nonzero cross term")
    d1 = c[:, 1, 1] - l[:, 1, 0] ** 2
    fail(d1 < -tol, "second pivot negative")
    l[:, 1, 1] = np.sqrt(np.maximum(d1, 0.0))
    safe1 = l[:, 1, 1] > 0
    num = c[:, 2, 1] - l[:, 2, 0] * l[:, 1, 0]
    l[:, 2, 1] = np.where(safe1, num / np.where(safe1, l[:, 1, 1], 1.0), 0.0)
    fail(~safe1 & (np.abs(num) > tol), "rank deficiency with nonzero cross term")
    d2 = c[:, 2, 2] - l[:, 2, 0] ** 2 - l[:, 2, 1] ** 2
    fail(d2 < -tol, "third pivot negative")
    l[:, 2, 2] = np.sqrt(np.maximum(d2, 0.0))
    return l


def sample_full_covariance(img, rng):
    """Draw one realization of an uncertain image (independent pixels).

    Full-covariance pixels use a vectorized 3x3 Cholesky; diagonal-mode
    images reduce to independent per-channel draws.
    """
    h, w = img.height, img.width
    if img.mode == "diag":
        z = rng.standard_normal(img.mean.shape)
        return img.mean + np.sqrt(img.uncertainty) * z
    cov = img.uncertainty.reshape(3, 3, -1).transpose(2, 0, 1)
    l = _cholesky_3x3(cov)
    z = rng.standard_normal((h * w, 3))
    delta = np.einsum("nij,nj->ni", l, z)
    return img.mean + delta.T.reshape(3, h, w)


def jod_distribution(test, ref, view, paramsets=None, n_samples=100, seed=0,
                     levels=None):
    """Monte Carlo JOD distribution under measurement and model uncertainty.

    Draws ``n_samples`` test images from the per-pixel multivariate
    normal of ``test`` (pixels independent, consistent with the
    conservative resampling) and scores every (sample, paramset) pair;
    the default 21-set ensemble yields 2100 JOD values.  Deterministic
    for a fixed seed.
    """
    if not isinstance(test, UncertainImage):
        raise TypeError("jod_distribution needs an UncertainImage test input")
    if n_samples < 1:
        raise ValueError("need at least one Monte Carlo sample")
    if paramsets is None:
        paramsets = jitter_paramsets(BASE_PARAMS, 21, seed=seed)
    if not paramsets:
        raise ValueError("need at least one parameter set")

    ref_mean = _mean_planes(ref)
    streams = np.random.SeedSequence(seed).spawn(n_samples)
    jods = np.empty((n_samples, len(paramsets)))
    zero_cov = not np.any(test.uncertainty)
    for i, stream in enumerate(streams):
        if zero_cov:
            sample = test.mean
        else:
            sample = sample_full_covariance(test, np.random.default_rng(stream))
        for j, ps in enumerate(paramsets):
            jods[i, j], _ = jod_score(sample, ref_mean, view, ps, levels=levels)

    _, heatmap = jod_score(test.mean, ref_mean, view, paramsets[0], levels=levels)
    flat = jods.ravel()
    return JodDistribution(
        samples=flat,
        mean=float(flat.mean()),
        std=float(flat.std()),
        min=float(flat.min()),
        max=float(flat.max()),
        heatmap=heatmap,
    )


def rescale_small_stimulus_jod(jod):
    """Rescale a full-field JOD for very small stimuli.

    JOD_scale = min(11.35 - 20 * (10 - JOD), 10); the identity point 10
    is a fixed point of the clamp.
    """
    jod = float(jod)
    if jod > 10.0:
        raise ValueError("JOD values cannot exceed 10")
    return min(11.35 - 20.0 * (10.0 - jod), 10.0)


def save_paramsets(paramsets, path):
    """Write parameter sets as a structured text file, one section per set."""
    import configparser

    cp = configparser.ConfigParser()
    for i, ps in enumerate(paramsets):
        sec = f"paramset{i}"
        cp.add_section(sec)
        cp[sec]["csf_peak_sensitivity"] = ",".join(f"{v!r}" for v in ps.csf_peak_sensitivity)
        cp[sec]["csf_peak_frequency"] = ",".join(f"{v!r}" for v in ps.csf_peak_frequency)
        cp[sec]["csf_bandwidth"] = ",".join(f"{v!r}" for v in ps.csf_bandwidth)
        cp[sec]["masking_p"] = repr(ps.masking_p)
        cp[sec]["masking_q"] = repr(ps.masking_q)
        cp[sec]["pooling_beta"] = repr(ps.pooling_beta)
        cp[sec]["jod_slope"] = repr(ps.jod_slope)
    with open(path, "w") as fh:
        cp.write(fh)


def load_paramsets(path):
    """Read parameter sets written by :func:`save_paramsets`."""
    import configparser

    cp = configparser.ConfigParser()
    with open(path) as fh:
        cp.read_file(fh)
    sets = []
    for sec in cp.sections():
        get = cp[sec]
        sets.append(
            VdpParamSet(
                csf_peak_sensitivity=tuple(float(v) for v in get["csf_peak_sensitivity"].split(",")),
                csf_peak_frequency=tuple(float(v) for v in get["csf_peak_frequency"].split(",")),
                csf_bandwidth=tuple(float(v) for v in get["csf_bandwidth"].split(",")),
                masking_p=float(get["masking_p"]),
                masking_q=float(get["masking_q"]),
                pooling_beta=float(get["pooling_beta"]),
                jod_slope=float(get["jod_slope"]),
            )
        )
    return sets
