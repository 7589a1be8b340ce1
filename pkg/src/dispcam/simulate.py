"""Forward camera/display model: the ground-truth oracle for every inverse stage.

Rendering composes, in order: display emission (piecewise-constant pixel
cells with optional fill factor and RGB stripes) -> spectral integration
to camera RGB -> inverse geometric warp onto the raw sensor grid ->
convolution with the PSF (inverse transform of the true, unclamped MTF)
-> vignetting -> per-exposure Poisson photon noise plus Gaussian
read/ADC noise.  Every stage is the exact adjoint target of one inverse
module, and rendering is bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .defects import DefectPattern
from .geometry import (
    DistortionParams,
    Homography,
    apply_homography,
    invert_distortion,
)
from .hdrmerge import ExposureStack
from .imgcore import UncertainImage
from .mtf import MtfModel
from .noisemodel import ExposureMeta, NoiseParams
from .vignette import VignettingMap

__all__ = [
    "SpectralModel",
    "SceneTruth",
    "GroundTruthCalib",
    "integrate_spectra",
    "render_capture",
    "gen_defect_pattern",
    "gen_uniformity_stimulus",
    "gen_checkerboard",
    "cos4_vignetting",
    "piecewise_gaussian",
]

_DEFAULT_SPECTRA_FILE = "default_spectra.csv"
_SPECTRA_COLUMNS = (
    "lambda_nm", "e_r", "e_g", "e_b", "c_r", "c_g", "c_b", "xbar", "ybar", "zbar",
)


def piecewise_gaussian(lam, mu, sigma_lo, sigma_hi):
    """Gaussian lobe with different widths below/above the peak wavelength."""
    lam = np.asarray(lam, dtype=np.float64)
    sigma = np.where(lam < mu, sigma_lo, sigma_hi)
    return np.exp(-0.5 * ((lam - mu) / sigma) ** 2)


def _cmf_1931_approx(lam):
    """Multi-lobe Gaussian approximation of the CIE 1931 2-deg observer."""
    x = (
        1.056 * piecewise_gaussian(lam, 599.8, 37.9, 31.0)
        + 0.362 * piecewise_gaussian(lam, 442.0, 16.0, 26.7)
        - 0.065 * piecewise_gaussian(lam, 501.1, 20.4, 26.2)
    )
    y = 0.821 * piecewise_gaussian(lam, 568.8, 46.9, 40.5) + 0.286 * piecewise_gaussian(
        lam, 530.9, 16.3, 31.1
    )
    z = 1.217 * piecewise_gaussian(lam, 437.0, 11.8, 36.0) + 0.681 * piecewise_gaussian(
        lam, 459.0, 26.0, 13.8
    )
    return np.clip(np.stack([x, y, z]), 0.0, None)


@dataclass
class SpectralModel:
    """Wavelength grid, display primary SPDs, camera sensitivities and CMFs.

    All curves share one uniform wavelength grid and must be non-negative.
    """

    wavelengths: np.ndarray
    primaries: np.ndarray  # (3, n): R, G, B subpixel SPDs at unit drive
    camera: np.ndarray  # (3, n): camera channel sensitivities
    cmfs: np.ndarray  # (3, n): xbar, ybar, zbar

    def __post_init__(self):
        self.wavelengths = np.asarray(self.wavelengths, dtype=np.float64)
        steps = np.diff(self.wavelengths)
        if len(steps) < 2 or not np.allclose(steps, steps[0]):
            raise ValueError("wavelength grid must be uniform")
        for name in ("primaries", "camera", "cmfs"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (3, self.wavelengths.size):
                raise ValueError(f"{name} must be (3, n_wavelengths)")
            if np.any(arr < 0):
                raise ValueError(f"{name} must be non-negative")
            setattr(self, name, arr)

    @classmethod
    def default(cls):
        """Load the spectra shipped with the package."""
        path = resources.files(__package__).joinpath("data", _DEFAULT_SPECTRA_FILE)
        with path.open("r") as fh:
            return cls.from_csv(fh)

    @classmethod
    def from_csv(cls, fh_or_path):
        """Load curves from a CSV with the canonical column header."""
        data = np.genfromtxt(fh_or_path, delimiter=",", names=True)
        missing = [c for c in _SPECTRA_COLUMNS if c not in data.dtype.names]
        if missing:
            raise ValueError(f"spectra CSV is missing columns {missing}")
        return cls(
            data["lambda_nm"],
            np.stack([data["e_r"], data["e_g"], data["e_b"]]),
            np.stack([data["c_r"], data["c_g"], data["c_b"]]),
            np.stack([data["xbar"], data["ybar"], data["zbar"]]),
        )

    @classmethod
    def synthesize(cls, lam_start=380.0, lam_stop=780.0, lam_step=2.0,
                   primary_peaks=(610.0, 545.0, 465.0), primary_sigma=20.0,
                   camera_peaks=(598.0, 536.0, 462.0),
                   camera_sigmas=((28.0, 42.0), (38.0, 40.0), (30.0, 38.0)),
                   observer_camera=False):
        """Build a smooth synthetic model: Gaussian primaries, wide camera lobes.

        With ``observer_camera=True`` the camera sensitivities are set to
        the CMFs (a colorimetric camera), making the true color matrix the
        identity.
        """
        lam = np.arange(lam_start, lam_stop + 0.5 * lam_step, lam_step)
        primaries = np.stack(
            [np.exp(-0.5 * ((lam - p) / primary_sigma) ** 2) for p in primary_peaks]
        )
        cmfs = _cmf_1931_approx(lam)
        if observer_camera:
            camera = cmfs.copy()
        else:
            camera = np.stack(
                [
                    piecewise_gaussian(lam, mu, lo, hi)
                    for mu, (lo, hi) in zip(camera_peaks, camera_sigmas)
                ]
            )
        return cls(lam, primaries, camera, cmfs)

    def to_csv(self, path):
        header = ",".join(_SPECTRA_COLUMNS)
        table = np.column_stack(
            [self.wavelengths, *self.primaries, *self.camera, *self.cmfs]
        )
        np.savetxt(path, table, delimiter=",", header=header, comments="",
                   fmt="%.8g")

    def camera_basis(self):
        """3x3 matrix: column k is the camera RGB response of primary k."""
        return np.stack(
            [
                [np.trapezoid(self.primaries[k] * self.camera[c], self.wavelengths)
                 for k in range(3)]
                for c in range(3)
            ]
        )

    def xyz_basis(self):
        """3x3 matrix: column k is the CIE XYZ of primary k at unit drive."""
        return np.stack(
            [
                [np.trapezoid(self.primaries[k] * self.cmfs[c], self.wavelengths)
                 for k in range(3)]
                for c in range(3)
            ]
        )


def integrate_spectra(spectral, subpixel_values):
    """Camera RGB, CIE XYZ and the exact color matrix for a subpixel triple.

    Returns (camera_rgb, xyz, color_matrix) where color_matrix maps camera
    RGB to XYZ exactly for any drive of the three primaries.  Raises if the
    camera cannot distinguish the primaries (singular basis).
    """
    p = np.asarray(subpixel_values, dtype=np.float64)
    a_cam = spectral.camera_basis()
    a_xyz = spectral.xyz_basis()
    cond = np.linalg.cond(a_cam)
    if not np.isfinite(cond) or cond > 1e12:
        raise ValueError("camera basis is singular: metameric primaries")
    rgb = a_cam @ p
    xyz = a_xyz @ p
    return rgb, xyz, a_xyz @ np.linalg.inv(a_cam)


@dataclass
class SceneTruth:
    """Linearized display subpixel values on the display grid.

    ``subpixels`` has shape (3, h_d, w_d) with values in [0, 1];
    ``radiometric_scale`` converts the unit-drive XYZ integrals to
    absolute units (cd/m^2 for Y).
    """

    subpixels: np.ndarray
    radiometric_scale: float = 1.0

    def __post_init__(self):
        self.subpixels = np.asarray(self.subpixels, dtype=np.float64)
        if self.subpixels.ndim == 2:
            self.subpixels = np.broadcast_to(
                self.subpixels[None], (3,) + self.subpixels.shape
            ).copy()
        if self.subpixels.ndim != 3 or self.subpixels.shape[0] != 3:
            raise ValueError(f"subpixels must be (3,h,w), got {self.subpixels.shape}")
        if np.any(self.subpixels < 0) or np.any(self.subpixels > 1):
            raise ValueError("subpixel values must lie in [0, 1]")
        if not (self.radiometric_scale > 0):
            raise ValueError("radiometric scale must be positive")

    @property
    def display_dims(self):
        return self.subpixels.shape[2], self.subpixels.shape[1]

    def camera_rgb_image(self, spectral):
        """Per-display-pixel camera RGB radiance (spectral units)."""
        return np.einsum("ck,khw->chw", spectral.camera_basis(), self.subpixels)

    def xyz_image(self, spectral):
        """Per-display-pixel absolute XYZ."""
        return self.radiometric_scale * np.einsum(
            "ck,khw->chw", spectral.xyz_basis(), self.subpixels
        )

    def grid_image(self, values, oversampling):
        """Replicate per-display-pixel values onto the (o*w+1)x(o*h+1) grid.

        Grid samples take the value of the display pixel cell containing
        them; samples on the outer boundary use the nearest cell.
        """
        o = int(oversampling)
        w_d, h_d = self.display_dims
        values = np.asarray(values, dtype=np.float64)
        cols = np.minimum(np.arange(o * w_d + 1) // o, w_d - 1)
        rows = np.minimum(np.arange(o * h_d + 1) // o, h_d - 1)
        return values[..., rows[:, None], cols[None, :]]


@dataclass
class GroundTruthCalib:
    """The simulator's exact calibration, consumable by the inverse pipeline.

    ``color_matrix`` maps merged-pipeline camera RGB (which carries the
    k_c^2 gain factors and the electrons-per-unit scale) to absolute XYZ.
    """

    noise: NoiseParams
    raw_dims: tuple
    homography: Homography
    distortion: DistortionParams = field(default_factory=DistortionParams)
    mtf: MtfModel | None = None
    vignetting: VignettingMap | None = None
    color_matrix: np.ndarray | None = None
    electrons_per_unit: float = 1.0

    def __post_init__(self):
        self.raw_dims = (int(self.raw_dims[0]), int(self.raw_dims[1]))
        if self.color_matrix is not None:
            self.color_matrix = np.asarray(self.color_matrix, dtype=np.float64)
            if self.color_matrix.shape != (3, 3):
                raise ValueError("color matrix must be 3x3")

    @classmethod
    def create(cls, spectral, noise, raw_dims, display_dims, *, mtf=None,
               vignetting=None, distortion=None, homography=None,
               electrons_per_unit=1.0, radiometric_scale=1.0):
        """Build a consistent calibration for the given geometry and scales."""
        w_d, h_d = display_dims
        if homography is None:
            scale = min(raw_dims[0] / w_d, raw_dims[1] / h_d)
            homography = Homography(np.diag([scale, scale, 1.0]))
        if distortion is None:
            w, h = raw_dims
            distortion = DistortionParams(norm_scale=0.5 * math.hypot(w, h))
        a_cam = spectral.camera_basis()
        a_xyz = spectral.xyz_basis()
        k2 = np.array(noise.k) ** 2
        color = radiometric_scale * a_xyz @ np.linalg.inv(a_cam) @ np.diag(
            1.0 / (k2 * electrons_per_unit)
        )
        return cls(
            noise=noise,
            raw_dims=tuple(raw_dims),
            homography=homography,
            distortion=distortion,
            mtf=mtf,
            vignetting=vignetting,
            color_matrix=color,
            electrons_per_unit=electrons_per_unit,
        )


def _raw_pixel_coords(raw_dims):
    w, h = raw_dims
    xs = np.arange(w) - (w - 1) / 2
    ys = (h - 1) / 2 - np.arange(h)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def _sample_emission(truth, spectral, display_coords, raw_dims, fill_factor,
                     subpixel_stripes):
    """Camera-RGB emission rate seen at each raw pixel's display coordinate."""
    w_d, h_d = truth.display_dims
    x = display_coords[:, 0] + w_d / 2
    y = h_d / 2 - display_coords[:, 1]
    col = np.floor(x).astype(np.int64)
    row = np.floor(y).astype(np.int64)
    inside = (col >= 0) & (col < w_d) & (row >= 0) & (row < h_d)
    colc = np.clip(col, 0, w_d - 1)
    rowc = np.clip(row, 0, h_d - 1)
    fx = x - col
    fy = y - row

    lo = 0.5 - fill_factor / 2
    hi = 0.5 + fill_factor / 2
    lit = inside & (fx >= lo) & (fx < hi) & (fy >= lo) & (fy < hi)

    a_cam = spectral.camera_basis()
    w, h = raw_dims
    out = np.zeros((3, h * w))
    if not subpixel_stripes:
        cam_per_pixel = np.einsum("ck,khw->chw", a_cam, truth.subpixels)
        for c in range(3):
            vals = cam_per_pixel[c, rowc, colc]
            out[c] = np.where(lit, vals, 0.0)
        return out.reshape(3, h, w)

    # vertical RGB stripes inside the fill region; x3 keeps the cell-average
    # emission equal to the coincident-subpixel case
    stripe = np.floor((fx - lo) / (fill_factor / 3)).astype(np.int64)
    for k in range(3):
        in_stripe = lit & (stripe == k)
        drive = truth.subpixels[k, rowc, colc] * 3.0
        for c in range(3):
            out[c] += np.where(in_stripe, a_cam[c, k] * drive, 0.0)
    return out.reshape(3, h, w)


def _blur_with_mtf(planes, model):
    fy = np.fft.fftfreq(planes.shape[1])[:, None]
    fx = np.fft.fftfreq(planes.shape[2])[None, :]
    m2d = model.eval_raw(np.hypot(fx, fy))
    out = np.empty_like(planes)
    for c in range(planes.shape[0]):
        out[c] = np.fft.ifft2(np.fft.fft2(planes[c]) * m2d).real
    return np.clip(out, 0.0, None)


def render_capture(truth, calib, plan, seed=0, *, spectral=None, noise=True,
                   fill_factor=1.0, subpixel_stripes=False, clip_level=None,
                   return_rate=False):
    """Render an exposure stack of the scene through the forward model.

    ``plan`` is a list of :class:`ExposureMeta` (or (t, g) pairs).  The
    per-frame RNG substreams derive deterministically from ``seed``.
    With ``return_rate=True`` also returns the per-pixel photo-electron
    rate map (3, H, W) before noise.
    """
    if spectral is None:
        spectral = SpectralModel.default()
    if not plan:
        raise ValueError("exposure plan is empty")
    metas = [m if isinstance(m, ExposureMeta) else ExposureMeta(*m) for m in plan]

    w, h = calib.raw_dims
    pts = _raw_pixel_coords(calib.raw_dims)
    g_coords = invert_distortion(pts, calib.distortion)
    h_inv = np.linalg.inv(calib.homography.matrix)
    s_coords = apply_homography(h_inv, g_coords)
    s_x, s_y = s_coords[:, 0], s_coords[:, 1]
    w_d, h_d = truth.display_dims
    if (s_x.min() > -w_d / 2 + 1) or (s_x.max() < w_d / 2 - 1) or (
        s_y.min() > -h_d / 2 + 1
    ) or (s_y.max() < h_d / 2 - 1):
        raise ValueError("warp does not cover the sensor with display content")

    emission = _sample_emission(
        truth, spectral, s_coords, calib.raw_dims, fill_factor, subpixel_stripes
    )
    if calib.mtf is not None:
        emission = _blur_with_mtf(emission, calib.mtf)
    if calib.vignetting is not None:
        v = calib.vignetting.values
        if v.shape[0] == 1:
            v = np.broadcast_to(v, emission.shape)
        if v.shape != emission.shape:
            raise ValueError("vignetting map does not match the raw dims")
        emission = emission * v
    rate = emission * calib.electrons_per_unit  # photo-electrons per second

    k = np.array(calib.noise.k)[:, None, None]
    s2_read = np.array(calib.noise.sigma2_read)[:, None, None]
    s2_adc = np.array(calib.noise.sigma2_adc)[:, None, None]

    frames = []
    streams = np.random.SeedSequence(seed).spawn(len(metas))
    for meta, stream in zip(metas, streams):
        if noise:
            rng = np.random.default_rng(stream)
            counts = rng.poisson(rate * meta.t).astype(np.float64)
            read = rng.normal(0.0, 1.0, size=rate.shape) * np.sqrt(s2_read)
            adc = rng.normal(0.0, 1.0, size=rate.shape) * np.sqrt(s2_adc)
            dn = k * (counts * meta.g + read * meta.g + adc)
        else:
            dn = k * rate * meta.t * meta.g
        if clip_level is not None:
            dn = np.minimum(dn, float(clip_level))
        frames.append(dn)

    stack = ExposureStack.from_raw(frames, metas, calib.noise, clip_level)
    if return_rate:
        return stack, rate
    return stack


def expected_merged_image(truth, calib, spectral=None, **render_kwargs):
    """Noise-free expectation of the merged pipeline input, k_c^2-scaled."""
    if spectral is None:
        spectral = SpectralModel.default()
    stack, rate = render_capture(
        truth, calib, [(1.0, 1.0)], spectral=spectral, noise=False,
        return_rate=True, **render_kwargs
    )
    k2 = np.array(calib.noise.k)[:, None, None] ** 2
    return k2 * rate


def cos4_vignetting(raw_dims, corner_falloff=0.7):
    """Natural cos^4 falloff map reaching ``corner_falloff`` at the corners."""
    if not (0 < corner_falloff <= 1):
        raise ValueError("corner falloff must be in (0, 1]")
    w, h = int(raw_dims[0]), int(raw_dims[1])
    xs = (np.arange(w) - (w - 1) / 2) / (0.5 * math.hypot(w, h))
    ys = (np.arange(h) - (h - 1) / 2) / (0.5 * math.hypot(w, h))
    r2 = xs[None, :] ** 2 + ys[:, None] ** 2
    if corner_falloff == 1.0:
        return VignettingMap(np.ones((1, h, w)))
    # V = (1 + (r/f)^2)^-2 == cos^4 of the field angle
    f2 = math.sqrt(corner_falloff) / (1 - math.sqrt(corner_falloff))
    v = (1 + r2 / f2) ** -2
    v /= v.max()
    return VignettingMap(v[None])


def gen_defect_pattern(a_d, c_d, count, display_dims, seed=0,
                       min_separation=12.0, margin=12, max_tries=10_000):
    """A white field with darker square patches simulating defective pixels.

    Patches share side length ``a_d`` (display px) and Weber contrast
    ``c_d``; centers are drawn by rejection sampling to stay pairwise at
    least ``min_separation`` display px apart and ``margin`` px from the
    panel border (keeps the background-map window clean).
    """
    w_d, h_d = int(display_dims[0]), int(display_dims[1])
    a_d = int(a_d)
    if a_d < 1:
        raise ValueError("defect side length must be >= 1 display px")
    if not (0 < c_d <= 1):
        raise ValueError("Weber contrast must lie in (0, 1]")
    rng = np.random.default_rng(seed)
    anchors = []
    lo_c, hi_c = margin, w_d - margin - a_d
    lo_r, hi_r = margin, h_d - margin - a_d
    if hi_c <= lo_c or hi_r <= lo_r:
        raise ValueError("display too small for the requested margin")
    centers = np.empty((0, 2))
    tries = 0
    while len(anchors) < count:
        if tries >= max_tries:
            raise ValueError(
                f"could not place {count} patches in {tries} tries"
            )
        tries += 1
        col = int(rng.integers(lo_c, hi_c + 1))
        row = int(rng.integers(lo_r, hi_r + 1))
        cx = col + a_d / 2 - w_d / 2
        cy = h_d / 2 - (row + a_d / 2)
        if centers.size:
            d = np.hypot(centers[:, 0] - cx, centers[:, 1] - cy)
            if d.min() < min_separation:
                continue
        anchors.append((row, col))
        centers = np.vstack([centers, [cx, cy]])

    pix = np.ones((3, h_d, w_d))
    for row, col in anchors:
        pix[:, row : row + a_d, col : col + a_d] = 1.0 - c_d
    truth = SceneTruth(pix)
    pattern = DefectPattern(a_d=a_d, c_d=float(c_d), centers=centers,
                            display_dims=(w_d, h_d))
    return truth, pattern


def gen_uniformity_stimulus(contrast=0.1, mean_lum=142.5, display_dims=(512, 512),
                            spectral=None):
    """Elliptical-Gaussian brightness stimulus with an exact spatial mean.

    The Gaussian's standard deviations are half the panel width/height;
    the zero-mean bump of amplitude ``contrast`` rides on a uniform field
    normalized so the spatial mean equals ``mean_lum``.
    """
    if not (0 <= contrast < 1):
        raise ValueError("contrast must lie in [0, 1)")
    if spectral is None:
        spectral = SpectralModel.default()
    w_d, h_d = int(display_dims[0]), int(display_dims[1])
    xs = np.arange(w_d) - (w_d - 1) / 2
    ys = np.arange(h_d) - (h_d - 1) / 2
    gauss = np.exp(
        -(xs[None, :] ** 2) / (2 * (w_d / 2) ** 2)
        - (ys[:, None] ** 2) / (2 * (h_d / 2) ** 2)
    )
    profile = 1.0 + contrast * (gauss - gauss.mean())
    lum = mean_lum * profile  # spatial mean is mean_lum by construction

    y_white = np.einsum("ck,k->c", spectral.xyz_basis(), np.ones(3))[1]
    peak = lum.max()
    subpix = np.broadcast_to((lum / peak)[None], (3, h_d, w_d)).copy()
    return SceneTruth(subpix, radiometric_scale=peak / y_white)


def gen_checkerboard(display_dims, block=8):
    """Checkerboard scene plus the display coordinates of interior corners."""
    w_d, h_d = int(display_dims[0]), int(display_dims[1])
    block = int(block)
    if w_d % block or h_d % block:
        raise ValueError("display dims must be a multiple of the block size")
    cols = (np.arange(w_d) // block) % 2
    rows = (np.arange(h_d) // block) % 2
    board = (cols[None, :] + rows[:, None]) % 2
    corners = []
    for u in range(1, w_d // block):
        for v in range(1, h_d // block):
            corners.append((u * block - w_d / 2, h_d / 2 - v * block))
    pix = np.broadcast_to(board[None].astype(np.float64), (3, h_d, w_d)).copy()
    return SceneTruth(pix), np.array(corners)
