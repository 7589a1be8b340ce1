"""Homography, Brown-Conrady distortion, corner refinement and display-grid resampling.

All point coordinates are centered (origin at the image/display center,
x right, y up, pixel units).  The display-to-raw map is the composition
m = u . h of a homography h: s -> g and the distortion u: g -> p, with
distortion coefficients defined on coordinates normalized by
``norm_scale`` (typically the raw half-diagonal) so they stay
dimensionless and numerically stable.

Resampling onto the oversampled display grid applies identical kernel
weights to the mean and the variance planes: a deliberate conservative
choice that overestimates variance slightly but keeps per-pixel
independence usable downstream.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .imgcore import ImagePlane, UncertainImage

__all__ = [
    "Homography",
    "DistortionParams",
    "ResamplingSpec",
    "estimate_homography",
    "apply_homography",
    "apply_distortion",
    "invert_distortion",
    "refine_corners",
    "fit_distortion",
    "resample_to_display",
    "display_grid_coords",
    "display_to_raw",
]


@dataclass
class Homography:
    """3x3 projective map from display coords s to undistorted coords g."""

    matrix: np.ndarray
    reprojection_rms: float | None = None

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"homography must be 3x3, got {m.shape}")
        if m[2, 2] == 0 or abs(np.linalg.det(m)) < 1e-300:
            raise ValueError("homography is singular")
        self.matrix = m / m[2, 2]

    @classmethod
    def identity(cls):
        return cls(np.eye(3))

    def apply(self, pts):
        return apply_homography(self.matrix, pts)

    def inverse(self):
        return Homography(np.linalg.inv(self.matrix))


def apply_homography(matrix, pts):
    """Apply a 3x3 homography to an (N,2) array of points."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    ones = np.ones((pts.shape[0], 1))
    hpts = np.hstack([pts, ones]) @ np.asarray(matrix, dtype=np.float64).T
    w = hpts[:, 2]
    if np.any(w == 0):
        raise ValueError("point mapped to infinity by homography")
    return hpts[:, :2] / w[:, None]


def _hartley_normalization(pts):
    centroid = pts.mean(axis=0)
    dists = np.sqrt(((pts - centroid) ** 2).sum(axis=1))
    mean_dist = dists.mean()
    if mean_dist == 0:
        raise ValueError("all points coincide; degenerate configuration")
    s = np.sqrt(2.0) / mean_dist
    T = np.array(
        [[s, 0, -s * centroid[0]], [0, s, -s * centroid[1]], [0, 0, 1.0]]
    )
    return T, (pts - centroid) * s


def estimate_homography(src, dst, degeneracy_tol=1e-9):
    """Estimate the homography mapping src -> dst via Hartley-normalized DLT.

    Requires at least 4 correspondences with no degenerate (collinear)
    configuration.  Returns a :class:`Homography` carrying the
    reprojection RMS of the input pairs.
    """
    src = np.atleast_2d(np.asarray(src, dtype=np.float64))
    dst = np.atleast_2d(np.asarray(dst, dtype=np.float64))
    if src.shape != dst.shape or src.shape[0] < 4 or src.shape[1] != 2:
        raise ValueError("need matching (N>=4, 2) correspondence arrays")
    Ts, sn = _hartley_normalization(src)
    Td, dn = _hartley_normalization(dst)

    n = src.shape[0]
    A = np.zeros((2 * n, 9))
    A[0::2, 0:2] = sn
    A[0::2, 2] = 1
    A[0::2, 6:8] = -dn[:, 0:1] * sn
    A[0::2, 8] = -dn[:, 0]
    A[1::2, 3:5] = sn
    A[1::2, 5] = 1
    A[1::2, 6:8] = -dn[:, 1:2] * sn
    A[1::2, 8] = -dn[:, 1]

    _, sv, vh = np.linalg.svd(A)
    # a unique solution needs rank 8: the second-smallest singular value
    # must be well above the noise floor
    if sv[7] <= degeneracy_tol * sv[0]:
        raise ValueError(
            "degenerate correspondence configuration (collinear or coincident points)"
        )
    Hn = vh[-1].reshape(3, 3)
    H = np.linalg.inv(Td) @ Hn @ Ts
    homog = Homography(H)
    reproj = homog.apply(src)
    homog.reprojection_rms = float(np.sqrt(np.mean((reproj - dst) ** 2)))
    return homog


@dataclass(frozen=True)
class DistortionParams:
    """Brown-Conrady radial (k1..k3) and tangential (p1, p2) coefficients.

    Coefficients act on coordinates divided by ``norm_scale`` pixels.
    """

    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0
    norm_scale: float = 1.0

    def __post_init__(self):
        vals = [self.k1, self.k2, self.k3, self.p1, self.p2, self.norm_scale]
        if not all(np.isfinite(vals)):
            raise ValueError("distortion parameters must be finite")
        if not (self.norm_scale > 0):
            raise ValueError("norm_scale must be positive")

    def is_identity(self):
        return self.k1 == self.k2 == self.k3 == self.p1 == self.p2 == 0.0

    def coeffs(self):
        return np.array([self.k1, self.k2, self.k3, self.p1, self.p2])


def _distort_normalized(gn, d):
    gx, gy = gn[:, 0], gn[:, 1]
    r2 = gx**2 + gy**2
    radial = 1 + d.k1 * r2 + d.k2 * r2**2 + d.k3 * r2**3
    tx = 2 * d.p1 * gx * gy + d.p2 * (r2 + 2 * gx**2)
    ty = d.p1 * (r2 + 2 * gy**2) + 2 * d.p2 * gx * gy
    return np.stack([gx * radial + tx, gy * radial + ty], axis=1)


def _distort_jacobian(gn, d):
    gx, gy = gn[:, 0], gn[:, 1]
    r2 = gx**2 + gy**2
    radial = 1 + d.k1 * r2 + d.k2 * r2**2 + d.k3 * r2**3
    dr = d.k1 + 2 * d.k2 * r2 + 3 * d.k3 * r2**2
    jxx = radial + 2 * gx**2 * dr + 2 * d.p1 * gy + 6 * d.p2 * gx
    jxy = 2 * gx * gy * dr + 2 * d.p1 * gx + 2 * d.p2 * gy
    jyy = radial + 2 * gy**2 * dr + 6 * d.p1 * gy + 2 * d.p2 * gx
    return jxx, jxy, jxy.copy(), jyy


def apply_distortion(pts, d):
    """Map undistorted coords g to raw coords p (total function)."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    if d.is_identity():
        return pts.copy()
    return _distort_normalized(pts / d.norm_scale, d) * d.norm_scale


def invert_distortion(pts, d, tol_px=1e-8, max_iter=50):
    """Invert the distortion by Newton iteration to ``tol_px`` pixels."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    if d.is_identity():
        return pts.copy()
    pn = pts / d.norm_scale
    gn = pn.copy()
    tol_n = tol_px / d.norm_scale
    for _ in range(max_iter):
        f = _distort_normalized(gn, d) - pn
        err = np.abs(f).max()
        if err < tol_n:
            return gn * d.norm_scale
        jxx, jxy, jyx, jyy = _distort_jacobian(gn, d)
        det = jxx * jyy - jxy * jyx
        if np.any(np.abs(det) < 1e-300):
            raise ValueError("distortion Jacobian is singular; inversion failed")
        gn[:, 0] -= (jyy * f[:, 0] - jxy * f[:, 1]) / det
        gn[:, 1] -= (-jyx * f[:, 0] + jxx * f[:, 1]) / det
    raise ValueError(
        f"distortion inversion did not converge below {tol_px} px "
        f"in {max_iter} iterations (residual {err * d.norm_scale:.3g} px)"
    )


def display_to_raw(pts, homography, distortion=None):
    """The composed map m = u . h from display coords to raw coords."""
    g = homography.apply(pts) if isinstance(homography, Homography) else apply_homography(homography, pts)
    if distortion is None or distortion.is_identity():
        return g
    return apply_distortion(g, distortion)


def _local_maxima(data, threshold):
    interior = data[1:-1, 1:-1]
    strict = np.ones(interior.shape, dtype=bool)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            strict &= interior > data[1 + dr : data.shape[0] - 1 + dr,
                                      1 + dc : data.shape[1] - 1 + dc]
    strict &= interior >= threshold
    rows, cols = np.nonzero(strict)
    return rows + 1, cols + 1


def _subpixel_peak(data, rows, cols):
    """Per-axis parabolic interpolation of 3x3 strict maxima."""
    c = data[rows, cols]
    dx_num = data[rows, cols - 1] - data[rows, cols + 1]
    dx_den = data[rows, cols - 1] - 2 * c + data[rows, cols + 1]
    dy_num = data[rows - 1, cols] - data[rows + 1, cols]
    dy_den = data[rows - 1, cols] - 2 * c + data[rows + 1, cols]
    dx = np.where(dx_den != 0, 0.5 * dx_num / dx_den, 0.0)
    dy = np.where(dy_den != 0, 0.5 * dy_num / dy_den, 0.0)
    return cols + np.clip(dx, -0.5, 0.5), rows + np.clip(dy, -0.5, 0.5)


def find_display_pixel_centers(capture, white_threshold=None):
    """Subpixel centers of lit display pixels in an oversampled capture.

    Centers are strict 3x3 local maxima above ``white_threshold``
    (defaults to the mid-level between the darkest and brightest parts of
    the capture), refined by parabolic interpolation.  Returned in
    centered raw coordinates.
    """
    data = capture.data if isinstance(capture, ImagePlane) else np.asarray(capture, float)
    if white_threshold is None:
        lo, hi = np.percentile(data, [1, 99])
        white_threshold = lo + 0.5 * (hi - lo)
    rows, cols = _local_maxima(data, white_threshold)
    if rows.size == 0:
        return np.empty((0, 2))
    xs, ys = _subpixel_peak(data, rows, cols)
    h, w = data.shape
    return np.stack([xs - (w - 1) / 2, (h - 1) / 2 - ys], axis=1)


def refine_corners(capture, coarse, pitch_px, white_threshold=None,
                   search_factor=2.0):
    """Refine checkerboard corners using the display-pixel lattice.

    Each corner becomes the midpoint of the two lit display-pixel centers
    nearest to the coarse guess that lie in opposite quadrants relative to
    it (i.e. in the two different white blocks meeting at the corner).
    ``pitch_px`` is the approximate display-pixel pitch in raw pixels and
    bounds the candidate search to ``search_factor * pitch_px``.

    Returns (refined, flags); corners with fewer than two qualifying
    centers keep their coarse coordinates and get flag False.
    """
    coarse = np.atleast_2d(np.asarray(coarse, dtype=np.float64))
    centers = find_display_pixel_centers(capture, white_threshold)
    refined = coarse.copy()
    flags = np.zeros(len(coarse), dtype=bool)
    if centers.shape[0] == 0:
        return refined, flags
    radius = search_factor * float(pitch_px)
    for i, corner in enumerate(coarse):
        delta = centers - corner
        dist = np.hypot(delta[:, 0], delta[:, 1])
        order = np.argsort(dist)
        order = order[dist[order] <= radius]
        if order.size < 2:
            continue
        first = order[0]
        q1 = np.sign(delta[first])
        if q1[0] == 0 or q1[1] == 0:
            continue
        for j in order[1:]:
            qj = np.sign(delta[j])
            if qj[0] == -q1[0] and qj[1] == -q1[1]:
                refined[i] = 0.5 * (centers[first] + centers[j])
                flags[i] = True
                break
    return refined, flags


def fit_distortion(display_pts, raw_pts, norm_scale, min_points=50):
    """Jointly fit the homography and distortion minimizing reprojection error.

    Initializes the homography by DLT with zero distortion, then refines
    all 13 parameters (8 homography + 5 distortion) by trust-region least
    squares on sum |u(h(s)) - p|^2.  Returns (DistortionParams,
    Homography) with the final RMS attached to the homography.
    """
    from scipy import optimize

    display_pts = np.atleast_2d(np.asarray(display_pts, dtype=np.float64))
    raw_pts = np.atleast_2d(np.asarray(raw_pts, dtype=np.float64))
    if display_pts.shape != raw_pts.shape:
        raise ValueError("correspondence arrays must match")
    if display_pts.shape[0] < min_points:
        raise ValueError(
            f"need at least {min_points} grid correspondences, got {display_pts.shape[0]}"
        )
    h0 = estimate_homography(display_pts, raw_pts).matrix
    x0 = np.concatenate([h0.ravel()[:8], np.zeros(5)])

    def unpack(x):
        H = np.append(x[:8], 1.0).reshape(3, 3)
        d = DistortionParams(*x[8:13], norm_scale=norm_scale)
        return H, d

    def residuals(x):
        H, d = unpack(x)
        try:
            mapped = apply_distortion(apply_homography(H, display_pts), d)
        except ValueError:
            return np.full(display_pts.size, 1e6)
        return (mapped - raw_pts).ravel()

    res = optimize.least_squares(
        residuals, x0, method="trf", xtol=1e-15, ftol=1e-15, gtol=1e-15,
        max_nfev=4000,
    )
    if not res.success and np.sqrt(np.mean(res.fun**2)) > 1.0:
        raise RuntimeError(
            f"distortion fit diverged: {res.message}; residual trace "
            f"rms={np.sqrt(np.mean(res.fun ** 2)):.4g} px"
        )
    H, d = unpack(res.x)
    homog = Homography(H)
    homog.reprojection_rms = float(np.sqrt(np.mean(res.fun**2)))
    return d, homog


@dataclass(frozen=True)
class ResamplingSpec:
    """Oversampling factor and interpolation kernel for display-grid resampling.

    Subpixel applications want o >= 3; o >= 1 is accepted so that unit
    mappings stay expressible.
    """

    oversampling: int = 4
    kernel: str = "bilinear"

    def __post_init__(self):
        if int(self.oversampling) != self.oversampling or self.oversampling < 1:
            raise ValueError("oversampling must be a positive integer")
        object.__setattr__(self, "oversampling", int(self.oversampling))
        if self.kernel not in ("nearest", "bilinear", "bicubic"):
            raise ValueError(f"unknown kernel {self.kernel!r}")


def display_grid_coords(display_dims, oversampling):
    """Centered display coordinates of the (o*w+1) x (o*h+1) sample grid."""
    w_d, h_d = int(display_dims[0]), int(display_dims[1])
    o = int(oversampling)
    xs = np.arange(o * w_d + 1) / o - w_d / 2
    ys = h_d / 2 - np.arange(o * h_d + 1) / o
    return xs, ys


def _catmull_rom(t):
    """Catmull-Rom weights for fractional offset t in [0,1): 4 taps."""
    t2, t3 = t * t, t * t * t
    w0 = -0.5 * t3 + t2 - 0.5 * t
    w1 = 1.5 * t3 - 2.5 * t2 + 1.0
    w2 = -1.5 * t3 + 2.0 * t2 + 0.5 * t
    w3 = 0.5 * t3 - 0.5 * t2
    return np.stack([w0, w1, w2, w3])


def _gather_weights(rowf, colf, kernel):
    """Tap offsets and separable weights for each kernel."""
    if kernel == "nearest":
        r0 = np.round(rowf).astype(np.int64)
        c0 = np.round(colf).astype(np.int64)
        return [(r0, c0, np.ones_like(rowf))], (r0, r0, c0, c0)
    if kernel == "bilinear":
        r0 = np.floor(rowf).astype(np.int64)
        c0 = np.floor(colf).astype(np.int64)
        fr = rowf - r0
        fc = colf - c0
        taps = []
        for dr, wr in ((0, 1 - fr), (1, fr)):
            for dc, wc in ((0, 1 - fc), (1, fc)):
                taps.append((r0 + dr, c0 + dc, wr * wc))
        return taps, (r0, r0 + 1, c0, c0 + 1)
    # bicubic (Catmull-Rom)
    r0 = np.floor(rowf).astype(np.int64)
    c0 = np.floor(colf).astype(np.int64)
    wr = _catmull_rom(rowf - r0)
    wc = _catmull_rom(colf - c0)
    taps = []
    for i in range(4):
        for j in range(4):
            taps.append((r0 + i - 1, c0 + j - 1, wr[i] * wc[j]))
    return taps, (r0 - 1, r0 + 2, c0 - 1, c0 + 2)


def resample_to_display(img, homography, distortion, spec, display_dims,
                        coverage_limit=0.01):
    """Resample a raw-frame image onto the oversampled display grid.

    Mean and variance are gathered with identical kernel weights; for the
    bicubic kernel the variance pass clamps negative lobes to zero and
    renormalizes, preserving non-negativity.  Grid samples whose kernel
    support leaves the capture (or touches invalid pixels) are flagged
    invalid; more than ``coverage_limit`` of such samples is an error.
    """
    if not isinstance(img, UncertainImage):
        raise TypeError("resample_to_display expects an UncertainImage")
    if img.mode != "diag":
        raise ValueError("resampling applies to diagonal-mode images")
    w_d, h_d = int(display_dims[0]), int(display_dims[1])
    xs, ys = display_grid_coords((w_d, h_d), spec.oversampling)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    raw = display_to_raw(pts, homography, distortion)

    H, W = img.height, img.width
    colf = raw[:, 0] + (W - 1) / 2
    rowf = (H - 1) / 2 - raw[:, 1]

    taps, (rmin, rmax, cmin, cmax) = _gather_weights(rowf, colf, spec.kernel)
    inside = (rmin >= 0) & (rmax <= H - 1) & (cmin >= 0) & (cmax <= W - 1)
    bad = ~inside
    frac = bad.mean()
    if frac > coverage_limit:
        raise ValueError(
            f"{frac:.1%} of the display grid maps outside the capture "
            f"(limit {coverage_limit:.1%})"
        )

    src_valid = img.valid
    out_shape = (len(ys), len(xs))
    n_out = pts.shape[0]
    mean_out = np.zeros((img.channels, n_out))
    var_out = np.zeros((img.channels, n_out))
    valid = inside.copy()

    var_taps = taps
    if spec.kernel == "bicubic":
        weights = np.stack([np.clip(w, 0.0, None) for _, _, w in taps])
        norm = weights.sum(axis=0)
        var_taps = [
            (r, c, w / norm) for (r, c, _), w in zip(taps, weights)
        ]

    for (r, c, w), (_, _, wv) in zip(taps, var_taps):
        rc = np.clip(r, 0, H - 1)
        cc = np.clip(c, 0, W - 1)
        use = inside
        for ch in range(img.channels):
            mean_out[ch][use] += w[use] * img.mean[ch][rc[use], cc[use]]
            var_out[ch][use] += wv[use] * img.uncertainty[ch][rc[use], cc[use]]
        if src_valid is not None:
            valid &= ~inside | src_valid[rc, cc]

    mean_out[:, ~valid] = 0.0
    var_out[:, ~valid] = 0.0
    np.maximum(var_out, 0.0, out=var_out)
    return UncertainImage(
        mean_out.reshape(img.channels, *out_shape),
        var_out.reshape(img.channels, *out_shape),
        "diag",
        None if valid.all() else valid.reshape(out_shape),
    )
