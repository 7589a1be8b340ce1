"""Colorimetric correction with covariance propagation and CIEDE2000 evaluation.

Two correction modes are supported: a plain 3x3 matrix for three-primary
displays (exact linear covariance propagation, Sigma_Y = M Sigma M^T) and
a 3x6 root-polynomial matrix for displays with more than three primaries,
where the channel vector is expanded to

    [Lr, Lg, Lb, sqrt(Lr*Lg), sqrt(Lr*Lb), sqrt(Lg*Lb)]

and the covariance is propagated to first order through the expansion
Jacobian: Sigma_Y = M J Sigma J^T M^T.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .imgcore import UncertainImage

__all__ = [
    "ColorCorrection",
    "PatchMeasurement",
    "fit_ccm",
    "apply_ccm",
    "rootpoly_expand",
    "rootpoly_jacobian",
    "xyz_to_lab",
    "delta_e2000",
    "D65_WHITE_XYZ",
]

# D65 white point, Y normalized to 100
D65_WHITE_XYZ = (95.047, 100.0, 108.883)

_JACOBIAN_EPS_REL = 1e-6  # channel floor as a fraction of the pixel's max channel


@dataclass(frozen=True)
class ColorCorrection:
    """Camera-RGB -> XYZ transform, linear (3x3) or root-polynomial (3x6)."""

    mode: str
    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if self.mode == "linear3x3":
            if m.shape != (3, 3):
                raise ValueError(f"linear mode needs a 3x3 matrix, got {m.shape}")
            if abs(np.linalg.det(m)) < 1e-300:
                raise ValueError("linear color matrix is singular")
        elif self.mode == "rootpoly3x6":
            if m.shape != (3, 6):
                raise ValueError(f"rootpoly mode needs a 3x6 matrix, got {m.shape}")
        else:
            raise ValueError(f"unknown color correction mode {self.mode!r}")
        if not np.all(np.isfinite(m)):
            raise ValueError("color matrix must be finite")
        object.__setattr__(self, "matrix", m)


@dataclass(frozen=True)
class PatchMeasurement:
    """A color patch: camera RGB (linear) and its reference CIE XYZ."""

    camera_rgb: tuple
    reference_xyz: tuple

    def __post_init__(self):
        rgb = tuple(float(v) for v in self.camera_rgb)
        xyz = tuple(float(v) for v in self.reference_xyz)
        if len(rgb) != 3 or len(xyz) != 3:
            raise ValueError("patches are (rgb, xyz) triples")
        if xyz[1] < 0:
            raise ValueError("reference Y must be non-negative")
        object.__setattr__(self, "camera_rgb", rgb)
        object.__setattr__(self, "reference_xyz", xyz)


def rootpoly_expand(rgb):
    """Expand (..., 3) linear RGB to the 6-term root-polynomial basis."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    return np.stack(
        [r, g, b, np.sqrt(r * g), np.sqrt(r * b), np.sqrt(g * b)], axis=-1
    )


def rootpoly_jacobian(rgb):
    """Jacobian (..., 6, 3) of the root-polynomial expansion.

    Channel values are floored at ``1e-6 * max_channel`` (per pixel) so
    the square-root derivatives stay finite at black pixels; a pixel with
    all channels zero gets zero cross-term derivatives.
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    maxchan = rgb.max(axis=-1, keepdims=True)
    floor = _JACOBIAN_EPS_REL * maxchan
    safe = np.maximum(rgb, floor)
    r, g, b = safe[..., 0], safe[..., 1], safe[..., 2]
    zero = maxchan[..., 0] <= 0

    jac = np.zeros(rgb.shape[:-1] + (6, 3))
    jac[..., 0, 0] = 1
    jac[..., 1, 1] = 1
    jac[..., 2, 2] = 1
    with np.errstate(divide="ignore", invalid="ignore"):
        jac[..., 3, 0] = 0.5 * np.sqrt(g / r)
        jac[..., 3, 1] = 0.5 * np.sqrt(r / g)
        jac[..., 4, 0] = 0.5 * np.sqrt(b / r)
        jac[..., 4, 2] = 0.5 * np.sqrt(r / b)
        jac[..., 5, 1] = 0.5 * np.sqrt(b / g)
        jac[..., 5, 2] = 0.5 * np.sqrt(g / b)
    if np.any(zero):
        jac[zero] = 0.0
        jac[zero, 0, 0] = jac[zero, 1, 1] = jac[zero, 2, 2] = 1.0
    return jac


def _dependent_patch_indices(design, rank):
    """Patches with the largest weight in a left-null combination of rows."""
    u, _, _ = np.linalg.svd(design, full_matrices=True)
    combo = np.abs(u[:, rank]) if rank < u.shape[1] else np.zeros(design.shape[0])
    keep = combo > 0.1 * combo.max() if combo.max() > 0 else combo > -1
    return sorted(np.nonzero(keep)[0].tolist())


def fit_ccm(patches, mode="linear3x3"):
    """Fit a color correction from patch measurements by least squares.

    Needs >= 3 patches in linear mode, >= 6 in root-polynomial mode, with
    a full-rank design.  Returns (ColorCorrection, per_patch_de2000,
    mean_de2000); the Delta-E evaluation normalizes against the
    brightest-Y patch as white.
    """
    patches = list(patches)
    rgb = np.array([p.camera_rgb for p in patches], dtype=np.float64)
    xyz = np.array([p.reference_xyz for p in patches], dtype=np.float64)
    if mode == "linear3x3":
        design = rgb
        need = 3
    elif mode == "rootpoly3x6":
        if np.any(rgb < 0):
            raise ValueError("root-polynomial fitting needs non-negative RGB")
        design = rootpoly_expand(rgb)
        need = 6
    else:
        raise ValueError(f"unknown color correction mode {mode!r}")
    if len(patches) < need:
        raise ValueError(f"{mode} needs at least {need} patches, got {len(patches)}")
    rank = np.linalg.matrix_rank(design, tol=1e-10 * max(1.0, np.abs(design).max()))
    if rank < need:
        culprits = _dependent_patch_indices(design, rank)
        raise ValueError(
            f"patch design is rank-deficient ({rank} < {need}); "
            f"linearly dependent patches near indices {culprits}"
        )
    coef, *_ = np.linalg.lstsq(design, xyz, rcond=None)
    matrix = coef.T
    cc = ColorCorrection(mode, matrix)

    predicted = design @ matrix.T
    white_y = xyz[:, 1].max()
    white = np.array(D65_WHITE_XYZ) * (white_y / 100.0 if white_y > 0 else 1.0)
    des = np.array(
        [
            delta_e2000(xyz_to_lab(p, white), xyz_to_lab(t, white))
            for p, t in zip(predicted, xyz)
        ]
    )
    return cc, des, float(des.mean())


def apply_ccm(img, cc):
    """Apply a color correction to a diagonal-mode RGB image.

    Returns a full-covariance XYZ image: linear mode propagates exactly,
    root-polynomial mode propagates to first order via the expansion
    Jacobian.
    """
    if not isinstance(img, UncertainImage):
        raise TypeError("apply_ccm expects an UncertainImage")
    if img.mode != "diag" or img.channels != 3:
        raise ValueError("color correction needs a 3-channel diagonal-mode image")
    h, w = img.height, img.width
    mean = img.mean.reshape(3, -1).T  # (N,3)
    var = img.uncertainty.reshape(3, -1).T

    if cc.mode == "linear3x3":
        m = cc.matrix
        mean_out = mean @ m.T
        # Sigma_Y = M diag(var) M^T
        cov = np.einsum("ij,nj,kj->nik", m, var, m)
    else:
        if np.any(mean < 0):
            raise ValueError("root-polynomial correction needs non-negative means")
        m = cc.matrix
        expanded = rootpoly_expand(mean)
        mean_out = expanded @ m.T
        jac = rootpoly_jacobian(mean)  # (N,6,3)
        mj = np.einsum("ij,njk->nik", m, jac)  # (N,3,3)
        cov = np.einsum("nij,nj,nkj->nik", mj, var, mj)

    cov = 0.5 * (cov + np.transpose(cov, (0, 2, 1)))
    return UncertainImage(
        mean_out.T.reshape(3, h, w),
        cov.reshape(-1, 9).T.reshape(9, h, w),
        "cov",
        None if img.valid is None else img.valid.copy(),
    )


def xyz_to_lab(xyz, white=D65_WHITE_XYZ):
    """CIE 1976 L*a*b* from XYZ with the given white point."""
    xyz = np.asarray(xyz, dtype=np.float64)
    ratio = xyz / np.asarray(white, dtype=np.float64)

    def f(t):
        t = np.asarray(t, dtype=np.float64)
        cube = t > (6 / 29) ** 3
        out = np.where(cube, np.cbrt(np.maximum(t, 0)), t / (3 * (6 / 29) ** 2) + 4 / 29)
        return out

    fx, fy, fz = f(ratio[..., 0]), f(ratio[..., 1]), f(ratio[..., 2])
    lab = np.stack([116 * fy - 16, 500 * (fx - fy), 200 * (fy - fz)], axis=-1)
    return lab


def delta_e2000(lab1, lab2, k_l=1.0, k_c=1.0, k_h=1.0):
    """CIEDE2000 color difference between two L*a*b* triples."""
    L1, a1, b1 = (float(v) for v in lab1)
    L2, a2, b2 = (float(v) for v in lab2)

    C1 = math.hypot(a1, b1)
    C2 = math.hypot(a2, b2)
    c_bar = 0.5 * (C1 + C2)
    c_bar7 = c_bar**7
    G = 0.5 * (1 - math.sqrt(c_bar7 / (c_bar7 + 25.0**7)))
    a1p = (1 + G) * a1
    a2p = (1 + G) * a2
    C1p = math.hypot(a1p, b1)
    C2p = math.hypot(a2p, b2)

    def hue(ap, bp):
        if ap == 0 and bp == 0:
            return 0.0
        h = math.degrees(math.atan2(bp, ap))
        return h + 360 if h < 0 else h

    h1p = hue(a1p, b1)
    h2p = hue(a2p, b2)

    dLp = L2 - L1
    dCp = C2p - C1p
    if C1p * C2p == 0:
        dhp = 0.0
    else:
        dhp = h2p - h1p
        if dhp > 180:
            dhp -= 360
        elif dhp < -180:
            dhp += 360
    dHp = 2 * math.sqrt(C1p * C2p) * math.sin(math.radians(dhp) / 2)

    Lbp = 0.5 * (L1 + L2)
    Cbp = 0.5 * (C1p + C2p)
    if C1p * C2p == 0:
        hbp = h1p + h2p
    elif abs(h1p - h2p) <= 180:
        hbp = 0.5 * (h1p + h2p)
    elif h1p + h2p < 360:
        hbp = 0.5 * (h1p + h2p) + 180
    else:
        hbp = 0.5 * (h1p + h2p) - 180

    T = (
        1
        - 0.17 * math.cos(math.radians(hbp - 30))
        + 0.24 * math.cos(math.radians(2 * hbp))
        + 0.32 * math.cos(math.radians(3 * hbp + 6))
        - 0.20 * math.cos(math.radians(4 * hbp - 63))
    )
    d_theta = 30 * math.exp(-(((hbp - 275) / 25) ** 2))
    Cbp7 = Cbp**7
    R_C = 2 * math.sqrt(Cbp7 / (Cbp7 + 25.0**7))
    S_L = 1 + 0.015 * (Lbp - 50) ** 2 / math.sqrt(20 + (Lbp - 50) ** 2)
    S_C = 1 + 0.045 * Cbp
    S_H = 1 + 0.015 * Cbp * T
    R_T = -math.sin(math.radians(2 * d_theta)) * R_C

    tL = dLp / (k_l * S_L)
    tC = dCp / (k_c * S_C)
    tH = dHp / (k_h * S_H)
    return math.sqrt(tL * tL + tC * tC + tH * tH + R_T * tC * tH)
