"""Defective-pixel detection on the display grid with false-positive prediction.

Detection compares a local mean map (box of roughly one defect size)
against a background mean map (much larger box): a sample is a candidate
when M_p < M_b * D_thr.  Candidates are scored by their relative deficit
and thinned by greedy non-maximum suppression.  The closed-form
false-positive count sums, over display-pixel lattice sites, the normal
tail probability of that comparison using the propagated per-pixel
variance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, special

from .imgcore import UncertainImage

__all__ = [
    "DefectPattern",
    "DetectionReport",
    "build_mean_maps",
    "detect",
    "match_detections",
    "precision_recall",
    "pr_curve",
    "pr_auc",
    "predict_false_positives",
    "count_lattice_exceedances",
    "grid_to_display",
    "display_pixel_lattice",
]


@dataclass
class DefectPattern:
    """Ground-truth defect layout: size, contrast and display-space centers."""

    a_d: int
    c_d: float
    centers: np.ndarray
    display_dims: tuple

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        w_d, h_d = self.display_dims
        if np.any(np.abs(self.centers[:, 0]) > w_d / 2) or np.any(
            np.abs(self.centers[:, 1]) > h_d / 2
        ):
            raise ValueError("defect centers must lie within the display")
        if not (0 < self.c_d <= 1):
            raise ValueError("Weber contrast must lie in (0, 1]")
        if self.a_d < 1:
            raise ValueError("defect side length must be >= 1")
        if len(self.centers) > 1:
            d = np.sqrt(
                ((self.centers[None] - self.centers[:, None]) ** 2).sum(-1)
            )
            np.fill_diagonal(d, np.inf)
            if d.min() < self.a_d:
                raise ValueError("defect patches overlap")


@dataclass
class DetectionReport:
    """Detections plus the threshold sweep and predicted false positives."""

    detections: list
    threshold: float
    predicted_nfp: float
    pr_points: list

    def __post_init__(self):
        if not (0 <= self.threshold <= 1):
            raise ValueError("detection threshold must lie in [0, 1]")
        if self.predicted_nfp < 0:
            raise ValueError("predicted false-positive count must be >= 0")
        for r, p, _ in self.pr_points:
            if not (0 <= r <= 1 and 0 <= p <= 1):
                raise ValueError("precision/recall must lie in [0, 1]")


def _odd_at_least(n, minimum=1):
    n = max(int(n), minimum)
    return n if n % 2 == 1 else n + 1


def build_mean_maps(img, oversampling, a_d):
    """Channel-averaged local and background mean maps plus the variance map.

    ``img`` is the display-grid measurement (diagonal mode, before color
    correction).  The local map uses a box of ``o*a_d - 1`` samples
    (rounded up to the nearest odd size), the background map ``10*o + 1``;
    the per-sample variance of the channel average is sum_c var_c / 9.
    """
    if not isinstance(img, UncertainImage):
        raise TypeError("build_mean_maps expects an UncertainImage")
    if img.mode != "diag":
        raise ValueError("mean maps are built before color correction")
    o = int(oversampling)
    size_p = _odd_at_least(o * int(a_d) - 1)
    size_b = 10 * o + 1
    h, w = img.height, img.width
    if size_b > min(h, w) or size_p > min(h, w):
        raise ValueError(
            f"box filter ({max(size_p, size_b)}) larger than the image ({h}x{w})"
        )
    channel_mean = img.mean.mean(axis=0)
    m_p = ndimage.uniform_filter(channel_mean, size=size_p, mode="reflect")
    m_b = ndimage.uniform_filter(channel_mean, size=size_b, mode="reflect")
    sigma2 = img.uncertainty.sum(axis=0) / 9.0
    return m_p, m_b, sigma2


def grid_to_display(rows, cols, oversampling, display_dims):
    """Display coordinates of display-grid sample indices."""
    o = int(oversampling)
    w_d, h_d = display_dims
    x = np.asarray(cols, dtype=np.float64) / o - w_d / 2
    y = h_d / 2 - np.asarray(rows, dtype=np.float64) / o
    return x, y


def display_pixel_lattice(grid_shape, oversampling):
    """Row/col index vectors of display-pixel centers on the sample grid.

    Centers sit at every o-th sample offset by o//2 (exact for even o,
    nearest sample for odd o); there is one per display pixel.
    """
    o = int(oversampling)
    h, w = grid_shape
    rows = np.arange(o // 2, h - (o - o // 2) + 1, o)
    cols = np.arange(o // 2, w - (o - o // 2) + 1, o)
    return rows, cols


def detect(m_p, m_b, d_thr, oversampling, display_dims, max_candidates=200_000):
    """Threshold the mean maps and apply greedy NMS.

    Returns a list of (x, y, score) tuples in display coordinates, score
    descending.  The suppression radius is ``oversampling`` grid samples
    (one display pixel).  At permissive thresholds the candidate list is
    capped at ``max_candidates`` strongest deficits; beyond that point
    additional candidates have vanishing precision anyway.
    """
    if not (0 <= d_thr <= 1):
        raise ValueError("detection threshold must lie in [0, 1]")
    if m_p.shape != m_b.shape:
        raise ValueError("mean maps must have identical shapes")
    o = int(oversampling)
    deficit = m_b * d_thr - m_p
    cand = deficit > 0
    n_cand = int(cand.sum())
    if n_cand == 0:
        return []
    rows, cols = np.nonzero(cand)
    with np.errstate(divide="ignore", invalid="ignore"):
        scores = np.where(m_b[rows, cols] > 0,
                          deficit[rows, cols] / m_b[rows, cols], 0.0)
    if n_cand > max_candidates:
        keep = np.argpartition(scores, -max_candidates)[-max_candidates:]
        rows, cols, scores = rows[keep], cols[keep], scores[keep]
    # stable deterministic order: score descending, then row, then col
    order = np.lexsort((cols, rows, -scores))
    rows, cols, scores = rows[order], cols[order], scores[order]

    occupied = np.zeros(m_p.shape, dtype=bool)
    r2 = o * o
    offsets = [
        (dr, dc)
        for dr in range(-o, o + 1)
        for dc in range(-o, o + 1)
        if dr * dr + dc * dc <= r2
    ]
    off = np.array(offsets)
    h, w = m_p.shape
    kept = []
    for r, c, s in zip(rows, cols, scores):
        if occupied[r, c]:
            continue
        kept.append((r, c, s))
        rr = off[:, 0] + r
        cc = off[:, 1] + c
        ok = (rr >= 0) & (rr < h) & (cc >= 0) & (cc < w)
        occupied[rr[ok], cc[ok]] = True
    rr = np.array([k[0] for k in kept])
    cc = np.array([k[1] for k in kept])
    ss = np.array([k[2] for k in kept])
    x, y = grid_to_display(rr, cc, o, display_dims)
    return [(float(xi), float(yi), float(si)) for xi, yi, si in zip(x, y, ss)]


def match_detections(detections, truth_centers, radius=1.0):
    """Greedy one-to-one matching of detections to ground-truth centers.

    Detections are visited in score order; each claims its nearest
    unmatched truth within ``radius`` display px.  Returns (n_true_pos,
    matched_truth_mask).
    """
    truth = np.asarray(truth_centers, dtype=np.float64).reshape(-1, 2)
    matched = np.zeros(len(truth), dtype=bool)
    tp = 0
    for x, y, _ in detections:
        if not len(truth):
            break
        d = np.hypot(truth[:, 0] - x, truth[:, 1] - y)
        d[matched] = np.inf
        j = int(np.argmin(d))
        if d[j] <= radius:
            matched[j] = True
            tp += 1
    return tp, matched


def precision_recall(detections, truth_centers, radius=1.0):
    """Precision and recall of a detection list against ground truth."""
    n_truth = len(np.atleast_2d(truth_centers)) if len(truth_centers) else 0
    if n_truth == 0:
        raise ValueError("ground truth is empty; precision/recall undefined")
    tp, _ = match_detections(detections, truth_centers, radius)
    recall = tp / n_truth
    precision = tp / len(detections) if detections else 1.0
    return precision, recall


def pr_curve(m_p, m_b, thresholds, pattern, oversampling, radius=1.0,
             max_candidates=200_000):
    """Sweep detection thresholds, returning (recall, precision, D_thr) points."""
    pts = []
    for thr in thresholds:
        det = detect(m_p, m_b, thr, oversampling, pattern.display_dims,
                     max_candidates)
        precision, recall = precision_recall(det, pattern.centers, radius)
        pts.append((recall, precision, float(thr)))
    return pts


def pr_auc(points):
    """Trapezoidal area under the precision-recall curve.

    Points are (recall, precision[, threshold]) tuples; the curve is
    anchored at recall 0 with the precision of the lowest-recall point.
    """
    if len(points) < 2:
        raise ValueError("need at least 2 sweep points for an AUC")
    rp = sorted((float(p[0]), float(p[1])) for p in points)
    recalls = np.array([0.0] + [r for r, _ in rp])
    precisions = np.array([rp[0][1]] + [p for _, p in rp])
    return float(np.trapezoid(precisions, recalls))


def predict_false_positives(m_b, sigma2_map, d_thr, oversampling):
    """Closed-form expected false-positive count over the display lattice.

    For each display-pixel site s the probability that a fresh local-mean
    sample falls below M_b(s) * D_thr is Phi((D_thr - 1) M_b / sigma);
    the expected count is the sum of those probabilities.
    """
    if m_b.shape != sigma2_map.shape:
        raise ValueError("background map and variance map must match")
    rows, cols = display_pixel_lattice(m_b.shape, oversampling)
    mb = m_b[rows[:, None], cols[None, :]]
    s2 = sigma2_map[rows[:, None], cols[None, :]]
    if np.any(s2 <= 0):
        raise ValueError("variance map must be strictly positive on the lattice")
    z = (float(d_thr) - 1.0) * mb / np.sqrt(s2)
    return float(special.ndtr(z).sum())


def count_lattice_exceedances(m_p, m_b, d_thr, oversampling):
    """Empirical count of lattice sites with M_p < M_b * D_thr.

    The Monte Carlo counterpart of :func:`predict_false_positives` on a
    defect-free capture.
    """
    rows, cols = display_pixel_lattice(m_p.shape, oversampling)
    mp = m_p[rows[:, None], cols[None, :]]
    mb = m_b[rows[:, None], cols[None, :]]
    return int((mp < mb * float(d_thr)).sum())
