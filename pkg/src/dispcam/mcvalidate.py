"""Monte Carlo validation of analytic uncertainty for a chain of stages.

Realizations of the input image are drawn from its stated distribution,
pushed through the (pure) stage chain, and the empirical per-pixel
standard deviation is compared with the analytic one from the central
run.  Two summary numbers are reported: the plain RMSE between analytic
and empirical sigma, and the error-to-signal ratio rRMSE where each
pixel's sigma error is normalized by the measured mean value.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imgcore import UncertainImage

__all__ = ["McReport", "mc_propagate"]

_RELATIVE_MEAN_FLOOR = 1e-6  # pixels dimmer than this fraction of max are skipped


@dataclass
class McReport:
    """Per-pixel empirical statistics and scalar agreement summaries."""

    empirical_mean: np.ndarray
    empirical_sigma: np.ndarray
    analytic_sigma: np.ndarray
    rmse: float
    rrmse: float
    n_samples: int
    seed: int

    def __post_init__(self):
        if self.rmse < 0 or self.rrmse < 0:
            raise ValueError("RMSE summaries must be non-negative")


def _first_moments(img):
    if img.mode == "diag":
        return img.mean, np.sqrt(img.uncertainty)
    diag = img.uncertainty[[0, 4, 8]]
    return img.mean, np.sqrt(diag)


def _check_stage_purity(chain, img):
    """Cheap purity guard: stages must not mutate inputs or carry state."""
    probe = img.copy()
    current = probe
    for i, stage in enumerate(chain):
        snapshot = current.copy()
        out1 = stage(current)
        out2 = stage(current)
        if not (
            np.array_equal(current.mean, snapshot.mean)
            and np.array_equal(current.uncertainty, snapshot.uncertainty)
        ):
            raise RuntimeError(f"stage {i} mutated its input: contract violation")
        if not (
            np.array_equal(out1.mean, out2.mean)
            and np.array_equal(out1.uncertainty, out2.uncertainty)
        ):
            raise RuntimeError(f"stage {i} is not deterministic: contract violation")
        current = out1
    return current


def _run_chain(chain, img):
    for stage in chain:
        img = stage(img)
    return img


def mc_propagate(chain, input_img, n, seed=0, sampler=None):
    """Validate analytic uncertainty propagation of ``chain`` by Monte Carlo.

    ``chain`` is an ordered list of pure UncertainImage -> UncertainImage
    stages.  ``n`` realizations of the input are drawn from its stated
    per-pixel normal distribution (or from ``sampler(rng)`` when given),
    pushed through the chain, and compared against the analytic variance
    of the central run.  Deterministic for a fixed seed; the accumulation
    order is fixed and independent of any parallel execution.
    """
    if n < 2:
        raise ValueError("need at least 2 Monte Carlo samples")
    if not isinstance(input_img, UncertainImage):
        raise TypeError("mc_propagate expects an UncertainImage input")

    central = _check_stage_purity(chain, input_img)
    mean_a, sigma_a = _first_moments(central)

    mu_in, sigma_in = _first_moments(input_img)
    streams = np.random.SeedSequence(seed).spawn(n)
    acc = np.zeros_like(mean_a)
    acc_sq = np.zeros_like(mean_a)
    for stream in streams:
        rng = np.random.default_rng(stream)
        if sampler is not None:
            realization = sampler(rng)
        else:
            noise = rng.standard_normal(mu_in.shape)
            realization = UncertainImage(
                mu_in + sigma_in * noise, input_img.uncertainty.copy(), input_img.mode
            )
        out = _run_chain(chain, realization)
        acc += out.mean
        acc_sq += out.mean**2

    emp_mean = acc / n
    emp_var = np.maximum((acc_sq - acc**2 / n) / (n - 1), 0.0)
    emp_sigma = np.sqrt(emp_var)

    diff = sigma_a - emp_sigma
    rmse = float(np.sqrt(np.mean(diff**2)))
    floor = _RELATIVE_MEAN_FLOOR * np.abs(mean_a).max()
    usable = np.abs(mean_a) > floor
    if not np.any(usable):
        raise ValueError("all pixels fall below the relative-mean floor")
    rrmse = float(np.sqrt(np.mean((diff[usable] / mean_a[usable]) ** 2)))
    return McReport(
        empirical_mean=emp_mean,
        empirical_sigma=emp_sigma,
        analytic_sigma=sigma_a,
        rmse=rmse,
        rrmse=rrmse,
        n_samples=int(n),
        seed=int(seed),
    )
