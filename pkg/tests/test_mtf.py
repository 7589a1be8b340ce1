import math

import numpy as np
import pytest
from scipy.special import erf

from dispcam.imgcore import UncertainImage
from dispcam.mtf import (
    EsfSamples,
    MtfModel,
    estimate_esf,
    esf_to_mtf,
    fit_mtf,
    wiener_deconvolve,
    wiener_variance_multiplier,
)

# fitted MTF parameters used as fixtures
FIXTURE_MTF = dict(a1=0.00174, b1=0.67193, c1=0.12362,
                   a2=1.30353, b2=-0.11405, c2=0.22962)


def fixture_model(clamp=0.5):
    return MtfModel(**FIXTURE_MTF, clamp_floor=clamp)


def slanted_edge_image(angle_deg=5.0, sigma=None, size=96, offset=0.0):
    """Step edge (bright right of the line), optionally erf-blurred."""
    h = w = size
    cols = np.arange(w) - (w - 1) / 2
    rows = (h - 1) / 2 - np.arange(h)
    x, y = np.meshgrid(cols, rows)
    t = math.radians(angle_deg)
    d = x * math.cos(t) - y * math.sin(t) - offset
    if sigma is None:
        return (d >= 0).astype(np.float64)
    return 0.5 * (1 + erf(d / (sigma * np.sqrt(2))))


class TestMtfModel:
    def test_fixture_value_at_dc(self):
        assert fixture_model().eval_raw(0.0) == pytest.approx(1.019, abs=2e-3)

    def test_clamp_floor(self):
        m = fixture_model()
        assert m.eval(0.5) == 0.5
        assert m.eval_raw(0.5) < 0.01

    def test_zero_width_rejected(self):
        with pytest.raises(ValueError):
            MtfModel(1, 0, 0, 1, 0, 0.2)


class TestEstimateEsf:
    def test_ideal_step_is_step_within_one_bin(self):
        esf = estimate_esf(slanted_edge_image(angle_deg=5.0), (5.0, 0.0))
        lo, hi = esf.values.min(), esf.values.max()
        crossings = np.sum((esf.values > lo + 0.1) & (esf.values < hi - 0.1))
        assert crossings <= 2

    def test_blurred_edge_matches_erf_profile(self):
        sigma = 1.0
        esf = estimate_esf(slanted_edge_image(angle_deg=5.0, sigma=sigma), (5.0, 0.0))
        keep = np.abs(esf.positions) < 20
        expected = 0.5 * (1 + erf(esf.positions[keep] / (sigma * np.sqrt(2))))
        assert np.abs(esf.values[keep] - expected).max() < 0.01

    def test_uniform_image_rejected(self):
        with pytest.raises(ValueError):
            estimate_esf(np.ones((32, 32)), (5.0, 0.0))

    def test_positions_strictly_increasing(self):
        esf = estimate_esf(slanted_edge_image(), (5.0, 0.0))
        assert np.all(np.diff(esf.positions) > 0)


class TestEsfToMtf:
    def test_gaussian_psf_against_analytic_oracle(self):
        sigma = 1.0
        esf = estimate_esf(
            slanted_edge_image(angle_deg=5.0, sigma=sigma, size=160), (5.0, 0.0)
        )
        omega, m = esf_to_mtf(esf)
        band = (omega > 0) & (omega <= 0.4)
        analytic = np.exp(-2 * np.pi**2 * sigma**2 * omega[band] ** 2)
        assert np.abs(m[band] - analytic).max() < 0.02

    def test_delta_psf_is_identity(self):
        esf = estimate_esf(slanted_edge_image(angle_deg=5.0, size=160), (5.0, 0.0))
        omega, m = esf_to_mtf(esf)
        assert np.abs(m[omega <= 0.4] - 1.0).max() < 0.01

    def test_dc_normalization_exact(self):
        esf = estimate_esf(slanted_edge_image(sigma=0.8, size=128), (5.0, 0.0))
        omega, m = esf_to_mtf(esf)
        assert omega[0] == 0.0
        assert m[0] == 1.0

    def test_too_few_samples_rejected(self):
        with pytest.raises(ValueError):
            esf_to_mtf(EsfSamples(np.arange(10) * 0.25, np.linspace(0, 1, 10)))

    def test_constant_esf_rejected(self):
        with pytest.raises(ValueError):
            esf_to_mtf(EsfSamples(np.arange(80) * 0.25, np.ones(80)))


class TestFitMtf:
    def test_recovers_fixture_curve(self):
        model = fixture_model()
        omega = np.linspace(0, 0.5, 101)
        fitted = fit_mtf((omega, model.eval_raw(omega)))
        dev = np.abs(fitted.eval_raw(omega) - model.eval_raw(omega))
        assert dev.max() < 0.01

    def test_flat_target(self):
        omega = np.linspace(0, 0.5, 64)
        fitted = fit_mtf((omega, np.ones_like(omega)))
        assert np.abs(fitted.eval_raw(omega) - 1.0).max() < 1e-6

    def test_fit_from_measured_edge(self):
        sigma = 0.9
        esf = estimate_esf(
            slanted_edge_image(angle_deg=5.0, sigma=sigma, size=160), (5.0, 0.0)
        )
        fitted = fit_mtf(esf_to_mtf(esf))
        omega = np.linspace(0.0, 0.4, 41)
        analytic = np.exp(-2 * np.pi**2 * sigma**2 * omega**2)
        assert np.abs(fitted.eval_raw(omega) - analytic).max() < 0.03

    def test_insufficient_coverage_rejected(self):
        with pytest.raises(ValueError):
            fit_mtf((np.linspace(0, 0.2, 30), np.ones(30)))


def flat_plus_blob(size=32, level=100.0):
    rows = np.arange(size) - size / 2
    blob = 20.0 * np.exp(-(rows[:, None] ** 2 + rows[None, :] ** 2) / (2 * 6.0**2))
    return level + blob


class TestWienerDeconvolve:
    def test_identity_filter(self):
        img = UncertainImage(flat_plus_blob()[None], np.full((1, 32, 32), 4.0))
        out = wiener_deconvolve(img, MtfModel(0, 0.5, 0.2, 1.0, 0.0, 1e5))
        # M == 1 up to 2.5e-9, noise PSD > 0 gives G == S/(S+N) slightly < 1
        assert np.allclose(out.mean, img.mean, rtol=1e-3, atol=1e-3)
        assert np.allclose(out.uncertainty, img.uncertainty, rtol=2e-2)

    def test_identity_filter_zero_noise_exact(self):
        img = UncertainImage(flat_plus_blob()[None], np.zeros((1, 32, 32)))
        out = wiener_deconvolve(img, MtfModel(0, 0.5, 0.2, 1.0, 0.0, 1e5))
        assert np.allclose(out.mean, img.mean, atol=1e-9)
        assert np.allclose(out.uncertainty, 0.0)

    def test_constant_half_mtf_zero_noise(self):
        # M == 0.5 with N = 0: G == 2 everywhere except it keeps M(0)>=0.5,
        # so use a model whose raw value is 0.25 everywhere -> clamped to 0.5
        model = MtfModel(0, 0.5, 0.2, 0.25, 0.0, 1e6, clamp_floor=0.5)
        img = UncertainImage(flat_plus_blob()[None], np.zeros((1, 32, 32)))
        out = wiener_deconvolve(img, model)
        assert np.allclose(out.mean, 2.0 * img.mean, rtol=1e-6)
        mult = wiener_variance_multiplier(model, img.mean[0], 0.0)
        assert mult == pytest.approx(4.0, rel=1e-6)

    def test_multiplier_bounds_zero_noise(self):
        img = flat_plus_blob()
        for model in (fixture_model(), MtfModel(0, 0.5, 0.2, 1.0, 0.0, 1e5)):
            mult = wiener_variance_multiplier(model, img, 0.0)
            assert 1.0 <= mult <= 4.0

    def test_filter_gain_bounded_by_clamp(self):
        # |G| <= 1/clamp_floor for any noise level
        model = fixture_model()
        from dispcam.mtf import _pad_to_even, _wiener_filter

        plane, _ = _pad_to_even(flat_plus_blob(33))
        for n_psd in (0.0, 1e-6, 1.0, 1e6):
            filt, _ = _wiener_filter(model, plane, n_psd)
            assert filt.max() <= 2.0 + 1e-12

    def test_odd_size_padding_roundtrip(self):
        img = UncertainImage(flat_plus_blob(33)[None], np.zeros((1, 33, 33)))
        out = wiener_deconvolve(img, MtfModel(0, 0.5, 0.2, 1.0, 0.0, 1e5))
        assert out.mean.shape == img.mean.shape
        assert np.allclose(out.mean, img.mean, atol=1e-9)

    def test_deconvolve_then_reconvolve_bandlimited(self):
        # blur a band-limited scene with the clamped model, deconvolve, and
        # compare within 1% RMS
        model = fixture_model()
        scene = flat_plus_blob(64)
        fy = np.fft.fftfreq(64)[:, None]
        fx = np.fft.fftfreq(64)[None, :]
        m2d = model.eval(np.hypot(fx, fy))
        blurred = np.fft.ifft2(np.fft.fft2(scene) * m2d).real
        img = UncertainImage(blurred[None], np.zeros((1, 64, 64)))
        out = wiener_deconvolve(img, model)
        rms = np.sqrt(np.mean((out.mean[0] - scene) ** 2)) / scene.mean()
        assert rms < 0.01

    def test_linearity_under_joint_scaling(self):
        model = fixture_model()
        scene = flat_plus_blob()
        var = np.full((1, 32, 32), 2.0)
        base = wiener_deconvolve(UncertainImage(scene[None], var), model)
        alpha = 3.0
        scaled = wiener_deconvolve(
            UncertainImage(alpha * scene[None], alpha**2 * var), model
        )
        assert np.allclose(scaled.mean, alpha * base.mean, rtol=1e-10)

    def test_variance_against_monte_carlo(self):
        # blur + white noise, many realizations: empirical per-pixel variance
        # vs the analytic multiplier prediction at 128x128
        rng = np.random.default_rng(17)
        model = fixture_model()
        size = 128
        scene = flat_plus_blob(size, level=200.0)
        fy = np.fft.fftfreq(size)[:, None]
        fx = np.fft.fftfreq(size)[None, :]
        m2d_true = model.eval_raw(np.hypot(fx, fy))
        blurred = np.fft.ifft2(np.fft.fft2(scene) * m2d_true).real
        sigma = 1.5
        n_mc = 400
        outputs = np.empty((n_mc, size, size))
        var_plane = np.full((1, size, size), sigma**2)
        for i in range(n_mc):
            noisy = blurred + rng.normal(0, sigma, blurred.shape)
            out = wiener_deconvolve(UncertainImage(noisy[None], var_plane), model)
            outputs[i] = out.mean[0]
        emp_var = outputs.var(axis=0, ddof=1)
        ana = wiener_deconvolve(
            UncertainImage(blurred[None], var_plane), model
        ).uncertainty[0]
        rrmse = np.sqrt(np.mean(((np.sqrt(ana) - np.sqrt(emp_var)) / blurred) ** 2))
        assert rrmse < 0.10

    def test_rejects_small_images(self):
        img = UncertainImage(np.ones((1, 4, 4)), np.zeros((1, 4, 4)))
        with pytest.raises(ValueError):
            wiener_deconvolve(img, fixture_model())
