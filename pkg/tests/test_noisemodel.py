import numpy as np
import pytest

from dispcam.noisemodel import (
    ExposureMeta,
    NoiseParams,
    fit_gain,
    fit_read_adc,
    predict_variance,
)

# fitted parameters used as fixtures throughout the suite
FIXTURE_K = (1.303514, 0.713188, 1.307612)
FIXTURE_READ = (1.733335, 2.074783, 1.643126)
FIXTURE_ADC = (1.595734, 2.021769, 1.506513)


def fixture_params():
    return NoiseParams(k=FIXTURE_K, sigma2_read=FIXTURE_READ, sigma2_adc=FIXTURE_ADC)


class TestPredictVariance:
    def test_zero_signal(self):
        p = NoiseParams(k=(1, 1, 1), sigma2_read=(2, 2, 2), sigma2_adc=(3, 3, 3))
        assert predict_variance(0.0, ExposureMeta(1, 1), p, "r") == pytest.approx(5.0)

    def test_pure_shot_noise(self):
        p = NoiseParams(k=(1, 1, 1), sigma2_read=(0, 0, 0), sigma2_adc=(0, 0, 0))
        assert predict_variance(100.0, ExposureMeta(1, 2), p, "g") == pytest.approx(200.0)

    def test_fixture_red_channel(self):
        # mu=100, g=1: 100*1.303514 + 1.733335*1.303514^2 + 1.595734*1.303514^2
        p = fixture_params()
        k = FIXTURE_K[0]
        expected = 100 * k + FIXTURE_READ[0] * k * k + FIXTURE_ADC[0] * k * k
        got = predict_variance(100.0, ExposureMeta(0.1, 1.0), p, "r")
        assert got == pytest.approx(expected)
        assert got == pytest.approx(136.01, abs=0.01)

    def test_negative_mean_rejected(self):
        with pytest.raises(ValueError):
            predict_variance(-1.0, ExposureMeta(1, 1), fixture_params(), "r")

    def test_affine_in_mean(self):
        p = fixture_params()
        meta = ExposureMeta(1, 2)
        v0 = predict_variance(0.0, meta, p, "b")
        v1 = predict_variance(50.0, meta, p, "b")
        v2 = predict_variance(100.0, meta, p, "b")
        assert v2 - v1 == pytest.approx(v1 - v0)

    def test_matches_simulator_statistics(self):
        # sample Eq-1-style draws and compare the sample variance with the
        # prediction within 3 standard errors
        p = fixture_params()
        rng = np.random.default_rng(123)
        n = 200_000
        psi, t, g = 500.0, 0.5, 2.0
        k, s2r, s2a = p.channel("r")
        dn = k * (
            rng.poisson(psi * t, n) * g
            + rng.normal(0, np.sqrt(s2r), n) * g
            + rng.normal(0, np.sqrt(s2a), n)
        )
        meta = ExposureMeta(t, g)
        predicted = predict_variance(float(dn.mean()), meta, p, "r")
        sample_var = dn.var(ddof=1)
        se = sample_var * np.sqrt(2.0 / (n - 1))
        assert abs(sample_var - predicted) < 3 * se


class TestFitGain:
    def test_exact_line(self):
        means = np.array([100.0, 500.0, 2000.0])
        samples = list(zip(means, 1.3 * means))
        assert fit_gain(samples, g=1.0) == pytest.approx(1.3)

    def test_slope_divided_by_gain(self):
        means = np.array([100.0, 500.0, 2000.0])
        samples = list(zip(means, 2.6 * means + 7.0))
        assert fit_gain(samples, g=2.0) == pytest.approx(1.3)

    def test_single_level_rejected(self):
        with pytest.raises(ValueError):
            fit_gain([(100.0, 130.0), (100.0, 131.0)], g=1.0)

    def test_floor_excludes_dark_samples(self):
        # corrupt points below the floor must not perturb the fit
        means = np.array([100.0, 500.0, 2000.0])
        samples = list(zip(means, 1.3 * means)) + [(1.0, 99.0)]
        assert fit_gain(samples, g=1.0) == pytest.approx(1.3)

    def test_scale_consistency(self):
        rng = np.random.default_rng(7)
        means = rng.uniform(100, 5000, 8)
        vars_ = 0.9 * means + rng.normal(0, 5, 8)
        k1 = fit_gain(list(zip(means, vars_)), g=1.0)
        k2 = fit_gain(list(zip(means, 3.0 * vars_)), g=1.0)
        assert k2 == pytest.approx(3.0 * k1)

    def test_recovers_fixture_k_from_simulated_stacks(self):
        # Monte Carlo oracle: uniform fields at several luminances, one
        # million pixels per level, fixed gain
        p = fixture_params()
        rng = np.random.default_rng(42)
        n = 1_000_000
        t, g = 0.02, 1.0
        for ch, channel in enumerate("rgb"):
            k, s2r, s2a = p.channel(channel)
            samples = []
            for psi in (20_000.0, 60_000.0, 150_000.0, 400_000.0):
                dn = k * (
                    rng.poisson(psi * t, n) * g
                    + rng.normal(0, np.sqrt(s2r), n) * g
                    + rng.normal(0, np.sqrt(s2a), n)
                )
                samples.append((float(dn.mean()), float(dn.var(ddof=1))))
            fitted = fit_gain(samples, g=g)
            assert abs(fitted - k) / k < 0.02


class TestFitReadAdc:
    def test_exact_quadratic(self):
        gains = np.array([1.0, 2.0, 4.0])
        samples = list(zip(gains, 2.0 * gains**2 + 3.0))
        fit = fit_read_adc(samples, k=1.0)
        assert fit.sigma2_read == pytest.approx(2.0)
        assert fit.sigma2_adc == pytest.approx(3.0)
        assert not fit.clamped_read and not fit.clamped_adc

    def test_single_gain_rejected(self):
        with pytest.raises(ValueError):
            fit_read_adc([(1.0, 5.0), (1.0, 5.1)], k=1.0)

    def test_negative_solution_clamped_with_flag(self):
        gains = np.array([1.0, 2.0, 4.0])
        # variance decreasing in g^2 forces a negative read term
        samples = list(zip(gains, 10.0 - 1.0 * gains**2))
        with pytest.warns(UserWarning):
            fit = fit_read_adc(samples, k=1.0)
        assert fit.sigma2_read == 0.0
        assert fit.clamped_read

    def test_recovers_fixture_variances_from_dark_frames(self):
        p = fixture_params()
        rng = np.random.default_rng(99)
        n = 1_000_000
        for ch, channel in enumerate("rgb"):
            k, s2r, s2a = p.channel(channel)
            samples = []
            for g in (1.0, 2.0, 4.0, 8.0, 16.0):
                dn = k * (
                    rng.normal(0, np.sqrt(s2r), n) * g
                    + rng.normal(0, np.sqrt(s2a), n)
                )
                samples.append((g, float(dn.var(ddof=1))))
            fit = fit_read_adc(samples, k=k)
            assert abs(fit.sigma2_read - s2r) / s2r < 0.05
            assert abs(fit.sigma2_adc - s2a) / s2a < 0.05
