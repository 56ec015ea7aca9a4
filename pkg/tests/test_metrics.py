import numpy as np
import pytest

from prisma.metrics import (
    darcy_error_rate,
    format_csv,
    noise_sweep,
    relative_l2,
    residual_moments,
)


class TestRelativeL2:
    def test_exact_match(self):
        x = np.random.default_rng(0).standard_normal((3, 2, 8, 8))
        assert relative_l2(x, x) == 0.0

    def test_zero_prediction_is_one(self):
        x = np.random.default_rng(1).standard_normal((3, 2, 8, 8))
        assert relative_l2(np.zeros_like(x), x) == pytest.approx(1.0)

    def test_scaling(self):
        x = np.random.default_rng(2).standard_normal((4, 8, 8))
        assert relative_l2(1.1 * x, x) == pytest.approx(0.1, abs=1e-12)

    def test_scale_covariance(self):
        rng = np.random.default_rng(3)
        p, t = rng.standard_normal((2, 5, 8, 8))
        assert relative_l2(3.7 * p, 3.7 * t) == pytest.approx(relative_l2(p, t), rel=1e-12)

    def test_zero_truth_rejected(self):
        with pytest.raises(ValueError, match="zero-norm"):
            relative_l2(np.ones((1, 4)), np.zeros((1, 4)))


class TestDarcyErrorRate:
    def _truth(self, seed=0):
        rng = np.random.default_rng(seed)
        return np.where(rng.standard_normal((2, 16, 16)) > 0, 12.0, 3.0)

    def test_exact(self):
        t = self._truth()
        assert darcy_error_rate(t, t) == 0.0

    def test_level_swap_is_total_error(self):
        t = self._truth()
        assert darcy_error_rate(15.0 - t, t) == 1.0

    def test_half_flipped(self):
        t = self._truth()
        pred = t.copy().reshape(-1)
        pred[: pred.size // 2] = 15.0 - pred[: pred.size // 2]
        assert darcy_error_rate(pred.reshape(t.shape), t) == 0.5

    def test_threshold_symmetric(self):
        t = self._truth(1)
        rng = np.random.default_rng(2)
        pred = rng.uniform(0, 15, t.shape)
        assert darcy_error_rate(pred, t) == darcy_error_rate(15.0 - pred, 15.0 - t)

    def test_rejects_bad_truth(self):
        with pytest.raises(ValueError, match="values"):
            darcy_error_rate(np.ones((2, 2)), np.ones((2, 2)))


class TestResidualMoments:
    def test_standard_normal(self):
        r = np.random.default_rng(0).standard_normal(1_000_000)
        skew, kurt = residual_moments(r)
        assert abs(skew) < 0.01
        assert abs(kurt) < 0.02

    def test_exponential_skewness(self):
        # Exp(1) has skewness 2 and excess kurtosis 6
        r = np.random.default_rng(1).exponential(1.0, 1_000_000)
        skew, kurt = residual_moments(r)
        assert skew == pytest.approx(2.0, abs=0.05)
        assert kurt == pytest.approx(6.0, abs=0.5)

    def test_constant_guard(self):
        assert residual_moments(np.full((8, 8), 3.3)) == (0.0, 0.0)

    def test_matches_direct_summation(self):
        r = np.random.default_rng(2).standard_normal(5000)
        skew, kurt = residual_moments(r)
        m = r.mean()
        m2 = ((r - m) ** 2).sum() / r.size
        m3 = ((r - m) ** 3).sum() / r.size
        m4 = ((r - m) ** 4).sum() / r.size
        assert skew == pytest.approx(m3 / m2**1.5, rel=1e-10)
        assert kurt == pytest.approx(m4 / m2**2 - 3, rel=1e-10)


class TestCsv:
    def test_formatting(self):
        text = format_csv(
            ["task", "err"],
            [("forward", 0.123456789), ("inverse", 1.0 / 3.0)],
            comments=["seed=7"],
        )
        assert text == "# seed=7\ntask,err\nforward,0.123457\ninverse,0.333333\n"
        assert "\r" not in text


class TestNoiseSweep:
    def test_single_sample_single_step_plumbing(self):
        from prisma.denoiser import Denoiser, DenoiserConfig
        from prisma.residuals import PdeSpec

        cfg = DenoiserConfig(levels=2, channels=(4, 4), modes=(2, 2), embed_dim=8, dropout=0.0)
        model = Denoiser(cfg, seed=0)
        rng = np.random.default_rng(0)
        testset = rng.standard_normal((1, 2, 16, 16))
        rows = noise_sweep(model, testset, PdeSpec(), fractions=[0.5], sigma_levels=[1.0],
                           steps=2, seed=0)
        assert len(rows) == 1
        frac, sig, err = rows[0]
        assert (frac, sig) == (0.5, 1.0)
        assert np.isfinite(err)
        text = format_csv(["fraction", "sigma", "rel_l2"], rows)
        assert text.count("\n") == 2
