import numpy as np
import pytest

from prisma import residuals as res
from prisma.residuals import (
    PdeSpec,
    dirichlet_coords,
    dirichlet_spacing,
    guided_residual,
    ns_forcing,
    residual_darcy,
    residual_helmholtz,
    residual_navier_stokes,
    residual_poisson,
)


def manufactured(h_grid):
    x = dirichlet_coords(h_grid)
    xx, yy = np.meshgrid(x, x, indexing="ij")
    u = np.sin(np.pi * xx) * np.sin(np.pi * yy)
    return u


def interior(f, ring=1):
    return f[..., ring:-ring, ring:-ring]


class TestPoisson:
    def test_zero_fields(self):
        z = np.zeros((8, 8))
        assert np.array_equal(residual_poisson(z, z), z)

    def test_constant_source(self):
        a = np.ones((8, 8))
        assert np.allclose(residual_poisson(a, np.zeros((8, 8))), -1.0)

    def test_manufactured_second_order(self):
        errs = {}
        for n in (32, 64):
            u = manufactured(n)
            a = -2 * np.pi**2 * u
            r = residual_poisson(a, u)
            errs[n] = np.abs(interior(r)).max()
        ratio = errs[32] / errs[64]
        assert 3.5 < ratio < 4.5

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            residual_poisson(np.zeros((8, 8)), np.zeros((4, 4)))

    def test_affine_superposition(self):
        rng = np.random.default_rng(0)
        a1, u1 = rng.standard_normal((2, 16, 16))
        a2, u2 = rng.standard_normal((2, 16, 16))
        lhs = residual_poisson(a1 + a2, u1 + u2)
        rhs = residual_poisson(a1, u1) + residual_poisson(a2, u2)
        # residual is affine: R(s1) + R(s2) = R(s1 + s2) + R(0, 0); here R(0,0)=0
        assert np.allclose(lhs, rhs, atol=1e-9 * max(1, np.abs(lhs).max()))


class TestHelmholtz:
    def test_zeros(self):
        z = np.zeros((8, 8))
        assert np.array_equal(residual_helmholtz(z, z), z)

    def test_zero_u_gives_minus_a(self):
        rng = np.random.default_rng(1)
        a = rng.standard_normal((8, 8))
        assert np.array_equal(residual_helmholtz(a, np.zeros((8, 8))), -a)

    def test_manufactured_second_order(self):
        errs = {}
        for n in (32, 64):
            u = manufactured(n)
            a = (1.0 - 2 * np.pi**2) * u  # lap(u) + u for k = 1
            r = residual_helmholtz(a, u, k=1.0)
            errs[n] = np.abs(interior(r)).max()
        assert 3.5 < errs[32] / errs[64] < 4.5


class TestDarcy:
    def test_zero_solution(self):
        z = np.zeros((8, 8))
        assert np.allclose(residual_darcy(np.ones((8, 8)), z, g=1.0), -1.0)

    def test_unit_coefficient_reduces_to_poisson(self):
        rng = np.random.default_rng(2)
        u = rng.standard_normal((16, 16))
        ones = np.ones((16, 16))
        g = 1.0
        darcy = residual_darcy(ones, u, g=g)
        poisson = residual_poisson(-g * ones, u)  # lap(u) + g
        assert np.allclose(darcy, -poisson, atol=1e-12 * np.abs(poisson).max())

    def test_constant_coefficient_manufactured(self):
        errs = {}
        for n in (32, 64):
            u = manufactured(n)
            a = np.full((n, n), 2.0)
            r = residual_darcy(a, u, g=1.0)
            expect = -2.0 * (-2 * np.pi**2) * u - 1.0  # -2 lap(u) - 1 analytically
            errs[n] = np.abs(interior(r - expect)).max()
        assert 3.5 < errs[32] / errs[64] < 4.5


class TestNavierStokes:
    def test_zero_state(self):
        spec = PdeSpec(equation="navier_stokes")
        z = np.zeros((16, 16))
        r = residual_navier_stokes(z, z, np.zeros((16, 16)), spec)
        assert np.abs(r).max() == 0.0

    def test_constants_are_null_modes(self):
        spec = PdeSpec(equation="navier_stokes")
        c = np.full((16, 16), 3.25)
        r = residual_navier_stokes(c, c, np.zeros((16, 16)), spec)
        assert np.abs(r).max() < 1e-12

    def test_velocity_is_divergence_free(self):
        from prisma.fields import GrfSpec, sample_grf, spectral_derivative

        w = sample_grf(GrfSpec(kind="inverse_laplacian_squared"), (1, 1, 32, 32), seed=3)[0, 0]
        v1, v2 = res.stream_velocity(w)
        div = spectral_derivative(v1, axis=-2) + spectral_derivative(v2, axis=-1)
        assert np.abs(div).max() < 1e-10 * max(1.0, np.abs(v1).max())

    def test_curl_of_velocity_recovers_vorticity(self):
        from prisma.fields import GrfSpec, sample_grf, spectral_derivative

        w = sample_grf(GrfSpec(kind="inverse_laplacian_squared"), (1, 1, 32, 32), seed=4)[0, 0]
        w = w - w.mean()
        # drop the Nyquist bins: odd spectral derivatives zero them by design
        s = np.fft.fft2(w)
        s[16, :] = 0.0
        s[:, 16] = 0.0
        w = np.fft.ifft2(s).real
        v1, v2 = res.stream_velocity(w)
        curl = spectral_derivative(v2, axis=-2) - spectral_derivative(v1, axis=-1)
        assert np.allclose(curl, w, atol=1e-10)


class TestGuidedResidual:
    def _setup(self, seed=5):
        rng = np.random.default_rng(seed)
        state = rng.standard_normal((2, 2, 16, 16))
        obs = rng.standard_normal((2, 2, 16, 16))
        return state, obs

    def test_full_masks_ignore_state(self):
        state, obs = self._setup()
        spec = PdeSpec(equation="poisson")
        m = np.ones_like(state)
        r1 = guided_residual(state, obs, m, spec)
        r2 = guided_residual(np.zeros_like(state), obs, m, spec)
        assert np.array_equal(r1, r2)
        direct = residual_poisson(obs[:, 0], obs[:, 1])
        assert np.allclose(r1[:, 0], direct)

    def test_zero_masks_ignore_obs(self):
        state, obs = self._setup()
        spec = PdeSpec(equation="poisson")
        m = np.zeros_like(state)
        r = guided_residual(state, obs, m, spec)
        assert np.allclose(r[:, 0], residual_poisson(state[:, 0], state[:, 1]))

    def test_non_binary_mask_rejected(self):
        state, obs = self._setup()
        m = np.full_like(state, 0.5)
        with pytest.raises(ValueError, match="binary"):
            guided_residual(state, obs, m, PdeSpec(equation="poisson"))

    def test_output_shape(self):
        state, obs = self._setup()
        m = np.ones_like(state)
        r = guided_residual(state, obs, m, PdeSpec(equation="darcy"))
        assert r.shape == (2, 1, 16, 16)
