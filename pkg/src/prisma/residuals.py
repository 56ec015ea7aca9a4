"""Discrete residual operators for the governing equations.

Dirichlet-grid equations (Poisson, Darcy, Helmholtz) live on interior nodes
x_i = (i + 1) * h with h = 1/(H + 1), so the zero ghost ring outside the
array is exactly the homogeneous boundary condition. The Navier-Stokes
one-step residual is evaluated pseudo-spectrally on the periodic grid
x_i = i/H. All operators return a full-shape field; the boundary ring is
computed with zero ghosts rather than masked out.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fields

EQUATIONS = ("poisson", "darcy", "helmholtz", "navier_stokes")


@dataclass(frozen=True)
class PdeSpec:
    """Equation selector plus the constants its residual needs."""

    equation: str = "poisson"
    helmholtz_k: float = 1.0
    viscosity: float = 1e-3
    dt: float = 0.1
    forcing: float = 1.0  # constant Darcy forcing g

    def __post_init__(self):
        if self.equation not in EQUATIONS:
            raise ValueError(f"unknown equation {self.equation!r}; expected one of {EQUATIONS}")
        if self.viscosity <= 0 or self.dt <= 0:
            raise ValueError("viscosity and dt must be positive")

    @property
    def periodic(self) -> bool:
        return self.equation == "navier_stokes"


def dirichlet_spacing(h_grid: int) -> float:
    """Node spacing for an H x H interior-node Dirichlet grid on (0, 1)^2."""
    return 1.0 / (h_grid + 1)


def dirichlet_coords(h_grid: int) -> np.ndarray:
    """Interior node coordinates (i + 1) * h along one axis."""
    return (np.arange(h_grid) + 1.0) * dirichlet_spacing(h_grid)


def _zero_pad(u: np.ndarray) -> np.ndarray:
    pad = [(0, 0)] * (u.ndim - 2) + [(1, 1), (1, 1)]
    return np.pad(u, pad)


def laplacian_dirichlet(u: np.ndarray, h: float) -> np.ndarray:
    """5-point Laplacian with zero ghost cells outside the array."""
    up = _zero_pad(u)
    return (
        up[..., :-2, 1:-1]
        + up[..., 2:, 1:-1]
        + up[..., 1:-1, :-2]
        + up[..., 1:-1, 2:]
        - 4.0 * u
    ) / h**2


def residual_poisson(a: np.ndarray, u: np.ndarray, h: float | None = None) -> np.ndarray:
    """f = lap(u) - a on the Dirichlet grid."""
    a, u = np.asarray(a), np.asarray(u)
    if a.shape != u.shape:
        raise ValueError(f"shape mismatch: a {a.shape} vs u {u.shape}")
    h = dirichlet_spacing(u.shape[-1]) if h is None else h
    return laplacian_dirichlet(u, h) - a


def residual_helmholtz(a: np.ndarray, u: np.ndarray, h: float | None = None,
                       k: float = 1.0) -> np.ndarray:
    """lap(u) + k^2 u - a on the Dirichlet grid."""
    a, u = np.asarray(a), np.asarray(u)
    if a.shape != u.shape:
        raise ValueError(f"shape mismatch: a {a.shape} vs u {u.shape}")
    h = dirichlet_spacing(u.shape[-1]) if h is None else h
    return laplacian_dirichlet(u, h) + k**2 * u - a


def residual_darcy(a: np.ndarray, u: np.ndarray, h: float | None = None,
                   g: float = 1.0) -> np.ndarray:
    """-div(a grad u) - g in flux form with arithmetic face averaging.

    u takes zero ghosts (the boundary condition); a is edge-replicated so
    the a = const case reduces exactly to -lap(u) - g on every pixel.
    """
    a, u = np.asarray(a), np.asarray(u)
    if a.shape != u.shape:
        raise ValueError(f"shape mismatch: a {a.shape} vs u {u.shape}")
    h = dirichlet_spacing(u.shape[-1]) if h is None else h
    up = _zero_pad(u)
    pad_edge = [(0, 0)] * (a.ndim - 2) + [(1, 1), (1, 1)]
    ap = np.pad(a, pad_edge, mode="edge")

    # face coefficients between consecutive cells along each axis
    af_r = 0.5 * (ap[..., 1:-1, 1:] + ap[..., 1:-1, :-1])  # (..., H, W+1) x-faces
    af_d = 0.5 * (ap[..., 1:, 1:-1] + ap[..., :-1, 1:-1])  # (..., H+1, W) y-faces
    du_r = up[..., 1:-1, 1:] - up[..., 1:-1, :-1]
    du_d = up[..., 1:, 1:-1] - up[..., :-1, 1:-1]
    flux_r = af_r * du_r / h
    flux_d = af_d * du_d / h
    div = (flux_r[..., :, 1:] - flux_r[..., :, :-1] + flux_d[..., 1:, :] - flux_d[..., :-1, :]) / h
    return -div - g


def _periodic_k2(h_grid: int) -> np.ndarray:
    k1, k2 = fields.wavenumbers(h_grid, h_grid)
    return (2 * np.pi) ** 2 * (k1[:, None] ** 2 + k2[None, :] ** 2)


def stream_velocity(omega: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Velocity from vorticity via the periodic streamfunction solve.

    lap(psi) = -omega with the k = 0 null mode set to zero; v = perp-grad(psi).
    """
    omega = np.asarray(omega)
    n = omega.shape[-1]
    k2 = _periodic_k2(n)
    inv = np.zeros_like(k2)
    nz = k2 > 0
    inv[nz] = 1.0 / k2[nz]
    psi_hat = np.fft.fft2(omega) * inv
    k1c, k2c = fields.wavenumbers(n, n)
    ddx = 1j * 2 * np.pi * k1c[:, None]
    ddy = 1j * 2 * np.pi * k2c[None, :]
    v1 = np.fft.ifft2(psi_hat * ddy).real
    v2 = -np.fft.ifft2(psi_hat * ddx).real
    return v1, v2


def ns_rhs(omega: np.ndarray, forcing: np.ndarray, nu: float,
           dealias: bool = False) -> np.ndarray:
    """d(omega)/dt = -v . grad(omega) + nu lap(omega) + f, pseudo-spectral."""
    omega = np.asarray(omega)
    n = omega.shape[-1]
    w = omega - omega.mean(axis=(-2, -1), keepdims=True)
    v1, v2 = stream_velocity(w)
    dwdx = fields.spectral_derivative(omega, axis=-2)
    dwdy = fields.spectral_derivative(omega, axis=-1)
    adv = v1 * dwdx + v2 * dwdy
    if dealias:
        s = np.fft.fft2(adv)
        k1, k2 = fields.wavenumbers(n, n)
        keep = (np.abs(k1)[:, None] <= n // 3) & (np.abs(k2)[None, :] <= n // 3)
        adv = np.fft.ifft2(s * keep).real
    diff = nu * (
        fields.spectral_derivative(omega, axis=-2, order=2)
        + fields.spectral_derivative(omega, axis=-1, order=2)
    )
    return -adv + diff + forcing


def ns_forcing(h_grid: int) -> np.ndarray:
    """Stationary forcing 0.1 (sin + cos)(2 pi (x + y)) on the periodic grid."""
    x = np.arange(h_grid) / h_grid
    xx, yy = np.meshgrid(x, x, indexing="ij")
    return 0.1 * (np.sin(2 * np.pi * (xx + yy)) + np.cos(2 * np.pi * (xx + yy)))


def residual_navier_stokes(omega_t: np.ndarray, omega_next: np.ndarray,
                           forcing: np.ndarray, spec: PdeSpec) -> np.ndarray:
    """One-step vorticity-transport residual on the candidate next state.

    (w_next - w_t)/dt + v(w_next) . grad(w_next) - nu lap(w_next) - f, with
    the velocity recovered from the mean-free part of w_next.
    """
    omega_t, omega_next = np.asarray(omega_t), np.asarray(omega_next)
    if omega_t.shape != omega_next.shape:
        raise ValueError(f"shape mismatch: {omega_t.shape} vs {omega_next.shape}")
    rhs = ns_rhs(omega_next, forcing, spec.viscosity)
    return (omega_next - omega_t) / spec.dt - rhs


def residual(spec: PdeSpec, a: np.ndarray, u: np.ndarray,
             h: float | None = None) -> np.ndarray:
    """Dispatch R(a, u) for the given equation; a and u are (..., H, W)."""
    if spec.equation == "poisson":
        return residual_poisson(a, u, h)
    if spec.equation == "helmholtz":
        return residual_helmholtz(a, u, h, k=spec.helmholtz_k)
    if spec.equation == "darcy":
        return residual_darcy(a, u, h, g=spec.forcing)
    return residual_navier_stokes(a, u, ns_forcing(np.asarray(u).shape[-1]), spec)


def guided_residual(x_state: np.ndarray, x_obs: np.ndarray, masks: np.ndarray,
                    spec: PdeSpec) -> np.ndarray:
    """Residual of the observation-mixed state (B, 2, H, W) -> (B, 1, H, W).

    Observed pixels are copied from x_obs, unobserved ones kept from
    x_state, before the equation residual is evaluated.
    """
    x_state, x_obs, masks = (np.asarray(v) for v in (x_state, x_obs, masks))
    if not (x_state.shape == x_obs.shape == masks.shape) or x_state.shape[1] != 2:
        raise ValueError("x_state, x_obs and masks must share a (B, 2, H, W) shape")
    if not np.all((masks == 0.0) | (masks == 1.0)):
        raise ValueError("masks must be binary")
    mixed = masks * x_obs + (1.0 - masks) * x_state
    r = residual(spec, mixed[:, 0], mixed[:, 1])
    return r[:, None]
