"""Classical solvers and samplers that manufacture (a, u) training pairs.

Coefficients follow the benchmark laws: Darcy coefficients are two-level
{3, 12} threshold fields, Poisson sources are {0, 1} indicators, both from
a N(0, (-lap + 9 I)^-2) random field; Helmholtz uses per-sample uniform
levels on the same sign regions; Navier-Stokes pairs are one integration
step of the pseudo-spectral vorticity equation.

Dirichlet solves share the exact stencil of the residual operators, so
every generated pair satisfies the residual-consistency bound below.
"""
from __future__ import annotations

import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fields import GrfSpec, require_field, sample_grf
from .residuals import PdeSpec, dirichlet_spacing, ns_forcing, ns_rhs, residual

DIRECT_SOLVE_MAX_H = 64
CG_RTOL = 1e-12

# residual-consistency ceilings per equation, measured once on generated
# samples (algebraic solve residual, resp. one-step time truncation for NS:
# max 0.69 observed over seeds at 32 and 64)
RESIDUAL_TOLERANCE = {
    "poisson": 1e-8,
    "helmholtz": 1e-8,
    "darcy": 1e-7,
    "navier_stokes": 1.5,
}

PDE_CODES = {"unspecified": 0, "poisson": 1, "darcy": 2, "helmholtz": 3, "navier_stokes": 4}
PDE_NAMES = {v: k for k, v in PDE_CODES.items()}


class DatasetError(Exception):
    """Base class for dataset container failures."""


class BadMagicError(DatasetError):
    pass


class BadVersionError(DatasetError):
    pass


class TruncatedFileError(DatasetError):
    pass


class BadDtypeError(DatasetError):
    pass


@dataclass(frozen=True)
class DatasetSpec:
    pde: PdeSpec = field(default_factory=PdeSpec)
    n_train: int = 2048
    n_test: int = 256
    resolution: int = 32
    seed: int = 0
    grf: GrfSpec = field(default_factory=lambda: GrfSpec(kind="inverse_laplacian_squared", shift=9.0))

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be >= 1")


def derive_rng(seed: int, *indices: int) -> np.random.Generator:
    """Independent per-index stream so any subset regenerates identically."""
    return np.random.default_rng(np.random.SeedSequence((int(seed),) + tuple(int(i) for i in indices)))


def worker_count() -> int:
    env = os.environ.get("PRISMA_THREADS", "")
    if env.strip():
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


# ---------------------------------------------------------------------------
# Dirichlet solvers

def darcy_matrix(a: np.ndarray, h: float) -> sp.csr_matrix:
    """SPD flux-form matrix of -div(a grad .) with zero u-ghosts."""
    n = a.shape[0]
    ap = np.pad(a, 1, mode="edge")
    af_r = 0.5 * (ap[1:-1, 1:] + ap[1:-1, :-1])  # (n, n+1) x-faces
    af_d = 0.5 * (ap[1:, 1:-1] + ap[:-1, 1:-1])  # (n+1, n) y-faces
    diag = (af_r[:, :-1] + af_r[:, 1:] + af_d[:-1, :] + af_d[1:, :]) / h**2
    right = -af_r[:, 1:-1] / h**2  # coupling (i, j) <-> (i, j+1)
    down = -af_d[1:-1, :] / h**2  # coupling (i, j) <-> (i+1, j)
    right_flat = np.concatenate([right, np.zeros((n, 1))], axis=1).ravel()[:-1]
    down_flat = down.ravel()
    return sp.diags(
        [diag.ravel(), right_flat, right_flat, down_flat, down_flat],
        [0, 1, -1, n, -n],
        format="csr",
    )


def _sparse_solve(mat: sp.csr_matrix, rhs: np.ndarray, n: int) -> np.ndarray:
    if n <= DIRECT_SOLVE_MAX_H:
        return spla.splu(mat.tocsc()).solve(rhs)
    sol, info = spla.cg(mat, rhs, rtol=CG_RTOL, atol=0.0, maxiter=20 * n * n)
    if info != 0:
        res = np.linalg.norm(mat @ sol - rhs) / np.linalg.norm(rhs)
        raise RuntimeError(f"CG failed to converge (info={info}, rel residual {res:.3e})")
    return sol


def solve_darcy(a: np.ndarray, g: float = 1.0) -> np.ndarray:
    n = a.shape[0]
    h = dirichlet_spacing(n)
    mat = darcy_matrix(a, h)
    rhs = np.full(n * n, g)
    return _sparse_solve(mat, rhs, n).reshape(n, n)


def solve_poisson(a: np.ndarray) -> np.ndarray:
    """lap(u) = a with zero Dirichlet boundary."""
    n = a.shape[0]
    h = dirichlet_spacing(n)
    neg_lap = darcy_matrix(np.ones((n, n)), h)
    return _sparse_solve(neg_lap, -a.ravel(), n).reshape(n, n)


def solve_helmholtz(a: np.ndarray, k: float = 1.0) -> np.ndarray:
    """lap(u) + k^2 u = a with zero Dirichlet boundary."""
    n = a.shape[0]
    h = dirichlet_spacing(n)
    neg_lap = darcy_matrix(np.ones((n, n)), h)
    mat = neg_lap - k**2 * sp.identity(n * n, format="csr")
    return _sparse_solve(mat, -a.ravel(), n).reshape(n, n)


# ---------------------------------------------------------------------------
# Navier-Stokes integrator

def ns_integrate(omega0: np.ndarray, t_final: float, nu: float,
                 substeps: int = 20) -> np.ndarray:
    """RK4 pseudo-spectral vorticity integration with 2/3 dealiasing."""
    n = omega0.shape[-1]
    forcing = ns_forcing(n)
    dt = t_final / substeps
    w = omega0.astype(float).copy()
    for _ in range(substeps):
        k1 = ns_rhs(w, forcing, nu, dealias=True)
        k2 = ns_rhs(w + 0.5 * dt * k1, forcing, nu, dealias=True)
        k3 = ns_rhs(w + 0.5 * dt * k2, forcing, nu, dealias=True)
        k4 = ns_rhs(w + dt * k3, forcing, nu, dealias=True)
        w = w + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return w


# ---------------------------------------------------------------------------
# sampling

def sample_coefficient(pde: PdeSpec, grf: GrfSpec, resolution: int, seed: int) -> np.ndarray:
    """Draw one coefficient / source / initial-state field (H, W)."""
    z = sample_grf(grf, (1, 1, resolution, resolution), seed)[0, 0]
    if pde.equation == "darcy":
        return np.where(z > 0, 12.0, 3.0)
    if pde.equation == "poisson":
        return (z > 0).astype(float)
    if pde.equation == "helmholtz":
        rng = derive_rng(seed, 1)
        lo, hi = rng.uniform(0.5, 2.5, size=2)
        return np.where(z > 0, hi, lo)
    return z  # navier_stokes: smooth initial vorticity


def solve_forward(a: np.ndarray, pde: PdeSpec) -> np.ndarray:
    if pde.equation == "poisson":
        return solve_poisson(a)
    if pde.equation == "darcy":
        return solve_darcy(a, g=pde.forcing)
    if pde.equation == "helmholtz":
        return solve_helmholtz(a, k=pde.helmholtz_k)
    return ns_integrate(a, pde.dt, pde.viscosity)


def generate_sample(spec: DatasetSpec, index: int) -> np.ndarray:
    """One (2, H, W) record: channels [a, u] (or [w_t, w_next] for NS)."""
    seed_rng = derive_rng(spec.seed, index)
    sub_seed = int(seed_rng.integers(0, 2**63 - 1))
    a = sample_coefficient(spec.pde, spec.grf, spec.resolution, sub_seed)
    u = solve_forward(a, spec.pde)
    return np.stack([a, u])


def generate_dataset(spec: DatasetSpec) -> np.ndarray:
    """All n_train + n_test samples, embarrassingly parallel and seed-stable."""
    total = spec.n_train + spec.n_test
    out = np.empty((total, 2, spec.resolution, spec.resolution))
    workers = worker_count()
    if workers > 1 and total > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for i, rec in enumerate(pool.map(lambda i: generate_sample(spec, i), range(total))):
                out[i] = rec
    else:
        for i in range(total):
            out[i] = generate_sample(spec, i)
    require_field(out)
    return out


def residual_consistency_max(samples: np.ndarray, pde: PdeSpec) -> float:
    """max over samples of ||R(a, u)||_inf; generated data must stay small."""
    r = residual(pde, samples[:, 0], samples[:, 1])
    return float(np.abs(r).max())


def corrupt_observations(f: np.ndarray, fraction: float, sigma_noise: float,
                         seed: int) -> np.ndarray:
    """Additive N(0, sigma^2) noise on exactly round(p * H * W) pixels per slice."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must be in [0, 1], got {fraction}")
    f = np.asarray(f, dtype=float)
    if fraction == 0.0:
        return f.copy()
    lead = f.shape[:-2]
    h, w = f.shape[-2:]
    n_hit = int(round(fraction * h * w))
    out = f.copy().reshape(-1, h * w)
    for i in range(out.shape[0]):
        rng = derive_rng(seed, i)
        idx = rng.choice(h * w, size=n_hit, replace=False)
        out[i, idx] += sigma_noise * rng.standard_normal(n_hit)
    return out.reshape(*lead, h, w)


def sample_sparsity_mask(fraction: float, seed: int, shape: tuple[int, int]) -> np.ndarray:
    """Binary mask with exactly round(q * H * W) ones, uniform without replacement."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"observed fraction must be in (0, 1], got {fraction}")
    h, w = shape
    n_ones = int(round(fraction * h * w))
    rng = derive_rng(seed)
    idx = rng.choice(h * w, size=n_ones, replace=False)
    mask = np.zeros(h * w)
    mask[idx] = 1.0
    return mask.reshape(h, w)


# ---------------------------------------------------------------------------
# PRGD container (little-endian)
#   magic "PRGD" | u32 version=1 | u32 n_samples | u32 H | u32 W
#   | u32 n_channels | u32 dtype (1=f32, 2=f64) | u8 pde-code
#   then n_samples contiguous records of channels x H x W row-major scalars.

_MAGIC = b"PRGD"
_HEADER = struct.Struct("<4sIIIIIIB")
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


def write_dataset(path: str, samples: np.ndarray, pde: str = "unspecified",
                  dtype: str = "f64") -> None:
    samples = np.asarray(samples)
    if samples.ndim != 4:
        raise ValueError(f"expected (n, C, H, W) samples, got {samples.shape}")
    code = {"f32": 1, "f64": 2}[dtype]
    np_dtype = _DTYPES[code]
    n, c, h, w = samples.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, 1, n, h, w, c, code, PDE_CODES[pde]))
        fh.write(np.ascontiguousarray(samples, dtype=np_dtype).tobytes())


def read_dataset(path: str) -> tuple[np.ndarray, str]:
    """Returns (samples, pde name); bit-exact round trip of write_dataset."""
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise TruncatedFileError(f"{path}: file shorter than the {_HEADER.size}-byte header")
        magic, version, n, h, w, c, dcode, pcode = _HEADER.unpack(raw)
        if magic != _MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}, expected {_MAGIC!r}")
        if version != 1:
            raise BadVersionError(f"{path}: unsupported version {version}")
        if dcode not in _DTYPES:
            raise BadDtypeError(f"{path}: unknown dtype code {dcode}")
        if pcode not in PDE_NAMES:
            raise DatasetError(f"{path}: unknown pde code {pcode}")
        np_dtype = _DTYPES[dcode]
        expect = n * c * h * w * np_dtype.itemsize
        payload = fh.read(expect + 1)
        if len(payload) < expect:
            raise TruncatedFileError(f"{path}: payload has {len(payload)} of {expect} bytes")
        if len(payload) > expect:
            raise DatasetError(f"{path}: trailing bytes after payload")
    data = np.frombuffer(payload[:expect], dtype=np_dtype).reshape(n, c, h, w)
    return data.copy(), PDE_NAMES[pcode]


HEADER_SIZE = _HEADER.size
