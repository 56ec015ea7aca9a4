"""Grid substrate: FFTs, Gaussian random fields, resampling, spectral derivatives.

Fields are real arrays of layout (B, C, H, W) on the unit square with
periodic sample points x_i = i/H. Spectra use the half-spectrum layout of
``np.fft.rfft2``: complex arrays (B, C, H, W//2 + 1) with the forward
transform unnormalized and the inverse carrying the 1/(H*W) factor.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

GRF_KINDS = ("rbf", "inverse_laplacian_squared")


def require_field(f: np.ndarray, name: str = "field") -> np.ndarray:
    """Validate the (B, C, H, W) layout: square power-of-two grid, finite entries."""
    f = np.asarray(f)
    if f.ndim != 4:
        raise ValueError(f"{name}: expected 4-d (B, C, H, W) array, got shape {f.shape}")
    b, c, h, w = f.shape
    if b < 1 or c < 1:
        raise ValueError(f"{name}: B and C must be >= 1, got {f.shape}")
    if h != w:
        raise ValueError(f"{name}: grid must be square, got H={h}, W={w}")
    if h < 2 or (h & (h - 1)) != 0:
        raise ValueError(f"{name}: grid size must be a power of two >= 2, got {h}")
    if not np.all(np.isfinite(f)):
        raise ValueError(f"{name}: contains non-finite entries")
    return f


def fft2(f: np.ndarray) -> np.ndarray:
    """Unnormalized forward DFT over the last two axes, half-spectrum layout."""
    return np.fft.rfft2(f)


def ifft2(s: np.ndarray, width: int | None = None) -> np.ndarray:
    """Inverse of :func:`fft2`; divides by H*W.

    Equivalent to Hermitian completion of the half spectrum followed by a
    full inverse DFT with the imaginary residue discarded.
    """
    s = np.asarray(s)
    h = s.shape[-2]
    w = width if width is not None else 2 * (s.shape[-1] - 1)
    if w // 2 + 1 != s.shape[-1]:
        raise ValueError(f"half-spectrum width {s.shape[-1]} inconsistent with W={w}")
    return np.fft.irfft2(s, s=(h, w))


def fft2_adjoint(g: np.ndarray, width: int | None = None) -> np.ndarray:
    """Adjoint of :func:`fft2` under the real inner product Re<u, v>.

    Interior columns of the half spectrum stand for a conjugate pair, so
    they are halved before routing through the (normalized) inverse.
    """
    g = np.asarray(g)
    h = g.shape[-2]
    w = width if width is not None else 2 * (g.shape[-1] - 1)
    d = np.ones(g.shape[-1])
    d[1 : w // 2] = 0.5
    return h * w * np.fft.irfft2(g * d, s=(h, w))


def ifft2_adjoint(v: np.ndarray) -> np.ndarray:
    """Adjoint of :func:`ifft2`: doubled interior columns of rfft2(v)/(H*W)."""
    v = np.asarray(v)
    h, w = v.shape[-2], v.shape[-1]
    wc = np.ones(w // 2 + 1)
    wc[1 : w // 2] = 2.0
    return wc * np.fft.rfft2(v) / (h * w)


@lru_cache(maxsize=64)
def wavenumbers(h: int, w: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Integer wavevectors (cycles per domain) for the full H x W spectrum."""
    w = h if w is None else w
    k1 = np.fft.fftfreq(h, d=1.0 / h)
    k2 = np.fft.fftfreq(w, d=1.0 / w)
    return k1, k2


@dataclass(frozen=True)
class GrfSpec:
    """Stationary Gaussian random field law on the periodic unit square.

    ``rbf`` uses a squared-exponential kernel of the given length scale;
    ``inverse_laplacian_squared`` has spectral density (|2 pi k|^2 + shift)^-2.
    Fields are normalized so the pointwise standard deviation equals ``amplitude``.
    """

    kind: str = "rbf"
    length_scale: float = 0.05
    shift: float = 9.0
    amplitude: float = 1.0

    def __post_init__(self):
        if self.kind not in GRF_KINDS:
            raise ValueError(f"unknown GRF kind {self.kind!r}; expected one of {GRF_KINDS}")
        if self.kind == "rbf" and self.length_scale <= 0:
            raise ValueError(f"length_scale must be > 0, got {self.length_scale}")
        if self.kind == "inverse_laplacian_squared" and self.shift <= 0:
            raise ValueError(f"shift must be > 0, got {self.shift}")
        if self.amplitude <= 0:
            raise ValueError(f"amplitude must be > 0, got {self.amplitude}")


def grf_spectral_density(spec: GrfSpec, h: int, w: int | None = None) -> np.ndarray:
    """Per-mode variance array (H, W), scaled so the field variance is amplitude^2."""
    w = h if w is None else w
    k1, k2 = wavenumbers(h, w)
    ksq = k1[:, None] ** 2 + k2[None, :] ** 2
    if spec.kind == "rbf":
        dens = np.exp(-2.0 * np.pi**2 * spec.length_scale**2 * ksq)
    else:
        dens = ((2.0 * np.pi) ** 2 * ksq + spec.shift) ** -2.0
    if not np.all(np.isfinite(dens)) or np.any(dens < 0):
        raise ValueError("spectral density must be finite and non-negative")
    dens *= spec.amplitude**2 * (h * w) / dens.sum()
    return dens


def sample_grf(spec: GrfSpec, shape: tuple[int, ...], seed: int) -> np.ndarray:
    """Draw a GRF sample of the given (B, C, H, W) shape, deterministic per seed.

    White noise is filtered in Fourier space by the square root of the
    spectral density; the result is exactly real and mean-zero in law.
    """
    b, c, h, w = shape
    rng = np.random.default_rng(seed)
    white = rng.standard_normal((b, c, h, w))
    root = np.sqrt(grf_spectral_density(spec, h, w))
    return np.fft.ifft2(np.fft.fft2(white) * root).real


def downsample(f: np.ndarray, factor: int) -> np.ndarray:
    """Non-overlapping mean pooling over factor x factor blocks."""
    f = np.asarray(f)
    h, w = f.shape[-2], f.shape[-1]
    if factor < 1 or h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide grid {h}x{w}")
    if factor == 1:
        return f
    lead = f.shape[:-2]
    blocks = f.reshape(*lead, h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(-3, -1))


@lru_cache(maxsize=64)
def _bilinear_taps(h_out: int, factor: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """1-d source indices (lo, hi) and hi-weight for upsampling to h_out."""
    h_in = h_out // factor
    src = (np.arange(h_out) + 0.5) / factor - 0.5
    lo = np.clip(np.floor(src).astype(int), 0, h_in - 1)
    hi = np.clip(lo + 1, 0, h_in - 1)
    t = np.clip(src - np.floor(src), 0.0, 1.0)
    t[src < 0] = 0.0
    t[src > h_in - 1] = 0.0
    return lo, hi, t


def upsample(f: np.ndarray, factor: int) -> np.ndarray:
    """Bilinear interpolation by an integer factor (edges replicated)."""
    f = np.asarray(f)
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return f
    h, w = f.shape[-2], f.shape[-1]
    lo_r, hi_r, t_r = _bilinear_taps(h * factor, factor)
    lo_c, hi_c, t_c = _bilinear_taps(w * factor, factor)
    rows = f[..., lo_r, :] * (1 - t_r)[:, None] + f[..., hi_r, :] * t_r[:, None]
    return rows[..., :, lo_c] * (1 - t_c) + rows[..., :, hi_c] * t_c


def _pad_spectrum_axis(s: np.ndarray, factor: int, axis: int) -> np.ndarray:
    # zero-pad one frequency axis, splitting the Nyquist bin into +/- halves
    s = np.moveaxis(s, axis, -1)
    n = s.shape[-1]
    big_n, nh = n * factor, n // 2
    out = np.zeros(s.shape[:-1] + (big_n,), complex)
    out[..., :nh] = s[..., :nh]
    out[..., big_n - nh + 1 :] = s[..., nh + 1 :]
    out[..., nh] = 0.5 * s[..., nh]
    out[..., big_n - nh] = 0.5 * s[..., nh]
    return np.moveaxis(out, -1, axis)


def _truncate_spectrum_axis(s: np.ndarray, factor: int, axis: int) -> np.ndarray:
    # inverse of _pad_spectrum_axis: merge the +/- Nyquist bins back
    s = np.moveaxis(s, axis, -1)
    big_n = s.shape[-1]
    n, nh = big_n // factor, big_n // factor // 2
    out = np.zeros(s.shape[:-1] + (n,), complex)
    out[..., :nh] = s[..., :nh]
    out[..., nh + 1 :] = s[..., big_n - nh + 1 :]
    out[..., nh] = s[..., nh] + s[..., big_n - nh]
    return np.moveaxis(out, -1, axis)


def upsample_bandlimited(f: np.ndarray, factor: int) -> np.ndarray:
    """Exact band-limited (Fourier zero-padding) upsampling by an integer factor."""
    f = np.asarray(f)
    if factor == 1:
        return f
    s = np.fft.fft2(f)
    s = _pad_spectrum_axis(_pad_spectrum_axis(s, factor, -2), factor, -1)
    return np.fft.ifft2(s).real * factor**2


def downsample_bandlimited(f: np.ndarray, factor: int) -> np.ndarray:
    """Spectral truncation; exact inverse of :func:`upsample_bandlimited`."""
    f = np.asarray(f)
    if factor == 1:
        return f
    h, w = f.shape[-2], f.shape[-1]
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide grid {h}x{w}")
    s = np.fft.fft2(f)
    s = _truncate_spectrum_axis(_truncate_spectrum_axis(s, factor, -2), factor, -1)
    return np.fft.ifft2(s).real / factor**2


def spectral_derivative(f: np.ndarray, axis: int, order: int = 1) -> np.ndarray:
    """Periodic derivative: multiply the spectrum by (i 2 pi k)^order on one axis.

    The Nyquist mode is zeroed for odd orders so the result stays real.
    """
    f = np.asarray(f)
    if axis not in (-2, -1, f.ndim - 2, f.ndim - 1):
        raise ValueError(f"axis must address one of the last two dims, got {axis}")
    axis = -2 if axis in (-2, f.ndim - 2) else -1
    h, w = f.shape[-2], f.shape[-1]
    k1, _ = wavenumbers(h, w)
    k2 = np.fft.rfftfreq(w, d=1.0 / w)
    s = np.fft.rfft2(f)
    if axis == -2:
        mult = (1j * 2 * np.pi * k1) ** order
        if order % 2 == 1:
            mult[h // 2] = 0.0
        s = s * mult[:, None]
    else:
        mult = (1j * 2 * np.pi * k2) ** order
        if order % 2 == 1:
            mult[-1] = 0.0
        s = s * mult
    return np.fft.irfft2(s, s=(h, w))
