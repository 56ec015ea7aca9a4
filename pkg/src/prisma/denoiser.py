"""Conditional U-shaped spectral-operator denoiser with residual attention.

Each layer runs a global spectral path (per-mode complex weights on the
retained low-frequency block) plus a local residual block, per

    x_{l+1} = IFFT(W_l . FFT(x_sra)) + psi_l(x_l),

where x_sra is the input modulated by the spectral residual attention
block. SRA scores the per-mode phase alignment between the feature
spectrum and the (channel-lifted) residual spectrum, turns it into a
sigmoid attention mask, and blends the mask with the identity through a
learned per-sample guidance strength predicted from the spatially
averaged residual and the noise-level embedding:

    S(k) = |sum_c x_c(k) conj(r_c(k))| / sqrt(C),
    A(k) = sigmoid(w_gain(k) * S(k)),
    out  = IFFT(((1 - g) + g * A) . FFT(x)).

Scores are computed on (H*W)-normalized spectra so the modulation is
resolution independent; parameters address retained modes only, letting a
trained model run at a finer grid unchanged.

Ablation switches: ``sra_mode`` off/concat/sra controls whether the
residual is dropped, only concatenated as an input channel, or also
routed through SRA; ``gate_mode`` and ``attention_mode`` expose the
gating and phase variants.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .fields import downsample

SRA_MODES = ("off", "concat", "sra")
GATE_MODES = ("skip_gate", "multiplicative", "none")
ATTENTION_MODES = ("phase_aware", "magnitude_only")
LIFT_MODES = ("conv", "broadcast")

IN_CHANNELS = 7  # [a_noisy, u_noisy, Ma*a_obs, Mu*u_obs, Ma, Mu, residual]
OUT_CHANNELS = 2
RESIDUAL_CLAMP = 100.0

_gate_trace: list | None = None


def start_gate_trace() -> None:
    """Collect per-block guidance strengths from subsequent forward passes."""
    global _gate_trace
    _gate_trace = []


def pop_gate_trace() -> list:
    global _gate_trace
    out, _gate_trace = (_gate_trace or []), None
    return out


@dataclass(frozen=True)
class DenoiserConfig:
    levels: int = 3
    channels: tuple[int, ...] = (32, 64, 64)
    modes: tuple[int, ...] = (12, 8, 4)
    embed_dim: int = 256
    dropout: float = 0.13
    sra_mode: str = "sra"
    gate_mode: str = "skip_gate"
    attention_mode: str = "phase_aware"
    lift_mode: str = "conv"
    sigma_min: float = 0.002
    sigma_max: float = 80.0

    def __post_init__(self):
        if self.levels < 1 or len(self.channels) != self.levels or len(self.modes) != self.levels:
            raise ValueError("channels and modes must list one entry per level")
        if any(c < 1 for c in self.channels):
            raise ValueError("channel widths must be >= 1")
        if self.embed_dim < 4 or self.embed_dim % 2:
            raise ValueError("embed_dim must be an even integer >= 4")
        for name, val, allowed in (
            ("sra_mode", self.sra_mode, SRA_MODES),
            ("gate_mode", self.gate_mode, GATE_MODES),
            ("attention_mode", self.attention_mode, ATTENTION_MODES),
            ("lift_mode", self.lift_mode, LIFT_MODES),
        ):
            if val not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {val!r}")

    def check_resolution(self, h: int) -> None:
        for lvl, m in enumerate(self.modes):
            res = h // 2**lvl
            if 2 * m > res:
                raise ValueError(
                    f"level {lvl} retains {m} modes but runs at resolution {res}"
                )

    def layer_tags(self) -> list[tuple[str, int]]:
        """(parameter prefix, level) for every layer, encoder to decoder."""
        tags = [(f"level{l}.enc", l) for l in range(self.levels - 1)]
        tags.append((f"level{self.levels - 1}", self.levels - 1))
        tags.extend((f"level{l}.dec", l) for l in reversed(range(self.levels - 1)))
        return tags


def gradcheck_config() -> DenoiserConfig:
    """Small reference model for the full finite-difference gradient check."""
    return DenoiserConfig(
        levels=2, channels=(8, 8), modes=(3, 2), embed_dim=16, dropout=0.0
    )


def _groups_for(c: int) -> int:
    for g in range(min(8, c), 0, -1):
        if c % g == 0:
            return g
    return 1


def init_params(config: DenoiserConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """All learnable tensors, keyed by stable documented names."""
    rng = np.random.default_rng(seed)
    p: dict[str, np.ndarray] = {}

    def conv_w(o, c, k=None):
        if k is None:
            fan = c
            return rng.standard_normal((o, c)) / np.sqrt(fan)
        fan = c * k * k
        return rng.standard_normal((o, c, k, k)) / np.sqrt(fan)

    c0 = config.channels[0]
    e = config.embed_dim
    p["lift.w"] = conv_w(c0, IN_CHANNELS)
    p["lift.b"] = np.zeros(c0)

    for tag, lvl in config.layer_tags():
        c = config.channels[lvl]
        m = config.modes[lvl]
        # complex spectral weights stored as interleaved (.., 2) reals
        p[f"{tag}.spectral.w"] = rng.standard_normal((c, c, 2 * m - 1, m, 2)) / np.sqrt(2.0 * c)
        p[f"{tag}.psi.gn1.gamma"] = np.ones(c)
        p[f"{tag}.psi.gn1.beta"] = np.zeros(c)
        p[f"{tag}.psi.conv1.w"] = conv_w(c, c, 3)
        p[f"{tag}.psi.conv1.b"] = np.zeros(c)
        p[f"{tag}.psi.gn2.gamma"] = np.ones(c)
        p[f"{tag}.psi.gn2.beta"] = np.zeros(c)
        p[f"{tag}.psi.conv2.w"] = conv_w(c, c, 3)
        p[f"{tag}.psi.conv2.b"] = np.zeros(c)
        p[f"{tag}.emb.w"] = rng.standard_normal((c, e)) / np.sqrt(e)
        p[f"{tag}.emb.b"] = np.zeros(c)
        if config.sra_mode == "sra":
            # start at the identity: A = 0.5 everywhere, g_res ~ 0.12
            p[f"{tag}.sra.w_gain"] = np.zeros((2 * m - 1, m))
            if config.lift_mode == "conv":
                p[f"{tag}.sra.lift.w"] = rng.standard_normal((c, 1))
            p[f"{tag}.sra.mlp.w1"] = rng.standard_normal((e, e + 1)) / np.sqrt(e + 1)
            p[f"{tag}.sra.mlp.b1"] = np.zeros(e)
            p[f"{tag}.sra.mlp.w2"] = rng.standard_normal((1, e)) / np.sqrt(e)
            p[f"{tag}.sra.mlp.b2"] = np.full(1, -2.0)

    for l in range(config.levels - 1):
        ci, co = config.channels[l], config.channels[l + 1]
        p[f"down{l}.w"] = conv_w(co, ci)
        p[f"down{l}.b"] = np.zeros(co)
        p[f"up{l}.w"] = conv_w(ci, co)
        p[f"up{l}.b"] = np.zeros(ci)
        p[f"fuse{l}.w"] = conv_w(ci, 2 * ci)
        p[f"fuse{l}.b"] = np.zeros(ci)

    p["head.gn.gamma"] = np.ones(c0)
    p["head.gn.beta"] = np.zeros(c0)
    p["head.w"] = 0.1 * conv_w(OUT_CHANNELS, c0)
    p["head.b"] = np.zeros(OUT_CHANNELS)
    return p


def param_count(params: dict[str, np.ndarray]) -> int:
    return sum(int(v.size) for v in params.values())


def noise_embedding(sigma: np.ndarray, embed_dim: int) -> np.ndarray:
    """Sinusoidal features of log(sigma) at embed_dim/2 geometric frequencies."""
    sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
    if np.any(sigma <= 0):
        raise ValueError("sigma must be positive")
    half = embed_dim // 2
    freqs = np.exp(-np.log(1e4) * np.arange(half) / (half - 1))
    ang = np.log(sigma)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def edm_coefficients(sigma: np.ndarray, sigma_data: np.ndarray):
    """Per-channel preconditioning (c_skip, c_out, c_in) and loss weight."""
    s = np.asarray(sigma, dtype=float)[:, None]  # (B, 1)
    sd = np.asarray(sigma_data, dtype=float)[None, :]  # (1, C)
    den = s**2 + sd**2
    c_skip = sd**2 / den
    c_out = s * sd / np.sqrt(den)
    c_in = 1.0 / np.sqrt(den)
    weight = den / (s * sd) ** 2
    return c_skip, c_out, c_in, weight


def standardize_residual(r: np.ndarray, scale: float) -> np.ndarray:
    """Divide by the running scale, then clamp to the fixed trust region."""
    out = r / max(float(scale), 1e-12)
    return np.clip(out, -RESIDUAL_CLAMP, RESIDUAL_CLAMP)


def assemble_input(x_noisy: np.ndarray, x_obs: np.ndarray, masks: np.ndarray,
                   r_channel: np.ndarray, c_in: np.ndarray) -> np.ndarray:
    """Fixed 7-channel conditioning stack at the native resolution."""
    if x_noisy.shape != x_obs.shape or x_noisy.shape != masks.shape:
        raise ValueError("x_noisy, x_obs and masks must share a (B, 2, H, W) shape")
    scaled = x_noisy * c_in[:, :, None, None]
    return np.concatenate([scaled, masks * x_obs, masks, r_channel], axis=1)


@dataclass
class ConditioningPack:
    """Observations, masks, and the precomputed native-resolution residual."""

    x_obs: np.ndarray  # (B, 2, H, W)
    masks: np.ndarray  # (B, 2, H, W) binary
    residual: np.ndarray  # (B, 1, H, W), raw (unstandardized)


def sra_block(p, tag: str, x, r_l: np.ndarray, c_emb: np.ndarray,
              config: DenoiserConfig, m: int):
    """Spectral residual attention at one layer; identity when g_res -> 0."""
    b, c, h, w = x.value.shape if isinstance(x, ad.Var) else x.shape
    wh = w // 2 + 1
    norm = 1.0 / (np.sqrt(c) * float(h * w) ** 2)

    xs = ad.fft2(x)
    xm = ad.take_modes(xs, m)

    if config.lift_mode == "conv":
        r_lift = ad.conv1x1(ad.Var(r_l), p[f"{tag}.sra.lift.w"])
    else:
        r_lift = ad.broadcast_channels(ad.Var(r_l), c)
    rm = ad.take_modes(ad.fft2(r_lift), m)

    if config.attention_mode == "phase_aware":
        inner = ad.csum_channels(ad.cmul(xm, rm, conj_b=True))
        score = ad.smul(ad.cabs(inner), norm)
    else:
        mags = ad.mul(ad.cabs(xm), ad.cabs(rm))
        score = ad.smul(ad.csum_channels(mags), norm)

    attn = ad.sigmoid(ad.scale_modes(score, p[f"{tag}.sra.w_gain"]))

    gate = guidance_gate(p, tag, r_l, c_emb)  # (B,)
    if config.gate_mode == "skip_gate":
        ones = np.ones_like(attn.value)
        mult = ad.add(ad.Var(ones), ad.bscale(ad.sub(attn, ad.Var(ones)), gate))
    elif config.gate_mode == "multiplicative":
        mult = ad.bscale(attn, gate)
    else:
        mult = attn

    # retained modes get the multiplier, unretained ones pass through
    ones_block = np.ones_like(mult.value)
    full = ad.add(
        ad.put_modes(ad.sub(mult, ad.Var(ones_block)), h, wh),
        ad.Var(np.ones((b, 1, h, wh))),
    )
    return ad.ifft2(ad.cscale(xs, full), width=w)


def guidance_gate(p, tag: str, r_l: np.ndarray, c_emb: np.ndarray):
    """sigmoid(MLP([residual RMS, noise embedding])) in (0, 1), one per sample.

    The sign-invariant spatial average is taken as the RMS: unlike mean |r|
    it is exactly preserved under band-limited resampling (Parseval), which
    keeps the whole block resolution transferable.
    """
    r_avg = np.sqrt((r_l**2).mean(axis=(1, 2, 3)))[:, None]  # (B, 1)
    inp = np.concatenate([r_avg, c_emb], axis=1)
    hidden = ad.relu(ad.affine(ad.Var(inp), p[f"{tag}.sra.mlp.w1"], p[f"{tag}.sra.mlp.b1"]))
    out = ad.sigmoid(ad.affine(hidden, p[f"{tag}.sra.mlp.w2"], p[f"{tag}.sra.mlp.b2"]))
    if _gate_trace is not None:
        _gate_trace.append(np.asarray(out.value).reshape(-1).copy())
    return ad.reshape(out, (inp.shape[0],))


def uno_layer(p, tag: str, x, r_l: np.ndarray, c_emb: np.ndarray,
              config: DenoiserConfig, lvl: int, train: bool = False,
              drop_rng: np.random.Generator | None = None):
    """One spectral + local layer; SRA feeds the spectral path only."""
    b, c, h, w = x.value.shape
    wh = w // 2 + 1
    m = config.modes[lvl]

    x_sra = sra_block(p, tag, x, r_l, c_emb, config, m) if config.sra_mode == "sra" else x
    spec_in = ad.take_modes(ad.fft2(x_sra), m)
    w_spec = ad.as_complex(p[f"{tag}.spectral.w"])
    spec_out = ad.ifft2(ad.put_modes(ad.cspec_matmul(w_spec, spec_in), h, wh), width=w)

    groups = _groups_for(c)
    hloc = ad.groupnorm(x, p[f"{tag}.psi.gn1.gamma"], p[f"{tag}.psi.gn1.beta"], groups)
    emb_bias = ad.affine(ad.Var(c_emb), p[f"{tag}.emb.w"], p[f"{tag}.emb.b"])
    hloc = ad.add_channel_bias(hloc, emb_bias)
    hloc = ad.conv2d(ad.gelu(hloc), p[f"{tag}.psi.conv1.w"], p[f"{tag}.psi.conv1.b"])
    hloc = ad.groupnorm(hloc, p[f"{tag}.psi.gn2.gamma"], p[f"{tag}.psi.gn2.beta"], groups)
    hloc = ad.gelu(hloc)
    if train and config.dropout > 0:
        hloc = ad.dropout(hloc, config.dropout, drop_rng)
    hloc = ad.conv2d(hloc, p[f"{tag}.psi.conv2.w"], p[f"{tag}.psi.conv2.b"])
    psi = ad.add(x, hloc)

    return ad.add(spec_out, psi)


def network_forward(p, x_in: np.ndarray, r_std: np.ndarray, c_emb: np.ndarray,
                    config: DenoiserConfig, train: bool = False,
                    drop_rng: np.random.Generator | None = None):
    """Raw network: 7-channel input -> 2-channel output. p maps names to
    Vars (training) or ndarrays (inference)."""
    levels = config.levels
    r_levels = [downsample(r_std, 2**l) for l in range(levels)]

    h = ad.conv1x1(ad.Var(x_in), p["lift.w"], p["lift.b"])
    skips = []
    for l in range(levels - 1):
        h = uno_layer(p, f"level{l}.enc", h, r_levels[l], c_emb, config, l, train, drop_rng)
        skips.append(h)
        h = ad.conv1x1(ad.meanpool2(h), p[f"down{l}.w"], p[f"down{l}.b"])

    h = uno_layer(p, f"level{levels - 1}", h, r_levels[levels - 1], c_emb, config,
                  levels - 1, train, drop_rng)

    for l in reversed(range(levels - 1)):
        h = ad.conv1x1(ad.upsample2(h), p[f"up{l}.w"], p[f"up{l}.b"])
        h = ad.conv1x1(ad.concat_channels([h, skips[l]]), p[f"fuse{l}.w"], p[f"fuse{l}.b"])
        h = uno_layer(p, f"level{l}.dec", h, r_levels[l], c_emb, config, l, train, drop_rng)

    h = ad.gelu(ad.groupnorm(h, p["head.gn.gamma"], p["head.gn.beta"], _groups_for(config.channels[0])))
    return ad.conv1x1(h, p["head.w"], p["head.b"])


class Denoiser:
    """Config + parameters + the preconditioning state estimated in training."""

    def __init__(self, config: DenoiserConfig, params: dict | None = None, seed: int = 0):
        self.config = config
        self.params = init_params(config, seed) if params is None else params
        self.sigma_data = np.ones(OUT_CHANNELS)
        self.residual_scale = 1.0

    def param_count(self) -> int:
        return param_count(self.params)

    def denoise(self, x_noisy: np.ndarray, sigma: np.ndarray, pack: ConditioningPack,
                params: dict | None = None, train: bool = False,
                drop_rng: np.random.Generator | None = None) -> ad.Var:
        """Predict the clean state under the noise-dependent preconditioning

        x0_hat = c_skip(s) x_noisy + c_out(s) F(c_in(s) x_noisy, cond, c_noise).
        """
        p = self.params if params is None else params
        cfg = self.config
        sigma = np.atleast_1d(np.asarray(sigma, dtype=float))
        lo, hi = cfg.sigma_min / 10.0, cfg.sigma_max * 10.0
        if np.any(sigma < lo) or np.any(sigma > hi):
            raise ValueError(f"sigma outside the supported range [{lo}, {hi}]")
        cfg.check_resolution(x_noisy.shape[-1])

        c_skip, c_out, c_in, _ = edm_coefficients(sigma, self.sigma_data)
        r_std = standardize_residual(pack.residual, self.residual_scale)
        r_channel = r_std if cfg.sra_mode in ("sra", "concat") else np.zeros_like(r_std)
        x_in = assemble_input(x_noisy, pack.x_obs, pack.masks, r_channel, c_in)
        c_emb = noise_embedding(sigma, cfg.embed_dim)

        raw = network_forward(p, x_in, r_std, c_emb, cfg, train=train, drop_rng=drop_rng)
        scaled = ad.mul(raw, ad.Var(c_out[:, :, None, None] * np.ones_like(raw.value)))
        return ad.add(scaled, ad.Var(c_skip[:, :, None, None] * x_noisy))

    def spawn(self, **config_updates) -> "Denoiser":
        """Same weights under a modified config (ablation plumbing)."""
        other = Denoiser(replace(self.config, **config_updates), params=self.params)
        other.sigma_data = self.sigma_data
        other.residual_scale = self.residual_scale
        return other
